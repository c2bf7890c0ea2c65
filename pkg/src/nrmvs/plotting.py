"""Error-map figures for the ``evaluate`` subcommand."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write  # noqa: E402


def save_error_map(path, depth: np.ndarray, truth: np.ndarray, title: str = "", vmax: float = 5.0) -> None:
    """Relative depth error in percent; pixels without a comparison are grey.

    Args:
        depth: Reconstructed depth, zero where invalid.
        truth: Ground-truth depth, zero where uncovered.
        vmax: Upper end of the colour scale in percent.
    """
    both = (depth > 0) & (truth > 0)
    err = np.full(depth.shape, np.nan)
    err[both] = 100.0 * np.abs(depth[both] - truth[both]) / truth[both]
    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("0.6")
    im = ax.imshow(np.ma.masked_invalid(err), cmap=cmap, vmin=0.0, vmax=vmax)
    fig.colorbar(im, ax=ax, label="relative error [%]")
    ax.set_title(title)
    ax.set_axis_off()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight")
    plt.close(fig)
    atomic_write(path, buf.getvalue())
