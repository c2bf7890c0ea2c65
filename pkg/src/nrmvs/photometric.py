"""Bilaterally weighted NCC between a reference and a source view.

The reference window around ``project(ref, x)`` is back-projected onto the
tangent plane ``(x, n)``, carried to ``(x_hat, n_hat)`` by the rigid motion
that aligns the normals with minimal twist, and re-projected into the
source view. With an identity deformation this is the usual plane-induced
homography of PatchMatch stereo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as kn
from .defgraph import DeformationGraph, deform_points, skinning_weights_batch
from .geometry import CameraView

STATUS_NAMES = {kn.OK: "ok", kn.OUT_OF_BOUNDS: "out of bounds", kn.FLAT: "flat patch", kn.DEGENERATE: "degenerate"}


@dataclass
class PatchSampler:
    window: int = 11
    sigma_color: float = 0.2
    sigma_spatial: float | None = None

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.sigma_spatial is None:
            self.sigma_spatial = 0.5 * self.radius

    @property
    def radius(self) -> int:
        return self.window // 2


def _cam(view: CameraView, level: int):
    return view.image_at(level), np.ascontiguousarray(view.K_at(level)), view.R, view.t


def ncc_bilateral(
    ref: CameraView,
    src: CameraView,
    x: np.ndarray,
    n: np.ndarray,
    x_hat: np.ndarray,
    n_hat: np.ndarray,
    sampler: PatchSampler | None = None,
    level: int = 0,
) -> tuple[float, str]:
    """Photometric consistency of one surface point.

    Returns:
        ``(rho, status)`` with status ``"ok"``, ``"out of bounds"`` or
        ``"flat patch"``. Non-ok results carry ``rho = 0``.
    """
    sampler = sampler or PatchSampler()
    rho, status = ncc_many(ref, src, x, n, x_hat, n_hat, sampler, level)
    return float(rho[0]), STATUS_NAMES[int(status[0])]


def ncc_many(ref, src, X, N, Xh, Nh, sampler: PatchSampler, level: int = 0):
    """Vectorised :func:`ncc_bilateral` returning raw kernel status codes."""
    arr = [np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 3)) for a in (X, N, Xh, Nh)]
    return kn.ncc_batch(
        *_cam(ref, level), *_cam(src, level), *arr,
        sampler.radius, sampler.sigma_color, sampler.sigma_spatial,
    )


@dataclass
class Template:
    """Canonical-frame surface samples used by the dense term."""

    points: np.ndarray
    normals: np.ndarray

    def __len__(self):
        return len(self.points)


def new_mask(template: Template) -> np.ndarray:
    """All-ones consistency mask C_i."""
    return np.ones(len(template), dtype=bool)


def dense_residuals(
    template: Template,
    graph: DeformationGraph,
    refs: list[CameraView],
    src: CameraView,
    mask: np.ndarray,
    level: int = 0,
    sampler: PatchSampler | None = None,
    weights=None,
):
    """Per (reference view, template point) residuals ``C_i (1 - rho)``.

    Returns:
        ``(residuals, out_of_bounds)``, both shaped ``(len(refs), n_points)``.
        Out-of-bounds samples contribute 0 and are flagged.
    """
    sampler = sampler or PatchSampler()
    idx, w = weights if weights is not None else skinning_weights_batch(template.points, graph)
    xh = deform_points(template.points, graph, (idx, w))
    mh = np.einsum("nk,nkij,nj->ni", w, graph.R[idx], template.normals)
    res = np.zeros((len(refs), len(template)))
    oob = np.zeros((len(refs), len(template)), dtype=bool)
    for r, ref in enumerate(refs):
        rho, status = ncc_many(ref, src, template.points, template.normals, xh, mh, sampler, level)
        bad = (status == kn.OUT_OF_BOUNDS) | (status == kn.DEGENERATE)
        res[r] = np.where(mask & ~bad, 1.0 - rho, 0.0)
        oob[r] = bad
    return res, oob
