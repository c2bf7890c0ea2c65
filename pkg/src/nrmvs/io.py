"""File formats: PFM depth maps, binary PLY clouds, PNG images, JSON records.

All writers go through :func:`atomic_write` (temp file + rename).
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .defgraph import DeformationGraph
from .errors import ParseError
from .geometry import CameraView


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------


def encode_pfm(data: np.ndarray) -> bytes:
    """Little-endian PFM (scale -1); rows are stored bottom to top."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError("PFM needs an (H, W) or (H, W, 3) array")
    h, w = data.shape[:2]
    return f"{header}\n{w} {h}\n-1.0\n".encode("ascii") + np.ascontiguousarray(data[::-1]).tobytes()


def write_pfm(path, data: np.ndarray) -> None:
    atomic_write(path, encode_pfm(data))


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ParseError(f"{path}: not a PFM file", line=1)
        dims = fh.readline().split()
        scale = float(fh.readline().strip())
        w, h = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

_PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ]
)


def encode_ply(points: np.ndarray, normals: np.ndarray | None = None, colors: np.ndarray | None = None) -> bytes:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    rec = np.zeros(n, dtype=_PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = points.T
    if normals is not None:
        normals = np.asarray(normals).reshape(-1, 3)
        rec["nx"], rec["ny"], rec["nz"] = normals.T
    if colors is not None:
        colors = np.asarray(colors)
        if colors.ndim == 1:
            colors = np.repeat(colors[:, None], 3, axis=1)
        c = np.clip(np.rint(colors * 255.0) if colors.dtype.kind == "f" else colors, 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = c.T
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    return header.encode("ascii") + rec.tobytes()


def write_ply(path, points, normals=None, colors=None) -> None:
    atomic_write(path, encode_ply(points, normals, colors))


def decode_ply(data: bytes, name: str = "<bytes>") -> dict:
    """Parse PLY bytes written by :func:`encode_ply`; returns points, normals, colors."""
    fh = io.BytesIO(data)
    if fh.readline().strip() != b"ply":
        raise ParseError(f"{name}: not a PLY file", line=1)
    n = None
    while True:
        line = fh.readline()
        if not line:
            raise ParseError(f"{name}: missing end_header")
        if line.startswith(b"element vertex"):
            n = int(line.split()[2])
        if line.strip() == b"end_header":
            break
    rec = np.frombuffer(fh.read(), dtype=_PLY_DTYPE, count=n)
    return {
        "points": np.stack([rec["x"], rec["y"], rec["z"]], 1).astype(np.float64),
        "normals": np.stack([rec["nx"], rec["ny"], rec["nz"]], 1).astype(np.float64),
        "colors": np.stack([rec["red"], rec["green"], rec["blue"]], 1),
    }


def read_ply(path) -> dict:
    return decode_ply(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# images, cameras, graphs, matches
# --------------------------------------------------------------------------


def write_png16(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 65535.0), 0, 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_image(path) -> np.ndarray:
    """Grayscale intensities in [0, 1] from an 8- or 16-bit image."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def camera_record(view: CameraView, image_path: str) -> dict:
    return {
        "intrinsics": view.K.ravel().tolist(),
        "rotation": view.R.ravel().tolist(),
        "translation": view.t.tolist(),
        "image_path": image_path,
    }


def load_cameras(path, levels: int = 3) -> list[CameraView]:
    """Load the camera file; image paths are resolved relative to it."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(records, list):
        raise ParseError(f"{path}: expected a JSON array of views")
    views = []
    for i, rec in enumerate(records):
        try:
            img_path = path.parent / rec["image_path"]
            K, R, t = rec["intrinsics"], rec["rotation"], rec["translation"]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{path}: view {i} lacks field {exc}") from exc
        if len(K) != 9 or len(R) != 9 or len(t) != 3:
            raise ParseError(f"{path}: view {i} has malformed intrinsics/rotation/translation")
        views.append(CameraView(K, R, t, read_image(img_path), levels=levels, name=Path(img_path).stem))
    return views


def write_graph(path, graph: DeformationGraph) -> None:
    write_json(path, graph.to_dict())


def read_graph(path) -> DeformationGraph:
    return DeformationGraph.from_dict(json.loads(Path(path).read_text()))


def encode_matches(pairwise: dict) -> list:
    return [
        {"image_a": int(a), "image_b": int(b), "pairs": np.asarray(p, dtype=np.float64).tolist()}
        for (a, b), p in sorted(pairwise.items())
    ]


def _entry_lines(text: str) -> list[int]:
    """Line number at which each top-level array element starts."""
    lines = []
    depth = 0
    line = 1
    in_str = False
    esc = False
    for ch in text:
        if ch == "\n":
            line += 1
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch in "[{":
            if depth == 1:
                lines.append(line)
            depth += 1
        elif ch in "]}":
            depth -= 1
    return lines


def load_matches(path) -> dict:
    """Parse the matches file into ``{(a, b): (n, 4) array}``.

    Raises:
        ParseError: with the line number of the offending entry.
    """
    text = Path(path).read_text()
    try:
        entries = json.loads(text) if text.strip() else []
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(entries, list):
        raise ParseError(f"{path}: expected a JSON array", line=1)
    starts = _entry_lines(text)
    out: dict = {}
    for i, e in enumerate(entries):
        line = starts[i] if i < len(starts) else None
        try:
            a, b = int(e["image_a"]), int(e["image_b"])
            pairs = np.asarray(e["pairs"], dtype=np.float64).reshape(-1, 4)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed entry {i} ({exc})", line=line) from exc
        if a == b or a < 0 or b < 0:
            raise ParseError(f"{path}: invalid image indices in entry {i}", line=line)
        if not np.all(np.isfinite(pairs)):
            raise ParseError(f"{path}: non-finite coordinates in entry {i}", line=line)
        if a > b:
            a, b = b, a
            pairs = pairs[:, [2, 3, 0, 1]]
        key = (a, b)
        out[key] = np.vstack([out[key], pairs]) if key in out else pairs
    return out
