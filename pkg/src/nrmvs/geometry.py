"""Pinhole cameras, rays, projection and triangulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BehindCameraError, DegenerateGeometryError

_GAUSS5 = np.exp(-0.5 * np.arange(-2, 3) ** 2)
_GAUSS5 /= _GAUSS5.sum()


def build_pyramid(image: np.ndarray, levels: int = 3) -> list[np.ndarray]:
    """Gaussian pyramid; level 0 is the input, each level halves (floor) both sides.

    Uses a separable 5x5 Gaussian with sigma 1 followed by 2x decimation, so a
    pixel ``i`` on level ``l+1`` sits on pixel ``2i`` of level ``l``.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    pyr = [np.ascontiguousarray(image, dtype=np.float64)]
    for _ in range(levels - 1):
        prev = pyr[-1]
        blurred = ndimage.correlate1d(prev, _GAUSS5, axis=0, mode="nearest")
        blurred = ndimage.correlate1d(blurred, _GAUSS5, axis=1, mode="nearest")
        h, w = prev.shape[0] // 2, prev.shape[1] // 2
        pyr.append(np.ascontiguousarray(blurred[: 2 * h : 2, : 2 * w : 2]))
    return pyr


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def point_at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


@dataclass
class CameraView:
    """A calibrated grayscale view.

    ``R, t`` map world to camera coordinates (``X_cam = R @ X + t``). Pixel
    centres sit on integer coordinates.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image: np.ndarray
    levels: int = 3
    name: str = ""
    pyramid: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.image = np.ascontiguousarray(self.image, dtype=np.float64)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if np.any(np.abs(self.K[1:, 0]) > 0) or self.K[2, 1] != 0 or self.K[2, 2] != 1:
            raise ValueError("intrinsics must be upper triangular with K[2,2] = 1")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9) or np.linalg.det(self.R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        self.pyramid = build_pyramid(self.image, self.levels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def K_at(self, level: int) -> np.ndarray:
        s = 0.5**level
        return np.diag([s, s, 1.0]) @ self.K

    def image_at(self, level: int) -> np.ndarray:
        return self.pyramid[level]

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.R.T + self.t

    def to_world(self, xc: np.ndarray) -> np.ndarray:
        return (np.asarray(xc, dtype=np.float64) - self.t) @ self.R


def project(view: CameraView, x: np.ndarray, level: int = 0) -> np.ndarray:
    """Project world point(s) ``x`` (..., 3) to pixel coordinates (..., 2).

    Raises:
        BehindCameraError: if any point has non-positive camera depth.
    """
    xc = view.to_camera(x)
    z = xc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    uvw = xc @ view.K_at(level).T
    return uvw[..., :2] / uvw[..., 2:3]


def depth_of(view: CameraView, x: np.ndarray) -> np.ndarray:
    """z-depth of world point(s) in the camera frame."""
    return view.to_camera(x)[..., 2]


def unproject(view: CameraView, u: np.ndarray, depth: np.ndarray, level: int = 0) -> np.ndarray:
    """Back-project pixel(s) with z-depth to world points."""
    u = np.asarray(u, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    hom = np.concatenate([u, np.ones(u.shape[:-1] + (1,))], axis=-1)
    rays = hom @ np.linalg.inv(view.K_at(level)).T
    return view.to_world(rays * depth[..., None])


def keypoint_ray(view: CameraView, u: np.ndarray) -> Ray:
    """Ray from the camera centre through pixel ``u``."""
    u = np.asarray(u, dtype=np.float64)
    d_cam = np.linalg.solve(view.K, np.array([u[0], u[1], 1.0]))
    d = view.R.T @ d_cam
    return Ray(view.center, d / np.linalg.norm(d))


def project_to_ray(x: np.ndarray, ray: Ray) -> np.ndarray:
    """Closest point to ``x`` on ``ray``; the ray parameter is clamped at 0."""
    s = max(0.0, float(np.dot(np.asarray(x) - ray.origin, ray.direction)))
    return ray.origin + s * ray.direction


def project_to_rays(x: np.ndarray, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Vectorised ``project_to_ray`` over (n, 3) arrays."""
    s = np.einsum("ij,ij->i", x - origins, directions)
    return origins + np.maximum(s, 0.0)[:, None] * directions


def triangulate(views: list[CameraView], pixels: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares triangulation: linear DLT then one Gauss-Newton step.

    Args:
        views: at least two views.
        pixels: (n_views, 2) observations.

    Returns:
        The 3D point and the maximum reprojection error over the views (px).

    Raises:
        DegenerateGeometryError: if all rays are parallel within 1e-8 rad.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if len(views) < 2 or pixels.shape != (len(views), 2):
        raise ValueError("need >= 2 views with one pixel each")

    dirs = np.array([keypoint_ray(v, u).direction for v, u in zip(views, pixels)])
    sines = np.linalg.norm(np.cross(dirs[:, None, :], dirs[None, :, :]), axis=-1)
    if sines.max() < 1e-8:
        raise DegenerateGeometryError("rays are parallel")

    rows = []
    for v, u in zip(views, pixels):
        P = v.K @ np.hstack([v.R, v.t[:, None]])
        rows.append(u[0] * P[2] - P[0])
        rows.append(u[1] * P[2] - P[1])
    A = np.asarray(rows)
    _, _, vt = np.linalg.svd(A)
    h = vt[-1]
    if abs(h[3]) < 1e-300:
        raise DegenerateGeometryError("point at infinity")
    x = h[:3] / h[3]

    x = _gauss_newton_step(views, pixels, x)
    err = max(np.linalg.norm(project_unchecked(v, x) - u) for v, u in zip(views, pixels))
    return x, float(err)


def project_unchecked(view: CameraView, x: np.ndarray) -> np.ndarray:
    xc = view.to_camera(x)
    uvw = xc @ view.K.T
    return uvw[..., :2] / uvw[..., 2:3]


def _gauss_newton_step(views, pixels, x):
    J = []
    r = []
    for v, u in zip(views, pixels):
        xc = v.R @ x + v.t
        fx, fy, s, cx, cy = v.K[0, 0], v.K[1, 1], v.K[0, 1], v.K[0, 2], v.K[1, 2]
        z = xc[2]
        if z <= 0:
            return x
        a, b = xc[0] / z, xc[1] / z
        r.append([fx * a + s * b + cx - u[0], fy * b + cy - u[1]])
        da = np.array([1 / z, 0, -xc[0] / z**2]) @ v.R
        db = np.array([0, 1 / z, -xc[1] / z**2]) @ v.R
        J.append(fx * da + s * db)
        J.append(fy * db)
    J = np.asarray(J)
    r = np.asarray(r).ravel()
    step, *_ = np.linalg.lstsq(J, -r, rcond=None)
    return x + step
