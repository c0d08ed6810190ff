"""Distortion-free pinhole camera.

Camera frame: x right, y down, z forward. Pixel coordinates share the x/y
orientation, so an upright camera sees gravity as roughly (0, +9.81, 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from flightcap.errors import NonPositiveDepth

# points closer than this to the camera plane are treated as degenerate
MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    c: Tuple[float, float]
    image_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if not np.isfinite(self.f) or self.f <= 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        c = tuple(float(v) for v in self.c)
        if len(c) != 2 or not all(np.isfinite(c)):
            raise ValueError(f"principal point must be two finite values, got {self.c}")
        object.__setattr__(self, "c", c)
        if self.image_size is not None:
            w, h = (int(v) for v in self.image_size)
            if w <= 0 or h <= 0:
                raise ValueError(f"image size must be positive, got {self.image_size}")
            object.__setattr__(self, "image_size", (w, h))

    @property
    def cx(self) -> float:
        return self.c[0]

    @property
    def cy(self) -> float:
        return self.c[1]

    def with_focal(self, f: float) -> "CameraIntrinsics":
        return CameraIntrinsics(float(f), self.c, self.image_size)


def project(p, k: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame point(s) of shape (3,) or (n, 3) to pixels."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0) or not np.all(np.isfinite(p)):
        raise NonPositiveDepth(f"cannot project point(s) with z <= 0: {p[z <= 0]}")
    xy = k.f * p[..., :2] / z[..., None]
    return xy + np.asarray(k.c)


def backproject_ray(q, k: CameraIntrinsics) -> np.ndarray:
    """Unit viewing direction(s) through pixel(s) `q`."""
    q = np.asarray(q, dtype=float)
    d = np.empty(q.shape[:-1] + (3,))
    d[..., :2] = (q - np.asarray(k.c)) / k.f
    d[..., 2] = 1.0
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project_with_jacobian(points: np.ndarray, f: float, c):
    """Vectorised projection used by the residual blocks.

    Returns ``(uv, d_uv_d_point, d_uv_d_f)`` with shapes (n, 2), (n, 2, 3)
    and (n, 2). Raises NonPositiveDepth carrying the first offending index.
    """
    points = np.asarray(points, dtype=float)
    z = points[:, 2]
    bad = ~(z > MIN_DEPTH)
    if np.any(bad):
        raise NonPositiveDepth("non-positive depth during projection", joint=int(np.argmax(bad)))
    inv_z = 1.0 / z
    xn = points[:, 0] * inv_z
    yn = points[:, 1] * inv_z
    uv = np.empty((len(points), 2))
    uv[:, 0] = f * xn + c[0]
    uv[:, 1] = f * yn + c[1]
    fz = f * inv_z
    jac = np.zeros((len(points), 2, 3))
    jac[:, 0, 0] = fz
    jac[:, 0, 2] = -fz * xn
    jac[:, 1, 1] = fz
    jac[:, 1, 2] = -fz * yn
    d_f = np.stack([xn, yn], axis=1)
    return uv, jac, d_f
