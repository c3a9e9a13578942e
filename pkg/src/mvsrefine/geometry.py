"""Pinhole cameras, cross-view warping and depth-derived geometry.

Conventions
-----------
* Extrinsics map world to camera: ``X_cam = R @ X_world + t``.
* Pixel ``(x, y)`` (integer array index) sits at continuous image coordinate
  ``(x + 0.5, y + 0.5)``; :meth:`Camera.project` returns continuous
  coordinates.  With this convention scaling a camera by ``s`` scales every
  continuous coordinate by exactly ``s``.
* Invalid map entries are ``NaN``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

ORTHO_TOL = 1e-6


class GeometryError(ValueError):
    """Raised for degenerate or inconsistent camera configurations."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))

    def scaled(self, s) -> "Intrinsics":
        s = float(s)
        return Intrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s)


def _polar(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    return u @ vt


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """World-to-camera rigid transform.

    The rotation is validated to be orthonormal within ``1e-6`` and then
    snapped to the nearest rotation by polar decomposition.
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL, rtol=0):
            raise GeometryError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation determinant is not +1")
        object.__setattr__(self, "R", _polar(R))
        object.__setattr__(self, "t", t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @classmethod
    def from_matrix(cls, M) -> "Extrinsics":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])


def camera_center(extrinsics: Extrinsics) -> np.ndarray:
    """World position ``C`` of the camera, i.e. the solution of ``R C + t = 0``."""
    return -extrinsics.R.T @ extrinsics.t


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    width: int
    height: int

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise GeometryError(f"camera must be at least 8x8, got {self.width}x{self.height}")

    @property
    def center(self) -> np.ndarray:
        return camera_center(self.extrinsics)

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics.matrix

    def to_camera(self, X_world) -> np.ndarray:
        X = np.asarray(X_world, dtype=np.float64)
        return X @ self.extrinsics.R.T + self.extrinsics.t

    def project(self, X_world):
        """Continuous image coordinates ``(u, v)`` and camera-frame depth ``z``."""
        Xc = self.to_camera(X_world)
        return project_camera_points(self.intrinsics, Xc)

    def rays(self, xs, ys) -> np.ndarray:
        """Camera-frame rays with unit z through pixel indices ``(xs, ys)``."""
        k = self.intrinsics
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        return np.stack([(xs + 0.5 - k.cx) / k.fx, (ys + 0.5 - k.cy) / k.fy,
                         np.ones(np.broadcast(xs, ys).shape)], axis=-1)


def project_camera_points(intr: Intrinsics, Xc):
    Xc = np.asarray(Xc, dtype=np.float64)
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * Xc[..., 0] / z + intr.cx
        v = intr.fy * Xc[..., 1] / z + intr.cy
    return u, v, z


@dataclass(frozen=True, eq=False)
class CameraRig:
    reference: Camera
    sources: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise GeometryError("a rig needs at least one source camera")

    @property
    def baseline_b(self) -> float:
        return baseline_scale(self)

    @property
    def closest_source(self) -> int:
        c = self.reference.center
        return int(np.argmin([np.linalg.norm(s.center - c) for s in self.sources]))

    def scaled(self, s) -> "CameraRig":
        return CameraRig(scale_camera(self.reference, s), [scale_camera(c, s) for c in self.sources])

    def subset(self, indices) -> "CameraRig":
        return CameraRig(self.reference, [self.sources[i] for i in indices])


def baseline_scale(rig: CameraRig) -> float:
    """Distance from the reference center to the closest source center."""
    if not rig.sources:
        raise GeometryError("a rig needs at least one source camera")
    c = rig.reference.center
    b = min(float(np.linalg.norm(s.center - c)) for s in rig.sources)
    if not b > 0:
        raise GeometryError("degenerate rig: a source shares the reference camera center")
    return b


def to_pseudo_disparity(depth, f: float, b: float) -> np.ndarray:
    """``d = f * b / D``; non-positive or non-finite depths become NaN."""
    if not (f > 0 and b > 0):
        raise GeometryError("pseudo disparity needs f > 0 and b > 0")
    depth = np.asarray(depth, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(depth > 0, (f * b) / depth, np.nan)


def to_metric_depth(pd, scale_fb: float) -> np.ndarray:
    """Inverse of :func:`to_pseudo_disparity` for ``scale_fb = f * b``."""
    if not scale_fb > 0:
        raise GeometryError("scale_fb must be positive")
    pd = np.asarray(pd, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pd > 0, scale_fb / pd, np.nan)


def scale_camera(cam: Camera, s) -> Camera:
    """Camera for an image resized by ``s``; the resulting size must be integral."""
    s = Fraction(s).limit_denominator(1 << 16)
    w, h = cam.width * s, cam.height * s
    if w.denominator != 1 or h.denominator != 1:
        raise GeometryError(f"scale {s} gives non-integral size {w}x{h}")
    return Camera(cam.intrinsics.scaled(s), cam.extrinsics, int(w), int(h))


def crop_camera(cam: Camera, x0: int, y0: int, width: int, height: int) -> Camera:
    """Camera of the sub-image ``[y0:y0+height, x0:x0+width]``."""
    if x0 < 0 or y0 < 0 or x0 + width > cam.width or y0 + height > cam.height:
        raise GeometryError(f"crop {width}x{height}+{x0}+{y0} exceeds the {cam.width}x{cam.height} image")
    k = cam.intrinsics
    return Camera(Intrinsics(k.fx, k.fy, k.cx - x0, k.cy - y0), cam.extrinsics, width, height)


def relative_pose(ref: Camera, src: Camera):
    """``(R, t)`` mapping reference-camera coordinates to source-camera coordinates."""
    R = src.extrinsics.R @ ref.extrinsics.R.T
    t = src.extrinsics.t - R @ ref.extrinsics.t
    return R, t


def warp_points(ref: Camera, src: Camera, xs, ys, depth):
    """Vectorised :func:`warp_pixel`; arrays broadcast against each other.

    ``xs``/``ys`` may be fractional pixel indices.  Returns source pixel
    indices ``(x', y')`` and a validity mask.
    """
    depth = np.asarray(depth, dtype=np.float64)
    xs, ys, depth = np.broadcast_arrays(np.asarray(xs, dtype=np.float64),
                                        np.asarray(ys, dtype=np.float64), depth)
    R, t = relative_pose(ref, src)
    k = ref.intrinsics
    rx = (xs + 0.5 - k.cx) / k.fx
    ry = (ys + 0.5 - k.cy) / k.fy
    with np.errstate(invalid="ignore", over="ignore"):
        X = R[0, 0] * rx + R[0, 1] * ry + R[0, 2]
        Y = R[1, 0] * rx + R[1, 1] * ry + R[1, 2]
        Z = R[2, 0] * rx + R[2, 1] * ry + R[2, 2]
        X = X * depth + t[0]
        Y = Y * depth + t[1]
        Z = Z * depth + t[2]
    ks = src.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = ks.fx * X / Z + ks.cx
        v = ks.fy * Y / Z + ks.cy
        valid = (depth > 0) & (Z > 0) & (u >= 0) & (u < src.width) & (v >= 0) & (v < src.height)
    return u - 0.5, v - 0.5, valid


def warp_pixel(ref: Camera, src: Camera, pixel, depth_D: float):
    """Where reference pixel ``(x, y)`` at metric depth ``D`` lands in ``src``."""
    x, y = pixel
    u, v, ok = warp_points(ref, src, x, y, depth_D)
    return float(u), float(v), bool(ok)


def depth_to_points(depth, cam: Camera) -> np.ndarray:
    """Camera-frame 3-D points ``(H, W, 3)``; invalid depth gives NaN points."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    d = np.where(depth > 0, depth, np.nan)
    return cam.rays(xs, ys) * d[..., None]


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def sobel(img: np.ndarray):
    """Sobel x/y responses of a 2-D or (H, W, C) map with replicate padding."""
    pad = [(1, 1), (1, 1)] + [(0, 0)] * (img.ndim - 2)
    p = np.pad(img, pad, mode="edge")
    h, w = img.shape[:2]
    gx = np.zeros(img.shape)
    gy = np.zeros(img.shape)
    for i in range(3):
        for j in range(3):
            win = p[i:i + h, j:j + w]
            if SOBEL_X[i, j]:
                gx += SOBEL_X[i, j] * win
            if SOBEL_Y[i, j]:
                gy += SOBEL_Y[i, j] * win
    return gx, gy


def normals_from_points(points: np.ndarray) -> np.ndarray:
    """Unit normals from the cross product of Sobel gradients of a point map.

    Normals face the camera (negative z).  Pixels whose 3x3 neighbourhood
    contains an invalid point, or whose gradients are parallel, are NaN.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 3 or points.shape[1] < 3:
        raise GeometryError("normals need at least a 3x3 point map")
    gx, gy = sobel(points)
    n = np.cross(gx, gy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(norm > 1e-12, n / norm, np.nan)
    n[~np.isfinite(points).all(-1)] = np.nan     # the Sobel taps skip the centre point
    flip = n[..., 2] > 0
    n[flip] *= -1
    return n


def normals_from_depth(depth, cam: Camera) -> np.ndarray:
    return normals_from_points(depth_to_points(depth, cam))


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> Extrinsics:
    """World-to-camera extrinsics for a camera at ``center`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Extrinsics(R, -R @ center)
