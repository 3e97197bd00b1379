"""Rigid transforms, pinhole projection, warping, and the proximity map.

Conventions used throughout the package:

- Camera frame: x right, y down, z forward. Only points with z > 0 are
  in front of the camera.
- A :class:`Pose` stores a rigid transform as a unit quaternion
  (w, x, y, z) plus a translation; rotation matrices are built on demand.
  Keyframe poses are camera-to-world, so ``T_ji = pose_j.inverse() @ pose_i``
  maps camera-i points into camera j.
- Projection: ``u = fx * x / z + cx``, ``v = fy * y / z + cy``. Integer
  pixel coordinates address pixel centers, column u, row v.
- Proximity: depth d maps to ``p = a / (a + d)`` for a fixed scale a > 0,
  a smooth bijection from [0, inf) onto (0, 1]. Optimization and decoding
  happen in proximity space; metric depth is recovered via
  ``d = a * (1 - p) / p``.

Scalar entry points raise on out-of-domain inputs (behind camera, invalid
depth); the ``*_points`` variants are vectorized and return validity masks
instead, which is what the factor and rendering code consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import BehindCameraError, DomainError, InvalidDepthError, OutOfViewError

_MIN_Z = 1e-9


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=np.float64)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics plus the image size they refer to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resampled by ``factor`` in each axis."""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = math.sqrt(float(np.dot(q, q)))
    if n < 1e-12:
        raise ValueError("quaternion norm too small")
    q = q / n
    # Fix the double-cover sign so equal rotations compare equal.
    if q[0] < 0.0:
        q = -q
    return q


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal combination for stability.
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    return _quat_normalize(np.array([w, x, y, z]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as unit quaternion (w, x, y, z) + translation."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", _quat_normalize(self.q))
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return cls(q=_matrix_to_quat(m[:3, :3]), t=m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "Pose":
        """Axis-angle (rotation vector, radians) constructor; handy in tests."""
        r = np.asarray(rotvec, dtype=np.float64).reshape(3)
        angle = float(np.linalg.norm(r))
        if angle < 1e-16:
            q = np.array([1.0, 0.0, 0.0, 0.0])
        else:
            axis = r / angle
            q = np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])
        return cls(q=q, t=np.asarray(t, dtype=np.float64))

    def rotation(self) -> np.ndarray:
        return _quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self @ other)(x) = self(other(x))."""
        q = _quat_mul(self.q, other.q)
        t = self.rotation() @ other.t + self.t
        return Pose(q=q, t=t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qw, qx, qy, qz = self.q
        q_inv = np.array([qw, -qx, -qy, -qz])
        r_inv = _quat_to_matrix(q_inv)
        return Pose(q=q_inv, t=-(r_inv @ self.t))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation().T + self.t

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation().T


def relative_pose(pose_i: Pose, pose_j: Pose) -> Pose:
    """T_ji mapping camera-i points into camera j, given camera-to-world poses."""
    return pose_j.inverse() @ pose_i


# ---------------------------------------------------------------------------
# Projection


def project(point, k: Intrinsics) -> PixelCoord:
    """Project one camera-frame point; raises BehindCameraError for z <= 0."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if p[2] <= _MIN_Z:
        raise BehindCameraError(f"point has non-positive depth z={p[2]:.6g}")
    u = k.fx * p[0] / p[2] + k.cx
    v = k.fy * p[1] / p[2] + k.cy
    return PixelCoord(float(u), float(v))


def unproject(pixel, depth: float, k: Intrinsics) -> np.ndarray:
    """Back-project a pixel at metric depth into the camera frame."""
    if depth <= 0.0 or not math.isfinite(depth):
        raise InvalidDepthError(f"depth must be positive, got {depth!r}")
    u, v = _pixel_tuple(pixel)
    return np.array(
        [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], dtype=np.float64
    )


def project_points(points: np.ndarray, k: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (uv (N,2), valid (N,)); invalid rows hold NaN."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    valid = z > _MIN_Z
    uv = np.full((p.shape[0], 2), np.nan)
    zs = np.where(valid, z, 1.0)
    uv[:, 0] = k.fx * p[:, 0] / zs + k.cx
    uv[:, 1] = k.fy * p[:, 1] / zs + k.cy
    uv[~valid] = np.nan
    return uv, valid


def unproject_points(uv: np.ndarray, depths: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Vectorized back-projection; caller guarantees positive depths."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    out = np.empty((uv.shape[0], 3))
    out[:, 0] = (uv[:, 0] - k.cx) / k.fx * d
    out[:, 1] = (uv[:, 1] - k.cy) / k.fy * d
    out[:, 2] = d
    return out


def pixel_rays(uv: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Unit-depth ray directions ((u-cx)/fx, (v-cy)/fy, 1) for pixel rows."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    rays = np.empty((uv.shape[0], 3))
    rays[:, 0] = (uv[:, 0] - k.cx) / k.fx
    rays[:, 1] = (uv[:, 1] - k.cy) / k.fy
    rays[:, 2] = 1.0
    return rays


def warp(pixel, depth_i: float, t_ji: Pose, k: Intrinsics) -> Tuple[PixelCoord, float]:
    """Dense-warp one pixel from frame i into frame j.

    Returns the target pixel and its depth in frame j. Raises
    InvalidDepthError for a bad source depth, OutOfViewError if the point
    lands behind camera j or outside the image rectangle.
    """
    p_i = unproject(pixel, depth_i, k)
    p_j = t_ji.transform(p_i)
    if p_j[2] <= _MIN_Z:
        raise OutOfViewError("warped point is behind the target camera")
    out = project(p_j, k)
    if not (0.0 <= out.u <= k.width - 1 and 0.0 <= out.v <= k.height - 1):
        raise OutOfViewError(f"warped pixel ({out.u:.2f}, {out.v:.2f}) leaves the image")
    return out, float(p_j[2])


def warp_points(
    uv: np.ndarray, depths: np.ndarray, t_ji: Pose, k: Intrinsics
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized warp: (uv_j (N,2), z_j (N,), valid (N,)).

    Valid means positive source depth, in front of camera j, and inside
    [0, W-1) x [0, H-1) so a bilinear lookup has all four neighbors.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    rays = pixel_rays(uv, k)
    p_j = (d[:, None] * rays) @ t_ji.rotation().T + t_ji.t
    z = p_j[:, 2]
    valid = (d > 0) & (z > _MIN_Z)
    uv_j, pvalid = project_points(p_j, k)
    valid &= pvalid
    valid &= (
        (uv_j[:, 0] >= 0.0)
        & (uv_j[:, 0] < k.width - 1)
        & (uv_j[:, 1] >= 0.0)
        & (uv_j[:, 1] < k.height - 1)
    )
    return uv_j, z, valid


# ---------------------------------------------------------------------------
# Proximity parametrization


@dataclass(frozen=True)
class ProximityParams:
    """Scale of the depth <-> proximity bijection p = a / (a + d)."""

    a: float = 2.0

    def __post_init__(self) -> None:
        if not (self.a > 0.0 and math.isfinite(self.a)):
            raise ValueError("proximity scale a must be positive and finite")


def depth_to_proximity(depth, params: ProximityParams = ProximityParams()):
    """p = a / (a + d). Scalar or array; d must be >= 0 (0 maps to 1)."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d < 0.0):
        raise DomainError("depth must be nonnegative")
    out = params.a / (params.a + d)
    return float(out) if np.isscalar(depth) or out.ndim == 0 else out


def proximity_to_depth(prox, params: ProximityParams = ProximityParams()):
    """d = a * (1 - p) / p for p in (0, 1]; anything else is a DomainError."""
    p = np.asarray(prox, dtype=np.float64)
    if np.any((p <= 0.0) | (p > 1.0)):
        raise DomainError("proximity must lie in (0, 1]")
    out = params.a * (1.0 - p) / p
    return float(out) if np.isscalar(prox) or out.ndim == 0 else out


def proximity_to_depth_masked(prox: np.ndarray, params: ProximityParams):
    """Vectorized inverse with validity mask instead of raising.

    Valid for p strictly inside (0, 1); p == 1 maps to depth 0, which is
    the invalid sentinel of depth images, so it is excluded here.
    """
    p = np.asarray(prox, dtype=np.float64)
    valid = (p > 0.0) & (p < 1.0)
    safe = np.where(valid, p, 0.5)
    d = params.a * (1.0 - safe) / safe
    return np.where(valid, d, 0.0), valid


def proximity_depth_slope(depth: np.ndarray, params: ProximityParams) -> np.ndarray:
    """dD/dP expressed from depth: with p = a/(a+d), dD/dP = -(a+d)^2 / a."""
    d = np.asarray(depth, dtype=np.float64)
    return -((params.a + d) ** 2) / params.a


def _pixel_tuple(pixel) -> Tuple[float, float]:
    if isinstance(pixel, PixelCoord):
        return pixel.u, pixel.v
    arr = np.asarray(pixel, dtype=np.float64).reshape(2)
    return float(arr[0]), float(arr[1])
