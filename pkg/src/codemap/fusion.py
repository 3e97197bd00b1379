"""TSDF fusion of dense depth maps and mesh extraction.

The volume stores a truncated signed distance (normalized to [-1, 1] by
the truncation band) plus an integration weight per voxel. Integration
sweeps voxels, projects them into the depth map, and folds the new
signed distance into a weighted running average. With unit sample
weights and the weight cap, averaging is commutative until a voxel
saturates, which keeps integration order-independent in the common case.

Voxels more than one truncation band behind the observed surface are
occluded in that view and carry no information, so they are left
untouched rather than being pushed toward -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter
from skimage import measure

from .errors import DomainError, InvalidDepthError
from .geometry import Intrinsics, Pose
from .image import DenseImage

DEFAULT_VOXEL_SIZE = 0.02
DEFAULT_TRUNCATION = 0.08
DEFAULT_MAX_WEIGHT = 100.0


@dataclass(eq=False)
class TsdfVolume:
    """Dense voxel grid over an axis-aligned world-space region."""

    origin: np.ndarray
    voxel_size: float
    dims: Tuple[int, int, int]
    truncation: float = DEFAULT_TRUNCATION
    max_weight: float = DEFAULT_MAX_WEIGHT
    tsdf: np.ndarray = field(init=False)
    weight: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.voxel_size <= 0:
            raise ValueError(f"voxel size must be positive, got {self.voxel_size}")
        if self.truncation < self.voxel_size:
            raise ValueError(
                f"truncation {self.truncation} below voxel size {self.voxel_size}"
            )
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"volume dims must be positive, got {self.dims}")
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        self.tsdf = np.ones(self.dims, dtype=np.float32)
        self.weight = np.zeros(self.dims, dtype=np.float32)

    @classmethod
    def create(
        cls,
        bounds_min,
        bounds_max,
        voxel_size: float = DEFAULT_VOXEL_SIZE,
        truncation: float = DEFAULT_TRUNCATION,
        max_weight: float = DEFAULT_MAX_WEIGHT,
    ) -> "TsdfVolume":
        """Build a volume covering [bounds_min, bounds_max]."""
        lo = np.asarray(bounds_min, dtype=np.float64)
        hi = np.asarray(bounds_max, dtype=np.float64)
        if np.any(hi <= lo):
            raise ValueError(f"empty bounds {lo} .. {hi}")
        dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel_size)) for i in range(3))
        return cls(
            origin=lo,
            voxel_size=voxel_size,
            dims=dims,
            truncation=truncation,
            max_weight=max_weight,
        )

    def voxel_centers_slab(self, k0: int, k1: int) -> np.ndarray:
        """World coordinates of voxel centers for z-index slab [k0, k1)."""
        nx, ny, _ = self.dims
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.voxel_size
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.voxel_size
        zs = self.origin[2] + (np.arange(k0, k1) + 0.5) * self.voxel_size
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def _discontinuity_mask(d_grid: np.ndarray, limit: float) -> np.ndarray:
    """Pixels whose 3x3 neighborhood straddles a depth discontinuity.

    Voxel lookups that round onto such a pixel are unreliable: the ray
    may actually pass the silhouette and hit the background (or nothing),
    so a vote from this pixel carves phantom walls just inside object
    edges, or stamps phantom beads just outside them. A neighborhood
    that touches an invalid pixel is a discontinuity of unknown size and
    is excluded on the same grounds.
    """
    valid = d_grid > 0
    hi = maximum_filter(np.where(valid, d_grid, -np.inf), size=3)
    lo = minimum_filter(np.where(valid, d_grid, np.inf), size=3)
    jump = np.where(np.isfinite(hi) & np.isfinite(lo), hi - lo, 0.0) > limit
    borders_invalid = maximum_filter(~valid, size=3)
    return valid & (jump | borders_invalid)


def integrate(
    volume: TsdfVolume,
    depth: DenseImage,
    pose: Pose,
    intrinsics: Intrinsics,
    slab: int = 16,
) -> int:
    """Fold one depth map (camera-to-world pose) into the volume.

    Returns the number of voxels updated. Invalid depth pixels (0)
    contribute nothing, and neither do pixels sitting on a depth
    discontinuity wider than two truncation bands (see
    _discontinuity_mask).
    """
    if depth.semantics != "depth":
        raise ValueError(f"expected a depth image, got {depth.semantics!r}")
    if depth.width != intrinsics.width or depth.height != intrinsics.height:
        raise ValueError(
            f"depth {depth.width}x{depth.height} does not match intrinsics "
            f"{intrinsics.width}x{intrinsics.height}"
        )
    d_grid = depth.astype64()
    edge = _discontinuity_mask(d_grid, 2.0 * volume.truncation)
    t_cw = pose.inverse()
    r_cw = t_cw.rotation()
    trunc = volume.truncation
    touched = 0
    nz = volume.dims[2]
    for k0 in range(0, nz, slab):
        k1 = min(k0 + slab, nz)
        centers = volume.voxel_centers_slab(k0, k1)
        cam = centers @ r_cw.T + t_cw.t
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intrinsics.fx * cam[..., 0] / z + intrinsics.cx
            v = intrinsics.fy * cam[..., 1] / z + intrinsics.cy
        in_view = (
            (z > 1e-6)
            & (u >= -0.5)
            & (u < intrinsics.width - 0.5)
            & (v >= -0.5)
            & (v < intrinsics.height - 0.5)
        )
        if not np.any(in_view):
            continue
        ui = np.clip(np.round(np.where(in_view, u, 0)).astype(np.int64), 0, intrinsics.width - 1)
        vi = np.clip(np.round(np.where(in_view, v, 0)).astype(np.int64), 0, intrinsics.height - 1)
        d_obs = d_grid[vi, ui]
        sdf = d_obs - z
        usable = in_view & (d_obs > 0) & (sdf >= -trunc) & ~edge[vi, ui]
        if not np.any(usable):
            continue
        tsdf_new = np.clip(sdf / trunc, -1.0, 1.0)
        w_slab = volume.weight[:, :, k0:k1]
        t_slab = volume.tsdf[:, :, k0:k1]
        w_old = np.where(usable, w_slab, 0.0)
        blended = (w_old * t_slab + tsdf_new) / (w_old + 1.0)
        t_slab[usable] = blended[usable].astype(np.float32)
        w_slab[usable] = np.minimum(w_old[usable] + 1.0, volume.max_weight).astype(
            np.float32
        )
        touched += int(np.count_nonzero(usable))
    return touched


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape[0] != self.vertices.shape[0]:
                raise ValueError("one normal per vertex required")
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")

    @property
    def is_empty(self) -> bool:
        return self.vertices.shape[0] == 0


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching cubes over observed voxels; world-space vertices.

    A cube is meshed only when all eight of its corners carry weight.
    Unobserved voxels keep the +1 initialization, so letting a cube mix
    observed and unobserved corners would fabricate zero crossings one
    truncation band away from any real surface. Eroding the observed
    mask costs a one-voxel margin at the observation boundary and
    removes those phantoms.
    """
    if not np.any(volume.weight > 0):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mask = minimum_filter(volume.weight > 0, size=3)
    try:
        verts, faces, normals, _ = measure.marching_cubes(
            volume.tsdf.astype(np.float64),
            level=0.0,
            spacing=(volume.voxel_size,) * 3,
            mask=mask,
        )
    except (ValueError, RuntimeError):
        # No zero crossing inside the observed region.
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # marching_cubes treats array index i as coordinate i*spacing; index i
    # is the center of voxel i, which sits at origin + (i + 0.5) * voxel.
    verts = verts + volume.origin + 0.5 * volume.voxel_size
    tri = verts[faces]
    doubled_area = np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    faces = faces[doubled_area > 0.0]
    return TriangleMesh(verts, faces.astype(np.int64), normals)


def monocular_scale(depths, training_median: float) -> float:
    """Scale correction: training median over the observed median.

    ``depths`` is one DenseImage or a sequence of them; the median pools
    every valid pixel across the collection, so a whole sequence gets one
    common factor. Callers multiply depths and pose translations by it.
    """
    if training_median <= 0:
        raise DomainError(f"training median must be positive, got {training_median}")
    if isinstance(depths, DenseImage):
        depths = [depths]
    if not depths:
        raise InvalidDepthError("no depth images given")
    pooled = [d.astype64()[d.valid_mask()] for d in depths]
    valid = np.concatenate(pooled) if pooled else np.empty(0)
    if valid.size == 0:
        raise InvalidDepthError("depth images have no valid pixels")
    med = float(np.median(valid))
    if med <= 0:
        raise InvalidDepthError(f"median depth must be positive, got {med}")
    return training_median / med


def apply_scale(depth: DenseImage, scale: float) -> DenseImage:
    """Scale valid depths, leaving the invalid sentinel untouched."""
    if scale <= 0:
        raise DomainError(f"scale must be positive, got {scale}")
    values = depth.values.copy()
    mask = depth.valid_mask()
    values[mask] = values[mask] * float(scale)
    return DenseImage.from_array(values, depth.semantics)
