"""Measurement noise simulation for sparse SLAM outputs.

Real sparse front ends hand the mapper keypoint depths whose reprojection
errors follow a heavy-tailed distribution. This module reproduces that:

- :func:`sample_emg` draws reprojection-error magnitudes (pixels) from an
  exponentially modified Gaussian, the composition Normal(loc, scale^2) +
  Exponential(rate = 1/(k * scale)). Negative draws are resampled; the
  truncation shifts the mean by about +1% at the default fit, well inside
  the tolerances anything downstream assumes.
- :func:`sparsify_depth` picks keypoint-like pixels (gradient-magnitude
  corners, padded with uniform draws) and reads exact depths off a
  rendered depth map.
- :func:`perturb_observation` displaces a 3D point along the ray through a
  second (virtual) camera's center until its reprojection in the reference
  frame moves by a target amount. The virtual-frame projection is invariant
  by construction, so the perturbation is exactly the error the reference
  frame would blame on triangulation.
- :func:`build_training_pair` wires the above into (conditioning, ground
  truth) pairs for decoder training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import DomainError, InvalidDepthError
from .geometry import Intrinsics, Pose, unproject_points
from .image import DenseImage

log = logging.getLogger(__name__)

MAX_VIRTUAL_BASELINE = 2.0
NEW_LANDMARK_REP_ERROR = 10.0


@dataclass(frozen=True)
class EmgParams:
    """Exponentially modified Gaussian in pixels: k, loc, scale."""

    k: float = 4.31
    loc: float = 0.44
    scale: float = 0.20

    def __post_init__(self) -> None:
        if self.k <= 0 or self.scale <= 0:
            raise ValueError("EMG k and scale must be positive")

    @property
    def mean(self) -> float:
        """Distribution mean loc + k * scale (before truncation at 0)."""
        return self.loc + self.k * self.scale

    @property
    def variance(self) -> float:
        """Distribution variance scale^2 * (1 + k^2)."""
        return self.scale**2 * (1.0 + self.k**2)


@dataclass(frozen=True)
class SparseObservation:
    """One keypoint measurement in a keyframe."""

    landmark_id: int
    u: float
    v: float
    depth: float
    rep_error: float

    @property
    def pixel(self):
        from .geometry import PixelCoord

        return PixelCoord(self.u, self.v)


def sample_emg(
    params: EmgParams,
    seed: int,
    n: int,
    *,
    loc_is_mean: bool = False,
) -> np.ndarray:
    """Draw n nonnegative EMG samples.

    ``loc_is_mean`` reinterprets ``params.loc`` as the distribution mean
    rather than the Gaussian component's location (the fit this package
    defaults to); the Gaussian location is then loc - k * scale.
    """
    rng = np.random.default_rng(seed)
    loc = params.loc - params.k * params.scale if loc_is_mean else params.loc
    out = np.empty(n)
    remaining = np.arange(n)
    # Resample negatives; a handful of rounds collapses the tail.
    for _ in range(64):
        m = remaining.size
        if m == 0:
            break
        draws = rng.normal(loc, params.scale, m) + rng.exponential(
            params.k * params.scale, m
        )
        out[remaining] = draws
        remaining = remaining[draws < 0]
    if remaining.size:
        out[remaining] = 0.0
    return out


# ---------------------------------------------------------------------------
# Keypoint selection


def sparsify_depth(
    intensity: DenseImage,
    depth: DenseImage,
    n_points: int,
    seed: int,
    *,
    nms_radius: int = 2,
) -> List[SparseObservation]:
    """Pick up to n_points keypoints with valid depth, exact-depth readback.

    Corner response is the image-gradient magnitude; candidates are its
    local maxima under (2 * nms_radius + 1)-pixel non-max suppression,
    strongest first. If corners run out, uniformly random valid pixels pad
    the set. Fewer valid pixels than requested returns all of them and
    logs a warning (the short set is the documented behavior, not an
    error). Deterministic for a fixed seed.
    """
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    img = intensity.astype64()
    d = depth.astype64()
    if not np.any(d > 0):
        raise InvalidDepthError("depth map has no valid pixels to sparsify")
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    size = 2 * nms_radius + 1
    is_peak = (mag == ndimage.maximum_filter(mag, size=size)) & (mag > 1e-9)
    valid = d > 0
    peaks = np.argwhere(is_peak & valid)
    # Strongest first; ties broken by scan order for determinism.
    order = np.lexsort((peaks[:, 1], peaks[:, 0], -mag[peaks[:, 0], peaks[:, 1]]))
    peaks = peaks[order]

    chosen: List[Tuple[int, int]] = []
    taken = np.zeros_like(valid)
    for v, u in peaks[: 4 * n_points]:
        if len(chosen) >= n_points:
            break
        if not taken[v, u]:
            chosen.append((int(v), int(u)))
            taken[v, u] = True

    if len(chosen) < n_points:
        pool = np.argwhere(valid & ~taken)
        rng = np.random.default_rng(seed)
        need = n_points - len(chosen)
        if len(pool) <= need:
            extra = pool
        else:
            extra = pool[rng.choice(len(pool), size=need, replace=False)]
        chosen.extend((int(v), int(u)) for v, u in extra)

    if len(chosen) < n_points:
        log.warning(
            "sparsify_depth: only %d of %d requested points have valid depth",
            len(chosen),
            n_points,
        )
    return [
        SparseObservation(
            landmark_id=i,
            u=float(u),
            v=float(v),
            depth=float(d[v, u]),
            rep_error=0.0,
        )
        for i, (v, u) in enumerate(chosen)
    ]


# ---------------------------------------------------------------------------
# Ray perturbation

_BISECT_ITERS = 60
_BISECT_TOL_PX = 1e-3
_TINY_TARGET_PX = 1e-9
_MIN_DEPTH = 0.05


def perturb_depths_along_ray(
    uv: np.ndarray,
    depths: np.ndarray,
    ref_pose: Pose,
    virtual_pose: Pose,
    k: Intrinsics,
    targets: np.ndarray,
    signs: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized core: returns (perturbed depths, achieved errors, ok mask).

    Each point moves along the line through the virtual camera center
    (sign +1 away from it, -1 toward it) until its reference-frame
    reprojection is ``targets[i]`` pixels from the original pixel. Search
    is bisection on the path parameter over [0, bound] with bound
    0.5 * depth toward / 2 * depth away; targets unreachable inside the
    bound (point near the epipole), points leaving either camera's view,
    and degenerate rays are reported not-ok. Near-zero targets pass
    through unchanged.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d0 = np.asarray(depths, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    signs = np.asarray(signs, dtype=np.float64).reshape(-1)
    n = uv.shape[0]

    p_ref = unproject_points(uv, d0, k)
    p_w = ref_pose.transform(p_ref)
    center = virtual_pose.t
    ray = p_w - center
    ray_len = np.linalg.norm(ray, axis=1)
    ok = (d0 > 0) & (ray_len > 1e-9) & np.isfinite(targets) & (targets >= 0)
    direction = ray / np.where(ray_len > 1e-9, ray_len, 1.0)[:, None]

    # Visibility in the virtual frame (its center is what defines the ray;
    # requiring positive depth there keeps the invariance meaningful).
    t_vw = virtual_pose.inverse()
    z_virtual = t_vw.transform(p_w)[:, 2]
    ok &= z_virtual > 1e-6

    t_rw = ref_pose.inverse()
    r_rw = t_rw.rotation()

    def ref_displacement(t_par: np.ndarray) -> np.ndarray:
        pts = p_w + (signs * t_par)[:, None] * direction
        cam = pts @ r_rw.T + t_rw.t
        z = cam[:, 2]
        bad = z <= 1e-9
        zs = np.where(bad, 1.0, z)
        du = k.fx * cam[:, 0] / zs + k.cx - uv[:, 0]
        dv = k.fy * cam[:, 1] / zs + k.cy - uv[:, 1]
        disp = np.hypot(du, dv)
        disp[bad] = np.inf
        return disp

    bound = np.where(signs > 0, 2.0 * d0, 0.5 * d0)
    trivial = targets < _TINY_TARGET_PX
    active = ok & ~trivial

    hi_disp = ref_displacement(bound)
    reachable = hi_disp >= targets
    ok &= trivial | reachable
    active &= reachable

    lo = np.zeros(n)
    hi = bound.copy()
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        disp = ref_displacement(mid)
        go_up = disp < targets
        lo = np.where(active & go_up, mid, lo)
        hi = np.where(active & ~go_up, mid, hi)

    t_final = np.where(active, 0.5 * (lo + hi), 0.0)
    achieved = ref_displacement(t_final)
    achieved = np.where(trivial, 0.0, achieved)
    ok &= trivial | (np.abs(achieved - targets) <= 10 * _BISECT_TOL_PX)

    pts = p_w + (signs * t_final)[:, None] * direction
    cam = pts @ r_rw.T + t_rw.t
    new_depth = cam[:, 2]
    ok &= new_depth > _MIN_DEPTH
    new_depth = np.where(trivial, d0, new_depth)
    return new_depth, achieved, ok


def perturb_along_ray(
    obs: SparseObservation,
    ref_pose: Pose,
    virt_pose: Pose,
    k: Intrinsics,
    target_err: float,
    sign: int,
) -> Optional[SparseObservation]:
    """Perturb one observation; None if the target is unreachable (dropped).

    Preconditions: the point is in front of both cameras and the virtual
    keyframe is within 2 m of the reference (the working range of the
    error model). The returned observation stores the displaced depth and
    rep_error = target_err.
    """
    baseline = float(np.linalg.norm(ref_pose.t - virt_pose.t))
    if baseline > MAX_VIRTUAL_BASELINE:
        raise DomainError(
            f"virtual keyframe {baseline:.2f} m away exceeds the {MAX_VIRTUAL_BASELINE} m limit"
        )
    if sign not in (-1, 1):
        raise ValueError("sign must be -1 or +1")
    new_depth, achieved, ok = perturb_depths_along_ray(
        np.array([[obs.u, obs.v]]),
        np.array([obs.depth]),
        ref_pose,
        virt_pose,
        k,
        np.array([target_err]),
        np.array([float(sign)]),
    )
    if not ok[0]:
        log.debug(
            "perturbation dropped: landmark %d target %.3f px not reachable",
            obs.landmark_id,
            target_err,
        )
        return None
    return SparseObservation(
        landmark_id=obs.landmark_id,
        u=obs.u,
        v=obs.v,
        depth=float(new_depth[0]),
        rep_error=float(target_err),
    )


# ---------------------------------------------------------------------------
# Training pairs


def observations_to_images(
    observations: Sequence[SparseObservation], width: int, height: int
) -> Tuple[DenseImage, DenseImage]:
    """Rasterize observations into sparse depth + rep_error maps.

    Pixels are rounded to the nearest grid cell; collisions keep the
    nearer point. rep_error is zero exactly where sparse depth is invalid.
    """
    depth = np.zeros((height, width), np.float64)
    rep = np.zeros((height, width), np.float64)
    for o in observations:
        u = int(round(o.u))
        v = int(round(o.v))
        if not (0 <= u < width and 0 <= v < height) or o.depth <= 0:
            continue
        if depth[v, u] > 0 and depth[v, u] <= o.depth:
            continue
        depth[v, u] = o.depth
        rep[v, u] = o.rep_error
    return (
        DenseImage.from_array(depth, "depth"),
        DenseImage.from_array(rep, "rep_error"),
    )


def build_training_pair(
    frame,
    neighbor,
    emg: Optional[EmgParams],
    n_points: int,
    seed: int,
):
    """Make one (ConditioningSet, gt depth) pair from two rendered frames.

    ``frame`` and ``neighbor`` carry .intensity, .depth (DenseImage),
    .pose, .intrinsics. The neighbor only lends its camera center as the
    virtual keyframe for the perturbation; passing emg=None produces
    noise-free sparse depth (exact samples, zero rep_error).
    """
    from .codec import ConditioningSet  # local import: codec is a heavier module

    k = frame.intrinsics
    baseline = float(np.linalg.norm(frame.pose.t - neighbor.pose.t))
    if baseline > MAX_VIRTUAL_BASELINE:
        raise DomainError(
            f"neighbor frame {baseline:.2f} m away exceeds the "
            f"{MAX_VIRTUAL_BASELINE} m virtual-keyframe limit"
        )
    obs = sparsify_depth(frame.intensity, frame.depth, n_points, seed)
    if emg is not None:
        targets = sample_emg(emg, seed + 1, len(obs))
        rng = np.random.default_rng(seed + 2)
        signs = rng.choice([-1.0, 1.0], size=len(obs))
        uv = np.array([[o.u, o.v] for o in obs])
        depths = np.array([o.depth for o in obs])
        new_depth, _, ok = perturb_depths_along_ray(
            uv, depths, frame.pose, neighbor.pose, k, targets, signs
        )
        kept = []
        for i, o in enumerate(obs):
            if not ok[i]:
                log.debug("training pair: dropped landmark %d (unreachable target)", i)
                continue
            kept.append(
                SparseObservation(
                    landmark_id=o.landmark_id,
                    u=o.u,
                    v=o.v,
                    depth=float(new_depth[i]),
                    rep_error=float(targets[i]),
                )
            )
        obs = kept
    sparse_depth, rep_error = observations_to_images(obs, k.width, k.height)
    cond = ConditioningSet(
        intensity=frame.intensity, sparse_depth=sparse_depth, rep_error=rep_error
    )
    return cond, frame.depth
