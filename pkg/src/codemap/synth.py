"""Synthetic scenes: ray-cast planes and boxes with procedural texture.

Purpose-built for testing, so everything is analytic and deterministic:
depth comes from exact ray-primitive intersection, intensity from
band-limited value noise evaluated in world space (view-independent, so
cross-frame photometric consistency is exact up to interpolation), and
correspondences/observations come from a global landmark table rather
than feature matching.

Texture bandwidth matters: wavelengths are kept >= 0.45 m so that at
desk-scale depths the image-space period is tens of pixels and bilinear
interpolation of a rendered frame is accurate to ~1e-4 intensity units.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError
from .factors import Correspondence
from .geometry import Intrinsics, Pose, project_points
from .image import DenseImage
from .noise import (
    EmgParams,
    NEW_LANDMARK_REP_ERROR,
    SparseObservation,
    observations_to_images,
    perturb_depths_along_ray,
    sample_emg,
    sparsify_depth,
)
from .pipeline import KeyframePacket

log = logging.getLogger(__name__)

MAX_MATCHES_PER_PAIR = 200


@dataclass(frozen=True)
class Plane:
    """Finite textured rectangle: local z=0 plane, extents are half-widths."""

    pose: Pose
    half_extent: Tuple[float, float]
    texture_seed: Optional[int] = 0
    base_intensity: float = 0.55


@dataclass(frozen=True)
class Box:
    """Axis-aligned textured box."""

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    texture_seed: Optional[int] = 0
    base_intensity: float = 0.55


@dataclass(frozen=True, eq=False)
class SceneSpec:
    primitives: Tuple
    trajectory: Tuple[Pose, ...]
    intrinsics: Intrinsics

    def __post_init__(self) -> None:
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        if not self.trajectory:
            raise ValueError("scene needs at least one camera pose")


def _texture_waves(seed: int, n_waves: int = 16):
    """Fixed random-phase cosine bank: directions, wavenumbers, phases, amps.

    Wavelengths are log-spaced across a broad band so photometric alignment
    has one deep minimum instead of the alias lattice a few pure tones
    would produce. The band and the contrast budget are chosen to mimic
    real indoor imagery at the 2-4 m working range: intensity gradients a
    few 0.01 per pixel, strong enough that the photometric term genuinely
    anchors surfaces against drift, but with the finest wavelength kept
    comfortably above the pixel pitch so point-sampled renders do not
    alias.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_waves, 3))
    dirs[:, 2] *= 0.3
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    wavelengths = np.geomspace(0.12, 1.4, n_waves)
    k = 2 * np.pi / wavelengths
    phases = rng.uniform(0, 2 * np.pi, n_waves)
    amps = rng.uniform(0.75, 1.0, n_waves)
    amps *= 0.5 / np.sum(amps)
    return dirs * k[:, None], phases, amps


def _texture_values(points: np.ndarray, seed: Optional[int], base: float) -> np.ndarray:
    if seed is None:
        return np.full(points.shape[0], base)
    waves, phases, amps = _texture_waves(seed)
    phase = points @ waves.T + phases
    return base + np.cos(phase) @ amps


def _intersect_plane(origins, dirs, plane: Plane):
    """Ray-plane hits; t is in units of the (z=1-normalized) ray, i.e. camera depth."""
    inv = plane.pose.inverse()
    o = inv.transform(origins)
    d = inv.rotate(dirs)
    dz = d[..., 2]
    safe = np.where(np.abs(dz) > 1e-12, dz, 1.0)
    t = -o[..., 2] / safe
    local = o + t[..., None] * d
    hx, hy = plane.half_extent
    hit = (
        (np.abs(dz) > 1e-12)
        & (t > 1e-6)
        & (np.abs(local[..., 0]) <= hx)
        & (np.abs(local[..., 1]) <= hy)
    )
    return np.where(hit, t, np.inf)


def _intersect_box(origins, dirs, box: Box):
    """Slab test against an axis-aligned box; returns entry t or inf."""
    c = np.asarray(box.center)
    half = np.asarray(box.size) / 2.0
    lo = c - half
    hi = c + half
    safe = np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
    t1 = (lo - origins) / safe
    t2 = (hi - origins) / safe
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 1e-6) & (tmin > 1e-6)
    return np.where(hit, tmin, np.inf)


def _cast(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest-primitive intersection: (t, primitive index) with inf for miss."""
    best_t = np.full(origins.shape[:-1], np.inf)
    best_prim = np.full(origins.shape[:-1], -1, dtype=np.int64)
    for idx, prim in enumerate(spec.primitives):
        if isinstance(prim, Plane):
            t = _intersect_plane(origins, dirs, prim)
        elif isinstance(prim, Box):
            t = _intersect_box(origins, dirs, prim)
        else:
            raise TypeError(f"unknown primitive {type(prim).__name__}")
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_prim = np.where(closer, idx, best_prim)
    return best_t, best_prim


def render(spec: SceneSpec, frame_index: int) -> Tuple[DenseImage, DenseImage]:
    """Ray-cast one trajectory frame to (intensity, depth)."""
    if not (0 <= frame_index < len(spec.trajectory)):
        raise IndexError(
            f"frame index {frame_index} out of range for {len(spec.trajectory)} poses"
        )
    k = spec.intrinsics
    pose = spec.trajectory[frame_index]
    us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
    rays_cam = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=np.float64)],
        axis=-1,
    )
    # World rays keep camera z = 1 scaling, so the hit parameter t IS the
    # camera-frame depth.
    rays_w = rays_cam @ pose.rotation().T
    origins = np.broadcast_to(pose.t, rays_w.shape)
    t, prim_idx = _cast(spec, origins, rays_w)

    depth = np.where(np.isfinite(t), t, 0.0)
    intensity = np.zeros(t.shape)
    hits_any = prim_idx >= 0
    if np.any(hits_any):
        points = origins + t[..., None] * rays_w
        for idx, prim in enumerate(spec.primitives):
            sel = prim_idx == idx
            if not np.any(sel):
                continue
            vals = _texture_values(points[sel], prim.texture_seed, prim.base_intensity)
            intensity[sel] = vals
    else:
        raise DomainError(f"camera pose {frame_index} sees no primitive")
    intensity = np.clip(intensity, 0.0, 1.0)
    d = depth[depth > 0]
    if d.size and (d.min() < 0.2 or d.max() > 20.0):
        log.warning(
            "frame %d depths outside the (0.2, 20) m envelope: [%.2f, %.2f]",
            frame_index,
            d.min(),
            d.max(),
        )
    return (
        DenseImage.from_array(intensity, "intensity"),
        DenseImage.from_array(depth, "depth"),
    )


# ---------------------------------------------------------------------------
# Sequences with a consistent landmark table


@dataclass(eq=False)
class _Frame:
    index: int
    pose: Pose
    intensity: DenseImage
    depth: DenseImage
    intrinsics: Intrinsics


def _surface_depth_at(depth: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Rendered depth at the nearest pixel, 0 when out of bounds."""
    h, w = depth.shape
    u = np.clip(np.round(uv[:, 0]).astype(int), 0, w - 1)
    v = np.clip(np.round(uv[:, 1]).astype(int), 0, h - 1)
    return depth[v, u]


def make_sequence(
    spec: SceneSpec,
    n_points: int,
    noise: Optional[EmgParams],
    seed: int,
) -> List[KeyframePacket]:
    """Render the trajectory into keyframe packets with exact ground truth.

    Landmarks get globally consistent ids: frame 0 seeds the table from
    detected keypoints, later frames add keypoints that no existing
    landmark already covers. Observations store exact projections and
    depths; with noise enabled, depths are perturbed per the Fig. 9
    procedure against the previous frame and rep_error carries the EMG
    target (single-frame landmarks keep the new-landmark value 10).
    Correspondences are exact and capped at 200 per pair.
    """
    if len(spec.trajectory) < 2:
        raise ValueError("sequence needs >= 2 frames")
    k = spec.intrinsics
    frames = []
    for f in range(len(spec.trajectory)):
        intensity, depth = render(spec, f)
        frames.append(
            _Frame(f, spec.trajectory[f], intensity, depth, k)
        )

    landmarks_w: List[np.ndarray] = []
    # observations[f] = list of (landmark_id, u, v, exact depth)
    observations: Dict[int, List[Tuple[int, float, float, float]]] = {}
    seen_in: Dict[int, List[int]] = {}

    for frame in frames:
        obs_f: List[Tuple[int, float, float, float]] = []
        covered = np.zeros((k.height, k.width), bool)
        depth_grid = frame.depth.astype64()
        t_cw = frame.pose.inverse()
        if landmarks_w:
            pts_cam = t_cw.transform(np.array(landmarks_w))
            uv, valid = project_points(pts_cam, k)
            z = pts_cam[:, 2]
            inb = (
                valid
                & (uv[:, 0] >= 0)
                & (uv[:, 0] <= k.width - 1)
                & (uv[:, 1] >= 0)
                & (uv[:, 1] <= k.height - 1)
            )
            surf = _surface_depth_at(depth_grid, np.nan_to_num(uv))
            visible = inb & (surf > 0) & (np.abs(z - surf) < np.maximum(0.02, 0.01 * surf))
            for lm_id in np.nonzero(visible)[0]:
                u, v = uv[lm_id]
                obs_f.append((int(lm_id), float(u), float(v), float(z[lm_id])))
                seen_in.setdefault(int(lm_id), []).append(frame.index)
                cu, cv = int(round(u)), int(round(v))
                covered[
                    max(cv - 2, 0) : cv + 3, max(cu - 2, 0) : cu + 3
                ] = True
        if len(obs_f) < n_points:
            detected = sparsify_depth(
                frame.intensity, frame.depth, n_points, seed + 17 * frame.index
            )
            budget = n_points - len(obs_f)
            for det in detected:
                if budget == 0:
                    break
                iu, iv = int(det.u), int(det.v)
                if covered[iv, iu]:
                    continue
                p_cam = np.array(
                    [
                        (det.u - k.cx) / k.fx * det.depth,
                        (det.v - k.cy) / k.fy * det.depth,
                        det.depth,
                    ]
                )
                lm_id = len(landmarks_w)
                landmarks_w.append(frame.pose.transform(p_cam))
                obs_f.append((lm_id, det.u, det.v, det.depth))
                seen_in.setdefault(lm_id, []).append(frame.index)
                covered[max(iv - 2, 0) : iv + 3, max(iu - 2, 0) : iu + 3] = True
                budget -= 1
        observations[frame.index] = obs_f

    packets: List[KeyframePacket] = []
    for frame in frames:
        obs_f = observations[frame.index]
        ids = np.array([o[0] for o in obs_f], dtype=int)
        uv = np.array([[o[1], o[2]] for o in obs_f]) if obs_f else np.zeros((0, 2))
        depths = np.array([o[3] for o in obs_f])
        matched = np.array([len(seen_in[i]) > 1 for i in ids], bool) if obs_f else np.zeros(0, bool)

        if noise is not None and len(obs_f):
            virt = frames[frame.index - 1] if frame.index > 0 else frames[1]
            targets = sample_emg(noise, seed + 101 * (frame.index + 1), len(obs_f))
            rng = np.random.default_rng(seed + 101 * (frame.index + 1) + 1)
            signs = rng.choice([-1.0, 1.0], len(obs_f))
            new_depth, _, ok = perturb_depths_along_ray(
                uv, depths, frame.pose, virt.pose, k, targets, signs
            )
            emitted_depth = np.where(ok, new_depth, depths)
            emitted_rep = np.where(ok, targets, 0.0)
        else:
            emitted_depth = depths
            emitted_rep = np.zeros(len(obs_f))
        # Landmarks never matched elsewhere carry the new-landmark marker.
        if len(obs_f):
            emitted_rep = np.where(matched, emitted_rep, NEW_LANDMARK_REP_ERROR)

        sparse_obs = [
            SparseObservation(
                landmark_id=int(ids[i]),
                u=float(uv[i, 0]),
                v=float(uv[i, 1]),
                depth=float(emitted_depth[i]),
                rep_error=float(emitted_rep[i]),
            )
            for i in range(len(obs_f))
        ]
        sparse_depth, rep_error = observations_to_images(sparse_obs, k.width, k.height)
        packets.append(
            KeyframePacket(
                id=frame.index,
                timestamp=float(frame.index),
                pose=frame.pose,
                intrinsics=k,
                intensity=frame.intensity,
                sparse_depth=sparse_depth,
                rep_error=rep_error,
                observations=sparse_obs,
                matches={},
                gt_depth=frame.depth,
            )
        )

    # Exact correspondences between consecutive frames, stored on the later
    # packet (the optimizer reads either direction).
    index_of: List[Dict[int, int]] = []
    for f in range(len(frames)):
        index_of.append({o[0]: n for n, o in enumerate(observations[f])})
    for f in range(1, len(frames)):
        prev, cur = observations[f - 1], observations[f]
        shared = sorted(set(index_of[f - 1]) & set(index_of[f]))
        if len(shared) > MAX_MATCHES_PER_PAIR:
            pick = np.linspace(0, len(shared) - 1, MAX_MATCHES_PER_PAIR).astype(int)
            shared = [shared[i] for i in pick]
        ms = []
        for lm in shared:
            oc = cur[index_of[f][lm]]
            op = prev[index_of[f - 1][lm]]
            ms.append(
                Correspondence(
                    landmark_id=lm,
                    pixel_i=(oc[1], oc[2]),
                    pixel_j=(op[1], op[2]),
                )
            )
        if ms:
            packets[f].matches[f - 1] = ms
    return packets


# ---------------------------------------------------------------------------
# Stock scenes


def _look_at_origin_pose(position, target=(0.0, 0.0, 0.0), up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose looking from position toward target."""
    p = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - p
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(upv, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nr
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = down
    m[:3, 2] = fwd
    m[:3, 3] = p
    return Pose.from_matrix(m)


def default_intrinsics(width: int = 256, height: int = 192) -> Intrinsics:
    """Desk-scale pinhole model with ~60 degree horizontal field of view."""
    f = 0.866 * width
    return Intrinsics(fx=f, fy=f, cx=width / 2.0 - 0.5, cy=height / 2.0 - 0.5,
                      width=width, height=height)


def plane_scene(
    width: int = 256, height: int = 192, n_frames: int = 4, textured: bool = True
) -> SceneSpec:
    """A large plane at z ~ 2.4 m with a slight slant, lateral camera track."""
    k = default_intrinsics(width, height)
    plane_pose = Pose.from_rotvec((0.12, -0.09, 0.0), (0.0, 0.0, 2.4))
    plane = Plane(
        pose=plane_pose,
        half_extent=(6.0, 5.0),
        texture_seed=7 if textured else None,
    )
    step = 0.12
    traj = tuple(
        Pose.from_rotvec((0.0, -0.02 * f, 0.0), (step * f, 0.015 * f, 0.0))
        for f in range(n_frames)
    )
    return SceneSpec(primitives=(plane,), trajectory=traj, intrinsics=k)


def box_scene(width: int = 256, height: int = 192, n_frames: int = 12) -> SceneSpec:
    """A 0.8 m box on a backing plane, orbit trajectory for fusion tests."""
    k = default_intrinsics(width, height)
    box = Box(center=(0.0, 0.0, 0.0), size=(0.8, 0.8, 0.8), texture_seed=3)
    back = Plane(
        pose=Pose.from_rotvec((0.0, np.pi, 0.0), (0.0, 0.0, 3.5)),
        half_extent=(8.0, 8.0),
        texture_seed=5,
    )
    radius = 2.6
    traj = []
    for f in range(n_frames):
        ang = 2 * np.pi * f / n_frames
        pos = (radius * math.sin(ang), -0.4, -radius * math.cos(ang))
        traj.append(_look_at_origin_pose(pos))
    return SceneSpec(primitives=(box, back), trajectory=tuple(traj), intrinsics=k)


def room_scene(width: int = 256, height: int = 192, n_frames: int = 6) -> SceneSpec:
    """Two walls and a floor with a box, a gentle forward track."""
    k = default_intrinsics(width, height)
    wall_z = Plane(
        pose=Pose.from_rotvec((0.0, np.pi, 0.0), (0.0, 0.0, 4.0)),
        half_extent=(6.0, 4.0),
        texture_seed=11,
    )
    wall_x = Plane(
        pose=Pose.from_rotvec((0.0, np.pi / 2, 0.0), (2.5, 0.0, 1.5)),
        half_extent=(5.0, 4.0),
        texture_seed=13,
    )
    floor = Plane(
        pose=Pose.from_rotvec((-np.pi / 2, 0.0, 0.0), (0.0, 1.2, 1.5)),
        half_extent=(8.0, 8.0),
        texture_seed=17,
    )
    box = Box(center=(-0.6, 0.75, 2.4), size=(0.9, 0.9, 0.9), texture_seed=19)
    traj = tuple(
        Pose.from_rotvec((0.0, 0.03 * f, 0.0), (0.08 * f, 0.0, 0.15 * f))
        for f in range(n_frames)
    )
    return SceneSpec(
        primitives=(wall_z, wall_x, floor, box), trajectory=tuple(traj), intrinsics=k
    )


STOCK_SCENES = {
    "plane": plane_scene,
    "plane-flat": lambda **kw: plane_scene(textured=True, **kw),
    "plane-textureless": lambda **kw: plane_scene(textured=False, **kw),
    "box": box_scene,
    "room": room_scene,
}
