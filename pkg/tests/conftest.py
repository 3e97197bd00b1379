"""Shared fixtures: synthetic scenes rendered once per session.

Rendering and code fitting dominate test runtime, so every test that can
work from a shared read-only sequence gets it from here. Fixtures return
immutable packets / decoders; tests must not mutate them.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
import pytest

from codemap.codec import AffineDecoder, ConditioningSet, DepthCode, analytic_decoder, fit_code
from codemap.fusion import TsdfVolume, extract_mesh, integrate
from codemap.image import DenseImage
from codemap.noise import EmgParams
from codemap.pipeline import KeyframePacket
from codemap.synth import box_scene, make_sequence, plane_scene, render


def decoder_for(packet: KeyframePacket) -> AffineDecoder:
    """Condition the analytic decoder on one packet's images."""
    cond = ConditioningSet(packet.intensity, packet.sparse_depth, packet.rep_error)
    return analytic_decoder(cond)


def gt_codes_for(
    packets: Sequence[KeyframePacket], decoders: Sequence[AffineDecoder]
) -> List[DepthCode]:
    return [fit_code(d, p.gt_depth) for p, d in zip(packets, decoders)]


def perturb_codes(
    codes: Sequence[DepthCode], sigma: float, seed: int
) -> List[DepthCode]:
    rng = np.random.default_rng(seed)
    return [DepthCode(c.values + rng.normal(0.0, sigma, c.size)) for c in codes]


def depth_mae(pred: DenseImage, gt: DenseImage) -> float:
    mask = gt.valid_mask() & pred.valid_mask()
    return float(np.mean(np.abs(pred.astype64()[mask] - gt.astype64()[mask])))


def box_surface_distance(points: np.ndarray, half: float = 0.4) -> np.ndarray:
    """Unsigned distance from each point to an axis-aligned box at the
    origin (exact signed-distance-field formula for a cube of half-extent
    ``half``)."""
    q = np.abs(np.asarray(points, dtype=np.float64)) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return np.abs(outside + inside)


# ── Session-scoped scenes ────────────────────────────────────────────────


@pytest.fixture(scope="session")
def plane_packets() -> List[KeyframePacket]:
    """4 textured keyframes at 256x192, 120 clean sparse points each."""
    return make_sequence(plane_scene(), n_points=120, noise=None, seed=5)


@pytest.fixture(scope="session")
def plane_decoders(plane_packets) -> List[AffineDecoder]:
    return [decoder_for(p) for p in plane_packets]


@pytest.fixture(scope="session")
def plane_gt_codes(plane_packets, plane_decoders) -> List[DepthCode]:
    return gt_codes_for(plane_packets, plane_decoders)


@pytest.fixture(scope="session")
def small_packets() -> List[KeyframePacket]:
    """2 textured keyframes at 64x48 for fast factor-level tests."""
    return make_sequence(
        plane_scene(width=64, height=48, n_frames=2), n_points=40, noise=None, seed=3
    )


@pytest.fixture(scope="session")
def small_decoders(small_packets) -> List[AffineDecoder]:
    return [decoder_for(p) for p in small_packets]


@pytest.fixture(scope="session")
def small_gt_codes(small_packets, small_decoders) -> List[DepthCode]:
    return gt_codes_for(small_packets, small_decoders)


@pytest.fixture(scope="session")
def textureless_packets() -> List[KeyframePacket]:
    """Textureless plane pair with noisy sparse depth (the hard case)."""
    return make_sequence(
        plane_scene(n_frames=2, textured=False), n_points=40, noise=EmgParams(), seed=5
    )


@pytest.fixture(scope="session")
def textureless_decoders(textureless_packets) -> List[AffineDecoder]:
    return [decoder_for(p) for p in textureless_packets]


@pytest.fixture(scope="session")
def box_volume() -> TsdfVolume:
    """Ground-truth depths of the orbiting box scene fused into one volume."""
    spec = box_scene()
    volume = TsdfVolume.create((-0.55,) * 3, (0.55,) * 3)
    for f in range(len(spec.trajectory)):
        _, depth = render(spec, f)
        integrate(volume, depth, spec.trajectory[f], spec.intrinsics)
    return volume


@pytest.fixture(scope="session")
def box_mesh(box_volume):
    return extract_mesh(box_volume)


# ── Tiny hand-built packets for pipeline bookkeeping tests ──────────────


def mini_packet(
    kf_id: int,
    landmark_ids: Sequence[int],
    timestamp: float = 0.0,
    width: int = 16,
    height: int = 12,
) -> KeyframePacket:
    """A structurally valid packet whose only interesting content is its
    landmark-id set (drives covisibility) and its id/timestamp."""
    from codemap.geometry import Intrinsics, Pose
    from codemap.noise import SparseObservation

    rng = np.random.default_rng(kf_id)
    intensity = DenseImage.from_array(
        rng.uniform(0.2, 0.8, (height, width)), "intensity"
    )
    sparse = np.zeros((height, width), np.float32)
    rep = np.zeros((height, width), np.float32)
    observations = []
    for n, lm in enumerate(landmark_ids):
        u = int(1 + (3 * n) % (width - 2))
        v = int(1 + (2 * n) % (height - 2))
        sparse[v, u] = 2.0
        rep[v, u] = 0.5
        observations.append(SparseObservation(lm, float(u), float(v), 2.0, 0.5))
    return KeyframePacket(
        id=kf_id,
        timestamp=timestamp if timestamp else float(kf_id),
        pose=Pose.identity(),
        intrinsics=Intrinsics(20.0, 20.0, width / 2, height / 2, width, height),
        intensity=intensity,
        sparse_depth=DenseImage.from_array(sparse, "depth"),
        rep_error=DenseImage.from_array(rep, "rep_error"),
        observations=observations,
    )
