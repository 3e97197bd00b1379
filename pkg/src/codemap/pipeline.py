"""The dense-mapping service: ingestion, window selection, refinement.

Two roles connected by a one-slot queue. The producer side (``ingest``)
validates and stores packets and schedules a window for the newest
keyframe; it does constant-bounded work so a running solve never blocks
it. The consumer side (``process_window``) predicts depth for new
keyframes (zero code through their decoder), refines the window jointly,
and stores codes and refined depths back into the mapper state.

If windows arrive faster than solves finish, the pending slot is simply
overwritten: stale windows are dropped in favor of the newest, matching
the ~1 Hz refresh the design targets. Already-processed keyframes keep
their last codes as warm starts, so re-optimizing an overlapping window
is cheap.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .codec import ConditioningSet, DepthCode, Decoder
from .errors import CodemapError, InvalidDepthError
from .factors import Correspondence
from .geometry import Intrinsics, Pose
from .image import DenseImage
from .io import LoadedSequence, MatchRecord, ObservationRecord
from .noise import SparseObservation, observations_to_images
from .optimizer import RefineResult, SolverConfig, refine_window

log = logging.getLogger(__name__)

WINDOW_SIZE = 4

DecoderFactory = Callable[["KeyframePacket"], Decoder]


@dataclass(eq=False)
class KeyframePacket:
    """One keyframe as published by the sparse front end."""

    id: int
    timestamp: float
    pose: Pose
    intrinsics: Intrinsics
    intensity: DenseImage
    sparse_depth: DenseImage
    rep_error: DenseImage
    observations: List[SparseObservation] = field(default_factory=list)
    matches: Dict[int, List[Correspondence]] = field(default_factory=dict)
    gt_depth: Optional[DenseImage] = None

    def validate(self) -> None:
        k = self.intrinsics
        named = [("intensity", self.intensity), ("sparse_depth", self.sparse_depth),
                 ("rep_error", self.rep_error)]
        if self.gt_depth is not None:
            named.append(("gt_depth", self.gt_depth))
        for name, img in named:
            if img.width != k.width or img.height != k.height:
                raise ValueError(
                    f"packet {self.id}: {name} is {img.width}x{img.height}, "
                    f"intrinsics say {k.width}x{k.height}"
                )
        rep = self.rep_error.values
        if not np.all(np.isfinite(rep)) or np.any(rep < 0):
            raise ValueError(f"packet {self.id}: rep_error must be finite and >= 0")
        sparse_invalid = ~self.sparse_depth.valid_mask()
        if np.any(rep[sparse_invalid] != 0):
            raise ValueError(
                f"packet {self.id}: rep_error present where sparse depth is invalid"
            )

    def landmark_ids(self) -> Set[int]:
        return {o.landmark_id for o in self.observations}

    def conditioning(self) -> ConditioningSet:
        return ConditioningSet(
            intensity=self.intensity,
            sparse_depth=self.sparse_depth,
            rep_error=self.rep_error,
        )


@dataclass(eq=False)
class _Entry:
    packet: KeyframePacket
    decoder: Optional[Decoder] = None
    code: Optional[DepthCode] = None
    initial_depth: Optional[DenseImage] = None
    refined_depth: Optional[DenseImage] = None
    skipped: bool = False

    @property
    def processed(self) -> bool:
        return self.initial_depth is not None


@dataclass(eq=False)
class MapperState:
    """Owned by the consumer; ingestion touches only the dict and the slot."""

    keyframes: Dict[int, _Entry] = field(default_factory=dict)
    pending_window: Optional[Tuple[int, ...]] = None
    predictions: int = 0
    superseded: int = 0

    @property
    def processed_ids(self) -> Set[int]:
        return {i for i, e in self.keyframes.items() if e.processed}

    def packet(self, kf_id: int) -> KeyframePacket:
        return self.keyframes[kf_id].packet

    def code(self, kf_id: int) -> Optional[DepthCode]:
        return self.keyframes[kf_id].code

    def refined_depth(self, kf_id: int) -> Optional[DenseImage]:
        return self.keyframes[kf_id].refined_depth

    def initial_depth(self, kf_id: int) -> Optional[DenseImage]:
        return self.keyframes[kf_id].initial_depth


@dataclass(frozen=True)
class IngestAck:
    accepted: bool
    deduped: bool = False
    reason: str = ""
    window: Optional[Tuple[int, ...]] = None


def ingest(packet: KeyframePacket, state: MapperState) -> IngestAck:
    """Store a packet and schedule a window for it. Never solves.

    A packet with an already-known id refreshes the stored pose, points,
    and matches (the front end re-sends after each bundle adjustment) but
    schedules no new prediction and no new window.
    """
    try:
        packet.validate()
    except ValueError as e:
        log.warning("rejected packet: %s", e)
        return IngestAck(accepted=False, reason=str(e))
    if packet.id in state.keyframes:
        entry = state.keyframes[packet.id]
        entry.packet = packet
        log.debug("packet %d refreshed (dedupe)", packet.id)
        return IngestAck(accepted=True, deduped=True)
    state.keyframes[packet.id] = _Entry(packet=packet)
    window = select_window(packet.id, state)
    if state.pending_window is not None:
        state.superseded += 1
    state.pending_window = window
    return IngestAck(accepted=True, window=window)


def _frustum_overlap(latest: KeyframePacket, other: KeyframePacket) -> float:
    """Fraction of a coarse ray grid from `latest` landing inside `other`.

    Rays are cast at the latest frame's median sparse depth (2 m when no
    points exist), which is enough signal to rank candidates.
    """
    k = latest.intrinsics
    depths = latest.sparse_depth.astype64()[latest.sparse_depth.valid_mask()]
    d = float(np.median(depths)) if depths.size else 2.0
    us = np.linspace(0, k.width - 1, 8)
    vs = np.linspace(0, k.height - 1, 6)
    uu, vv = np.meshgrid(us, vs)
    pts_cam = np.stack(
        [(uu - k.cx) / k.fx * d, (vv - k.cy) / k.fy * d, np.full_like(uu, d)],
        axis=-1,
    ).reshape(-1, 3)
    pts_w = latest.pose.transform(pts_cam)
    cam_o = other.pose.inverse().transform(pts_w)
    z = cam_o[:, 2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    ko = other.intrinsics
    u = ko.fx * cam_o[:, 0] / zs + ko.cx
    v = ko.fy * cam_o[:, 1] / zs + ko.cy
    ok &= (u >= 0) & (u <= ko.width - 1) & (v >= 0) & (v <= ko.height - 1)
    return float(np.count_nonzero(ok)) / len(pts_cam)


def select_window(latest_id: int, state: MapperState) -> Tuple[int, ...]:
    """Latest keyframe plus its top covisible peers, newest-first on ties.

    Covisibility counts shared landmark ids. When the latest packet has
    no landmarks at all, frustum overlap stands in. Slots that
    covisibility cannot fill fall back to the most recent keyframes.
    """
    latest = state.keyframes[latest_id].packet
    others = [e.packet for i, e in state.keyframes.items() if i != latest_id]
    lm = latest.landmark_ids()

    scored: List[Tuple[float, float, int]] = []
    if lm:
        for p in others:
            s = len(lm & p.landmark_ids())
            if s > 0:
                scored.append((float(s), p.timestamp, p.id))
    else:
        for p in others:
            s = _frustum_overlap(latest, p)
            if s > 0:
                scored.append((s, p.timestamp, p.id))
    scored.sort(key=lambda t: (-t[0], -t[1]))
    window = [latest_id] + [kf_id for _, _, kf_id in scored[: WINDOW_SIZE - 1]]
    if len(window) < WINDOW_SIZE:
        rest = sorted(
            (p for p in others if p.id not in window),
            key=lambda p: -p.timestamp,
        )
        window.extend(p.id for p in rest[: WINDOW_SIZE - len(window)])
    return tuple(window)


def process_window(
    window_ids: Sequence[int],
    state: MapperState,
    decoder_factory: DecoderFactory,
    config: SolverConfig = SolverConfig(),
) -> Dict[int, DenseImage]:
    """Predict depth for new keyframes in the window, then refine jointly.

    Keyframes whose decoder cannot be built (e.g. no sparse points) are
    marked skipped and the window shrinks. Returns refined depth per
    surviving keyframe; a single-survivor window just keeps its
    prediction.
    """
    for kf_id in window_ids:
        if kf_id not in state.keyframes:
            raise KeyError(f"keyframe {kf_id} not ingested")

    usable: List[_Entry] = []
    for kf_id in window_ids:
        entry = state.keyframes[kf_id]
        if entry.skipped:
            continue
        if not entry.processed:
            try:
                entry.decoder = decoder_factory(entry.packet)
            except CodemapError as e:
                entry.skipped = True
                log.warning("keyframe %d skipped: %s", kf_id, e)
                continue
            entry.code = DepthCode.zeros(entry.decoder.code_size)
            entry.initial_depth = entry.decoder.decode(entry.code).depth
            entry.refined_depth = entry.initial_depth
            state.predictions += 1
        usable.append(entry)

    if len(usable) < 2:
        return {e.packet.id: e.refined_depth for e in usable}

    usable.sort(key=lambda e: e.packet.timestamp)
    packets = [e.packet for e in usable]
    codes = [e.code for e in usable]
    decoders = [e.decoder for e in usable]
    result: RefineResult = refine_window(packets, codes, decoders, config)
    for entry, code, depth in zip(usable, result.codes, result.depths):
        entry.code = code
        entry.refined_depth = depth
    log.info(
        "window %s: energy %.6g -> %.6g in %d iterations (%s)",
        tuple(p.id for p in packets),
        result.report.initial_energy,
        result.report.final_energy,
        result.report.iterations,
        result.report.message,
    )
    return {e.packet.id: e.refined_depth for e in usable}


def drain(
    state: MapperState,
    decoder_factory: DecoderFactory,
    config: SolverConfig = SolverConfig(),
) -> Dict[int, DenseImage]:
    """Process the pending window, if any (the synchronous consumer step)."""
    window = state.pending_window
    state.pending_window = None
    if window is None:
        return {}
    return process_window(window, state, decoder_factory, config)


class DenseMapper:
    """Threaded producer/consumer wrapper around the mapper state.

    ``ingest`` returns after dictionary bookkeeping; a background thread
    picks up the newest pending window and runs the solve. The lock
    guards only bookkeeping, never a solve, so ingestion latency stays
    flat while optimization is in flight.
    """

    def __init__(
        self,
        decoder_factory: DecoderFactory,
        config: SolverConfig = SolverConfig(),
    ) -> None:
        self.state = MapperState()
        self._factory = decoder_factory
        self._config = config
        self._lock = threading.Lock()
        self._wake = threading.Condition(self._lock)
        self._thread: Optional[threading.Thread] = None
        self._stopping = False
        self.windows_processed = 0

    def start(self) -> "DenseMapper":
        if self._thread is not None:
            raise RuntimeError("mapper already started")
        self._stopping = False
        self._thread = threading.Thread(target=self._consume, name="codemap-mapper")
        self._thread.daemon = True
        self._thread.start()
        return self

    def stop(self, drain_pending: bool = True) -> None:
        """Stop the consumer, by default after finishing queued work."""
        if self._thread is None:
            return
        with self._wake:
            if not drain_pending:
                self.state.pending_window = None
            self._stopping = True
            self._wake.notify_all()
        self._thread.join()
        self._thread = None

    def ingest(self, packet: KeyframePacket) -> IngestAck:
        with self._wake:
            ack = ingest(packet, self.state)
            if ack.window is not None:
                self._wake.notify_all()
            return ack

    def _consume(self) -> None:
        while True:
            with self._wake:
                while self.state.pending_window is None and not self._stopping:
                    self._wake.wait()
                window = self.state.pending_window
                self.state.pending_window = None
                if window is None and self._stopping:
                    return
            if window is None:
                continue
            try:
                process_window(window, self.state, self._factory, self._config)
            except CodemapError as e:
                log.error("window %s failed: %s", window, e)
            with self._lock:
                self.windows_processed += 1

    def wait_idle(self, timeout: float = 60.0) -> bool:
        """Block until no window is pending or being solved."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if self.state.pending_window is None:
                    done = self.windows_processed
                else:
                    done = -1
            if done >= 0:
                # One more handshake: the consumer may be mid-solve.
                time.sleep(0.01)
                with self._lock:
                    if (
                        self.state.pending_window is None
                        and self.windows_processed == done
                    ):
                        return True
                continue
            time.sleep(0.005)
        return False


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(pred: DenseImage, gt: DenseImage) -> Tuple[float, float]:
    """(MAE, RMSE) in meters over pixels where the ground truth is valid."""
    if pred.width != gt.width or pred.height != gt.height:
        raise ValueError(
            f"prediction {pred.width}x{pred.height} vs gt {gt.width}x{gt.height}"
        )
    mask = gt.valid_mask()
    if not np.any(mask):
        raise InvalidDepthError("ground truth has no valid pixels")
    diff = pred.astype64()[mask] - gt.astype64()[mask]
    mae = float(np.mean(np.abs(diff)))
    rmse = float(np.sqrt(np.mean(diff**2)))
    return mae, rmse


@dataclass(frozen=True)
class MetricsRow:
    kf_id: int
    stage: str
    mae: float
    rmse: float


def metrics_rows(state: MapperState) -> List[MetricsRow]:
    """Initial and refined errors for every processed keyframe with gt."""
    rows: List[MetricsRow] = []
    for kf_id in sorted(state.keyframes):
        entry = state.keyframes[kf_id]
        gt = entry.packet.gt_depth
        if gt is None or not entry.processed:
            continue
        for stage, depth in (
            ("initial", entry.initial_depth),
            ("refined", entry.refined_depth),
        ):
            mae, rmse = evaluate(depth, gt)
            rows.append(MetricsRow(kf_id, stage, mae, rmse))
    return rows


def format_metrics(rows: Sequence[MetricsRow]) -> str:
    lines = ["kf_id,stage,mae,rmse"]
    for r in rows:
        lines.append(f"{r.kf_id},{r.stage},{r.mae:.6f},{r.rmse:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sequence-directory glue


def packets_from_sequence(seq: LoadedSequence) -> List[KeyframePacket]:
    """Convert a loaded sequence directory into keyframe packets."""
    packets = []
    for kf in seq.manifest.keyframes:
        per = seq.channels.get(kf.id, {})
        if "intensity" not in per:
            raise InvalidDepthError(f"keyframe {kf.id} has no intensity channel")
        intensity = per["intensity"]
        w, h = intensity.width, intensity.height
        observations = [
            SparseObservation(o.landmark_id, o.u, o.v, o.depth, o.rep_error)
            for o in kf.observations
        ]
        if "sparse_depth" in per:
            sparse = per["sparse_depth"]
            rep = per.get(
                "rep_error", DenseImage.full(w, h, 0.0, "rep_error")
            )
        else:
            sparse, rep = observations_to_images(observations, w, h)
        matches = {
            other: [
                Correspondence(m.landmark_id, (m.ui, m.vi), (m.uj, m.vj))
                for m in recs
            ]
            for other, recs in kf.matches.items()
        }
        packets.append(
            KeyframePacket(
                id=kf.id,
                timestamp=kf.timestamp,
                pose=kf.pose,
                intrinsics=seq.intrinsics,
                intensity=intensity,
                sparse_depth=sparse,
                rep_error=rep,
                observations=observations,
                matches=matches,
                gt_depth=per.get("gt_depth"),
            )
        )
    return packets


def run_sequence(
    packets: Sequence[KeyframePacket],
    decoder_factory: DecoderFactory,
    config: SolverConfig = SolverConfig(),
) -> MapperState:
    """Feed packets through ingest/drain synchronously (replay semantics)."""
    state = MapperState()
    for packet in packets:
        ack = ingest(packet, state)
        if not ack.accepted:
            raise ValueError(f"packet {packet.id} rejected: {ack.reason}")
        drain(state, decoder_factory, config)
    return state
