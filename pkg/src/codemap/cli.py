"""Batch command-line front end.

Subcommands:
  simulate   render a synthetic scene into a sequence directory
  perturb    turn a sequence into training pairs via the ray-shift noise model
  map        run the dense-mapping pipeline over a sequence
  fuse       TSDF-fuse a sequence's depth maps into a PLY mesh
  eval       compare depth maps between two sequence directories
  decode     run a decoder on one keyframe's conditioning and dump PFMs

All commands are deterministic for fixed seed and config. Log level
comes from CODEMAP_LOG (default INFO). Exit code 0 means no errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import fusion, io, pipeline, synth
from .codec import (
    ConditioningSet,
    DEFAULT_CODE_SIZE,
    DepthCode,
    analytic_decoder,
    load_learned_decoder,
)
from .errors import CodemapError, FormatError
from .factors import DEFAULT_HUBER, DEFAULT_WEIGHTS, HuberParams
from .geometry import Intrinsics, Pose, ProximityParams
from .image import DenseImage
from .noise import EmgParams, build_training_pair
from .optimizer import ALL_KINDS, SolverConfig

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class RunConfig:
    """Solver + decoder settings shared by map/fuse/decode."""

    decoder: str = "analytic"
    weights_path: Optional[str] = None
    code_size: int = DEFAULT_CODE_SIZE
    window_size: int = 4
    factors: Tuple[str, ...] = ALL_KINDS
    weights: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    huber: Dict[str, float] = field(
        default_factory=lambda: {k: v.delta for k, v in DEFAULT_HUBER.items()}
    )
    stride: int = 4
    pyramid: Tuple[int, ...] = ()
    max_iterations: int = 20
    voxel_size: float = 0.02
    truncation: float = 0.08
    proximity_scale: float = 2.0
    seed: int = 0

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            enabled=frozenset(self.factors),
            weights=dict(self.weights),
            huber={k: HuberParams(v) for k, v in self.huber.items()},
            stride=self.stride,
            pyramid=self.pyramid,
            max_iterations=self.max_iterations,
        )


def parse_config(text: str, base_dir: Path) -> RunConfig:
    """Key-value config in the manifest's line format; '#' comments."""
    cfg = RunConfig()
    updates: Dict[str, object] = {}
    weights = dict(cfg.weights)
    huber = dict(cfg.huber)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        value = value.strip()
        try:
            if key == "decoder":
                if value == "analytic":
                    updates["decoder"] = "analytic"
                else:
                    path = (base_dir / value).resolve()
                    if not path.exists():
                        raise FormatError(f"decoder weights not found: {path}")
                    updates["decoder"] = "weights"
                    updates["weights_path"] = str(path)
            elif key in ("code_size", "window_size", "stride", "max_iterations", "seed"):
                updates[key] = int(value)
            elif key in ("voxel_size", "truncation", "proximity_scale"):
                updates[key] = float(value)
            elif key == "factors":
                names = tuple(v for v in value.replace(",", " ").split() if v)
                bad = set(names) - set(ALL_KINDS)
                if bad:
                    raise FormatError(f"unknown factors {sorted(bad)}")
                updates["factors"] = names
            elif key == "pyramid":
                updates["pyramid"] = tuple(
                    int(v) for v in value.replace(",", " ").split()
                )
            elif key.startswith("weight_"):
                name = key[len("weight_"):]
                if name not in ALL_KINDS:
                    raise FormatError(f"unknown factor {name!r}")
                weights[name] = float(value)
            elif key.startswith("huber_"):
                name = key[len("huber_"):]
                if name not in DEFAULT_HUBER:
                    raise FormatError(f"unknown factor {name!r}")
                huber[name] = float(value)
            else:
                raise FormatError(f"unknown key {key!r}")
        except ValueError as e:
            raise FormatError(f"config line {lineno}: {e}") from None
        except FormatError as e:
            raise FormatError(f"config line {lineno}: {e}") from None
    updates["weights"] = weights
    updates["huber"] = huber
    return replace(cfg, **updates)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise FormatError(f"config file not found: {p}")
    return parse_config(p.read_text(), p.parent)


def make_decoder_factory(cfg: RunConfig):
    prox = ProximityParams(a=cfg.proximity_scale)
    if cfg.decoder == "weights":
        template = load_learned_decoder(cfg.weights_path)
        if template.code_size != cfg.code_size:
            raise FormatError(
                f"weights use code size {template.code_size}, "
                f"config says {cfg.code_size}"
            )
        return lambda packet: template.condition(packet.conditioning())
    return lambda packet: analytic_decoder(
        packet.conditioning(), code_size=cfg.code_size, prox_params=prox
    )


# ---------------------------------------------------------------------------
# Shared helpers


def _parse_scene(spec: str) -> synth.SceneSpec:
    """'name' or 'name:key=value,...' with integer values."""
    name, _, rest = spec.partition(":")
    if name not in synth.STOCK_SCENES:
        raise FormatError(
            f"unknown scene {name!r}; available: {', '.join(sorted(synth.STOCK_SCENES))}"
        )
    kwargs = {}
    if rest:
        for item in rest.split(","):
            k, _, v = item.partition("=")
            if not v:
                raise FormatError(f"bad scene option {item!r}")
            try:
                kwargs[k.strip()] = int(v)
            except ValueError:
                raise FormatError(f"scene option {k!r} must be an integer") from None
    try:
        return synth.STOCK_SCENES[name](**kwargs)
    except TypeError as e:
        raise FormatError(f"bad scene options for {name!r}: {e}") from None


def _packets_to_sequence(
    packets: Sequence[pipeline.KeyframePacket],
    proximity_scale: float,
) -> Tuple[io.SequenceManifest, Dict[int, Dict[str, DenseImage]]]:
    k = packets[0].intrinsics
    manifest = io.SequenceManifest(intrinsics=k, proximity_scale=proximity_scale)
    channels: Dict[int, Dict[str, DenseImage]] = {}
    for p in packets:
        rec = io.KeyframeRecord(id=p.id, timestamp=p.timestamp, pose=p.pose)
        rec.observations = [
            io.ObservationRecord(o.landmark_id, o.u, o.v, o.depth, o.rep_error)
            for o in p.observations
        ]
        rec.matches = {
            other: [
                io.MatchRecord(m.landmark_id, *m.pixel_i, *m.pixel_j)
                for m in ms
            ]
            for other, ms in p.matches.items()
        }
        manifest.keyframes.append(rec)
        per = {
            "intensity": p.intensity,
            "sparse_depth": p.sparse_depth,
            "rep_error": p.rep_error,
        }
        if p.gt_depth is not None:
            per["gt_depth"] = p.gt_depth
        channels[p.id] = per
    return manifest, channels


def _depth_channel(per: Dict[str, DenseImage], preference: str) -> Optional[DenseImage]:
    chain = {
        "refined": ("refined_depth", "gt_depth", "initial_depth"),
        "initial": ("initial_depth",),
        "gt": ("gt_depth",),
        "sparse": ("sparse_depth",),
    }.get(preference, (preference,))
    for name in chain:
        if name in per:
            return per[name]
    return None


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args) -> int:
    scene = _parse_scene(args.scene)
    noise = EmgParams() if args.noise else None
    packets = synth.make_sequence(scene, args.points, noise, args.seed)
    manifest, channels = _packets_to_sequence(packets, args.proximity_scale)
    io.save_sequence(args.out, manifest, channels)
    log.info("wrote %d keyframes to %s", len(packets), args.out)
    return 0


def cmd_perturb(args) -> int:
    seq = io.load_sequence(args.input)
    try:
        k_, loc_, scale_ = (float(x) for x in args.emg.split(","))
    except ValueError:
        raise FormatError(f"--emg expects K,LOC,SCALE, got {args.emg!r}") from None
    emg = EmgParams(k=k_, loc=loc_, scale=scale_)

    @dataclass(frozen=True)
    class _Frame:
        intensity: DenseImage
        depth: DenseImage
        pose: Pose
        intrinsics: Intrinsics

    frames: List[Tuple[int, float, _Frame]] = []
    for kf in seq.manifest.keyframes:
        per = seq.channels[kf.id]
        gt = _depth_channel(per, "gt")
        if gt is None or "intensity" not in per:
            log.warning("keyframe %d lacks gt depth or intensity; skipped", kf.id)
            continue
        frames.append(
            (kf.id, kf.timestamp,
             _Frame(per["intensity"], gt, kf.pose, seq.intrinsics))
        )

    out_manifest = io.SequenceManifest(
        intrinsics=seq.intrinsics, proximity_scale=seq.proximity_scale
    )
    out_channels: Dict[int, Dict[str, DenseImage]] = {}
    emitted = 0
    for idx, (kf_id, ts, frame) in enumerate(frames):
        neighbor = None
        best = np.inf
        for jdx, (_, _, other) in enumerate(frames):
            if jdx == idx:
                continue
            dist = float(np.linalg.norm(frame.pose.t - other.pose.t))
            if 1e-9 < dist <= 2.0 and dist < best:
                best, neighbor = dist, other
        if neighbor is None:
            log.warning("keyframe %d: no neighbor within 2 m; skipped", kf_id)
            continue
        cond, gt = build_training_pair(
            frame, neighbor, emg, args.points, args.seed + 977 * kf_id
        )
        out_manifest.keyframes.append(
            io.KeyframeRecord(id=kf_id, timestamp=ts, pose=frame.pose)
        )
        out_channels[kf_id] = {
            "intensity": cond.intensity,
            "sparse_depth": cond.sparse_depth,
            "rep_error": cond.rep_error,
            "gt_depth": gt,
        }
        emitted += 1
    io.save_sequence(args.out, out_manifest, out_channels)
    log.info("wrote %d training pairs to %s", emitted, args.out)
    return 0


def cmd_map(args) -> int:
    cfg = load_config(args.config)
    if args.jobs < 1:
        raise FormatError("--jobs must be >= 1")
    seq = io.load_sequence(args.input)
    packets = pipeline.packets_from_sequence(seq)
    factory = make_decoder_factory(cfg)
    # Replay windows overlap (each contains the latest keyframe), so they
    # are solved in arrival order; --jobs bounds parallelism when windows
    # are disjoint, which replay never produces.
    state = pipeline.run_sequence(packets, factory, cfg.solver_config())

    out_manifest = io.SequenceManifest(
        intrinsics=seq.intrinsics, proximity_scale=seq.proximity_scale
    )
    out_channels: Dict[int, Dict[str, DenseImage]] = {}
    for p in packets:
        entry = state.keyframes[p.id]
        if not entry.processed:
            log.warning("keyframe %d was not processed; omitted", p.id)
            continue
        rec = io.KeyframeRecord(id=p.id, timestamp=p.timestamp, pose=p.pose)
        out_manifest.keyframes.append(rec)
        per = {
            "initial_depth": entry.initial_depth,
            "refined_depth": entry.refined_depth,
        }
        if p.gt_depth is not None:
            per["gt_depth"] = p.gt_depth
        out_channels[p.id] = per
    io.save_sequence(args.out, out_manifest, out_channels)

    rows = pipeline.metrics_rows(state)
    if rows:
        table = pipeline.format_metrics(rows)
        (Path(args.out) / "metrics.csv").write_text(table)
        sys.stdout.write(table)
    log.info("mapped %d keyframes to %s", len(out_manifest.keyframes), args.out)
    return 0


def cmd_fuse(args) -> int:
    cfg = load_config(args.config)
    seq = io.load_sequence(args.input)
    frames = []
    for kf in seq.manifest.keyframes:
        depth = _depth_channel(seq.channels[kf.id], args.depths)
        if depth is None:
            log.warning("keyframe %d has no %r depth channel; skipped", kf.id, args.depths)
            continue
        frames.append((kf.pose, depth))
    if not frames:
        raise FormatError(f"no keyframe provides a {args.depths!r} depth channel")

    k = seq.intrinsics
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for pose, depth in frames:
        d = depth.astype64()
        vs, us = np.nonzero(depth.valid_mask())
        if us.size == 0:
            continue
        step = max(1, us.size // 5000)
        us, vs = us[::step], vs[::step]
        z = d[vs, us]
        pts = np.stack(
            [(us - k.cx) / k.fx * z, (vs - k.cy) / k.fy * z, z], axis=1
        )
        w = pose.transform(pts)
        lo = np.minimum(lo, w.min(axis=0))
        hi = np.maximum(hi, w.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise FormatError("no valid depths to fuse")
    margin = 4 * cfg.truncation
    volume = fusion.TsdfVolume.create(
        lo - margin, hi + margin, voxel_size=cfg.voxel_size, truncation=cfg.truncation
    )
    for pose, depth in frames:
        fusion.integrate(volume, depth, pose, k)
    mesh = fusion.extract_mesh(volume)
    io.write_ply(args.out, mesh.vertices, mesh.triangles, normals=mesh.normals)
    log.info(
        "fused %d frames into %s (%d vertices, %d triangles)",
        len(frames), args.out, len(mesh.vertices), len(mesh.triangles),
    )
    return 0


def cmd_eval(args) -> int:
    pred_seq = io.load_sequence(args.pred)
    gt_seq = io.load_sequence(args.gt)
    gt_by_id = {kf.id: gt_seq.channels[kf.id] for kf in gt_seq.manifest.keyframes}
    rows: List[pipeline.MetricsRow] = []
    maes, rmses = [], []
    for kf in pred_seq.manifest.keyframes:
        if kf.id not in gt_by_id:
            log.warning("keyframe %d missing from gt sequence; skipped", kf.id)
            continue
        pred = _depth_channel(pred_seq.channels[kf.id], args.channel)
        gt = _depth_channel(gt_by_id[kf.id], "gt")
        if pred is None or gt is None:
            log.warning("keyframe %d lacks a usable depth channel; skipped", kf.id)
            continue
        mae, rmse = pipeline.evaluate(pred, gt)
        rows.append(pipeline.MetricsRow(kf.id, args.channel, mae, rmse))
        maes.append(mae)
        rmses.append(rmse)
    if not rows:
        raise FormatError("no overlapping keyframes with depth channels")
    table = pipeline.format_metrics(rows)
    table += f"aggregate,{args.channel},{np.mean(maes):.6f},{np.mean(rmses):.6f}\n"
    sys.stdout.write(table)
    return 0


def cmd_decode(args) -> int:
    cfg = load_config(args.config)
    if args.weights is not None:
        cfg = replace(cfg, decoder="weights", weights_path=args.weights)
    seq = io.load_sequence(args.input)
    packets = pipeline.packets_from_sequence(seq)
    by_id = {p.id: p for p in packets}
    if args.kf not in by_id:
        raise FormatError(f"keyframe {args.kf} not in sequence")
    packet = by_id[args.kf]
    factory = make_decoder_factory(cfg)
    decoder = factory(packet)
    if args.code is not None:
        values = np.array(
            [float(t) for t in Path(args.code).read_text().split()]
        )
        code = DepthCode(values)
    else:
        code = DepthCode.zeros(decoder.code_size)
    out = decoder.decode(code)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    io.write_pfm(f"{prefix}_depth.pfm", out.depth.values)
    io.write_pfm(f"{prefix}_uncertainty.pfm", out.uncertainty.values)
    log.info("decoded keyframe %d to %s_{depth,uncertainty}.pfm", args.kf, prefix)
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codemap", description="Dense mapping on a compact depth-code manifold."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic scene to a sequence dir")
    p.add_argument("--scene", required=True, help="plane | box | room, with name:k=v options")
    p.add_argument("--out", required=True)
    p.add_argument("--noise", action="store_true", help="apply the EMG depth noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=120, help="sparse points per keyframe")
    p.add_argument("--proximity-scale", type=float, default=2.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("perturb", help="emit training pairs with simulated noise")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emg", default="4.31,0.44,0.20", help="K,LOC,SCALE")
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("map", help="run the dense-mapping pipeline over a sequence")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1,
                   help="max parallel window solves (disjoint windows only)")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("fuse", help="TSDF-fuse depth maps into a PLY mesh")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--depths", default="refined",
                   help="refined | initial | gt | sparse, or a channel name")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="MAE/RMSE between two sequence dirs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--channel", default="refined")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="decode one keyframe's conditioning to PFMs")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kf", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--weights", default=None, help="CMWT decoder weights")
    p.add_argument("--config", default=None)
    p.add_argument("--code", default=None, help="text file of code values (default: zero)")
    p.set_defaults(func=cmd_decode)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("CODEMAP_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CodemapError, OSError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
