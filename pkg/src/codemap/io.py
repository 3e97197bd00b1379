"""Serialization: PFM images, sequence manifests, decoder weights, PLY meshes.

Formats
-------
PFM (single channel): header ``Pf\\n<width> <height>\\n-1.0\\n`` followed by
``width * height`` little-endian float32 values, rows stored bottom-to-top
as the format dictates. Color ("PF") and big-endian (positive scale) files
are rejected. Round trips are bit-exact.

Manifest: a line-oriented UTF-8 key-value file describing a keyframe
sequence (intrinsics, poses, image channels, sparse observations, pairwise
matches). ``parse(print(m))`` reproduces the canonical form exactly; floats
are printed with shortest round-trip repr.

CMWT weights: a little-endian binary container for the learned decoder; a
flat DAG of layers with float32 tensors and a CRC32 trailer. The header
records the conditioning normalization scales so a decoder is
self-describing.

PLY: ASCII triangle meshes, for fusion output.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError
from .geometry import Intrinsics, Pose
from .image import DenseImage

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, values: np.ndarray) -> None:
    """Write a (H, W) float array as a single-channel little-endian PFM."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError("PFM writer expects a single-channel (H, W) array")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM into a (H, W) float32 array."""
    with open(path, "rb") as f:
        data = f.read()

    def next_token(pos: int) -> Tuple[bytes, int]:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PFM header")
        return data[start:pos], pos

    magic, pos = next_token(0)
    if magic == b"PF":
        raise FormatError("3-channel PFM not supported; expected single-channel 'Pf'")
    if magic != b"Pf":
        raise FormatError(f"not a PFM file (magic {magic!r})")
    wtok, pos = next_token(pos)
    htok, pos = next_token(pos)
    stok, pos = next_token(pos)
    try:
        w, h = int(wtok), int(htok)
        scale = float(stok)
    except ValueError as e:
        raise FormatError(f"bad PFM header: {e}") from None
    if w <= 0 or h <= 0:
        raise FormatError("PFM dimensions must be positive")
    if scale >= 0:
        raise FormatError("big-endian PFM (positive scale) not supported")
    # Exactly one whitespace byte separates header and payload.
    pos += 1
    payload = data[pos : pos + 4 * w * h]
    if len(payload) != 4 * w * h:
        raise FormatError(
            f"truncated PFM payload: expected {4 * w * h} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return np.flipud(arr).copy()


_CHANNEL_SEMANTICS = (
    ("rep", "rep_error"),
    ("prox", "proximity"),
    ("unc", "uncertainty"),
    ("depth", "depth"),
    ("intensity", "intensity"),
)


def channel_semantics(channel: str) -> str:
    """Image semantics implied by a manifest channel name."""
    for key, sem in _CHANNEL_SEMANTICS:
        if key in channel:
            return sem
    return "intensity"


def read_image(path, semantics: str) -> DenseImage:
    return DenseImage.from_array(read_pfm(path), semantics)


def write_image(path, image: DenseImage) -> None:
    write_pfm(path, image.values)


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ObservationRecord:
    landmark_id: int
    u: float
    v: float
    depth: float
    rep_error: float


@dataclass
class MatchRecord:
    """One matched landmark between this keyframe (i) and another (j)."""

    landmark_id: int
    ui: float
    vi: float
    uj: float
    vj: float


@dataclass(eq=False)
class KeyframeRecord:
    id: int
    timestamp: float
    pose: Pose
    images: Dict[str, str] = field(default_factory=dict)
    observations: List[ObservationRecord] = field(default_factory=list)
    matches: Dict[int, List[MatchRecord]] = field(default_factory=dict)


@dataclass(eq=False)
class SequenceManifest:
    intrinsics: Intrinsics
    proximity_scale: float = 2.0
    keyframes: List[KeyframeRecord] = field(default_factory=list)


_MANIFEST_MAGIC = "codemap_manifest"
_MANIFEST_VERSION = 1
_CHANNEL_ORDER = (
    "intensity",
    "sparse_depth",
    "rep_error",
    "gt_depth",
    "initial_depth",
    "refined_depth",
)


def _fmt(x: float) -> str:
    # repr gives the shortest string that parses back to the same float;
    # integral values drop the redundant ".0" so conventions read cleanly.
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def _pose_fields(p: Pose) -> str:
    tx, ty, tz = p.t
    qw, qx, qy, qz = p.q
    return " ".join(_fmt(v) for v in (tx, ty, tz, qw, qx, qy, qz))


def manifest_to_string(m: SequenceManifest) -> str:
    lines = [f"{_MANIFEST_MAGIC} {_MANIFEST_VERSION}"]
    k = m.intrinsics
    lines.append(
        "intrinsics "
        + " ".join(_fmt(v) for v in (k.fx, k.fy, k.cx, k.cy))
        + f" {k.width} {k.height}"
    )
    lines.append(f"proximity_scale {_fmt(m.proximity_scale)}")
    for kf in m.keyframes:
        lines.append(f"keyframe {kf.id}")
        lines.append(f"timestamp {_fmt(kf.timestamp)}")
        lines.append(f"pose {_pose_fields(kf.pose)}")
        ordered = [c for c in _CHANNEL_ORDER if c in kf.images]
        ordered += sorted(c for c in kf.images if c not in _CHANNEL_ORDER)
        for channel in ordered:
            lines.append(f"image {channel} {kf.images[channel]}")
        for o in kf.observations:
            lines.append(
                f"obs {o.landmark_id} {_fmt(o.u)} {_fmt(o.v)} {_fmt(o.depth)} {_fmt(o.rep_error)}"
            )
        for other_id in sorted(kf.matches):
            ms = kf.matches[other_id]
            lines.append(f"matches {other_id} {len(ms)}")
            for mm in ms:
                lines.append(
                    f"match {mm.landmark_id} {_fmt(mm.ui)} {_fmt(mm.vi)} "
                    f"{_fmt(mm.uj)} {_fmt(mm.vj)}"
                )
        lines.append("end")
    return "\n".join(lines) + "\n"


def manifest_from_string(text: str) -> SequenceManifest:
    intrinsics: Optional[Intrinsics] = None
    prox_scale = 2.0
    keyframes: List[KeyframeRecord] = []
    current: Optional[KeyframeRecord] = None
    pending_matches = 0
    match_list: Optional[List[MatchRecord]] = None

    def fail(lineno: int, msg: str) -> None:
        raise FormatError(f"manifest line {lineno}: {msg}")

    lines = text.splitlines()
    if not lines:
        raise FormatError("empty manifest")
    head = lines[0].split()
    if len(head) != 2 or head[0] != _MANIFEST_MAGIC:
        raise FormatError("missing manifest header")
    if int(head[1]) != _MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {head[1]}")

    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        key = tok[0]
        try:
            if pending_matches > 0:
                if key != "match" or len(tok) != 6:
                    fail(lineno, f"expected {pending_matches} more 'match' lines")
                assert match_list is not None
                match_list.append(
                    MatchRecord(int(tok[1]), *(float(t) for t in tok[2:6]))
                )
                pending_matches -= 1
                continue
            if key == "intrinsics":
                if len(tok) != 7:
                    fail(lineno, "intrinsics needs fx fy cx cy width height")
                intrinsics = Intrinsics(
                    fx=float(tok[1]),
                    fy=float(tok[2]),
                    cx=float(tok[3]),
                    cy=float(tok[4]),
                    width=int(tok[5]),
                    height=int(tok[6]),
                )
            elif key == "proximity_scale":
                prox_scale = float(tok[1])
            elif key == "keyframe":
                if current is not None:
                    fail(lineno, "nested keyframe block (missing 'end')")
                kf_id = int(tok[1])
                if any(kf.id == kf_id for kf in keyframes):
                    fail(lineno, f"duplicate keyframe id {kf_id}")
                current = KeyframeRecord(id=kf_id, timestamp=0.0, pose=Pose.identity())
            elif key == "timestamp":
                if current is None:
                    fail(lineno, "'timestamp' outside keyframe block")
                current.timestamp = float(tok[1])
            elif key == "pose":
                if current is None:
                    fail(lineno, "'pose' outside keyframe block")
                if len(tok) != 8:
                    fail(lineno, "pose needs tx ty tz qw qx qy qz")
                vals = [float(t) for t in tok[1:]]
                current.pose = Pose(q=np.array(vals[3:7]), t=np.array(vals[0:3]))
            elif key == "image":
                if current is None or len(tok) != 3:
                    fail(lineno, "image needs: image <channel> <path>")
                current.images[tok[1]] = tok[2]
            elif key == "obs":
                if current is None or len(tok) != 6:
                    fail(lineno, "obs needs: obs <lm> <u> <v> <depth> <rep>")
                current.observations.append(
                    ObservationRecord(int(tok[1]), *(float(t) for t in tok[2:6]))
                )
            elif key == "matches":
                if current is None or len(tok) != 3:
                    fail(lineno, "matches needs: matches <other_id> <count>")
                pending_matches = int(tok[2])
                if pending_matches < 0:
                    fail(lineno, "negative match count")
                match_list = current.matches.setdefault(int(tok[1]), [])
            elif key == "end":
                if current is None:
                    fail(lineno, "'end' outside keyframe block")
                keyframes.append(current)
                current = None
            else:
                fail(lineno, f"unknown directive {key!r}")
        except (ValueError, IndexError) as e:
            if isinstance(e, FormatError):
                raise
            fail(lineno, str(e))
    if current is not None:
        raise FormatError("manifest ended inside a keyframe block")
    if pending_matches > 0:
        raise FormatError("manifest ended inside a match list")
    if intrinsics is None:
        raise FormatError("manifest has no intrinsics line")
    return SequenceManifest(
        intrinsics=intrinsics, proximity_scale=prox_scale, keyframes=keyframes
    )


def write_manifest(path, m: SequenceManifest) -> None:
    Path(path).write_text(manifest_to_string(m), encoding="utf-8")


def read_manifest(path) -> SequenceManifest:
    return manifest_from_string(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Sequence directories


@dataclass(eq=False)
class LoadedSequence:
    """A sequence directory pulled into memory."""

    manifest: SequenceManifest
    channels: Dict[int, Dict[str, DenseImage]]

    @property
    def intrinsics(self) -> Intrinsics:
        return self.manifest.intrinsics

    @property
    def proximity_scale(self) -> float:
        return self.manifest.proximity_scale


def load_sequence(directory) -> LoadedSequence:
    """Load manifest.txt plus every referenced image channel."""
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.txt in {directory}")
    m = read_manifest(manifest_path)
    channels: Dict[int, Dict[str, DenseImage]] = {}
    for kf in m.keyframes:
        per = {}
        for channel, rel in kf.images.items():
            path = directory / rel
            if not path.exists():
                raise FormatError(f"keyframe {kf.id} channel {channel}: missing file {path}")
            img = read_image(path, channel_semantics(channel))
            if img.width != m.intrinsics.width or img.height != m.intrinsics.height:
                raise FormatError(
                    f"keyframe {kf.id} channel {channel}: image is "
                    f"{img.width}x{img.height}, manifest says "
                    f"{m.intrinsics.width}x{m.intrinsics.height}"
                )
            per[channel] = img
        channels[kf.id] = per
    return LoadedSequence(manifest=m, channels=channels)


def save_sequence(
    directory,
    manifest: SequenceManifest,
    channels: Dict[int, Dict[str, DenseImage]],
) -> None:
    """Write a sequence directory: images/ PFMs plus manifest.txt.

    Rewrites each keyframe's image paths to the canonical
    ``images/kf<id>_<channel>.pfm`` layout.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    for kf in manifest.keyframes:
        per = channels.get(kf.id, {})
        kf.images = {}
        for channel, img in per.items():
            rel = f"images/kf{kf.id:04d}_{channel}.pfm"
            write_image(directory / rel, img)
            kf.images[channel] = rel
    write_manifest(directory / "manifest.txt", manifest)


# ---------------------------------------------------------------------------
# CMWT decoder weights

_WEIGHTS_MAGIC = b"CMWT"
_WEIGHTS_VERSION = 1

LAYER_KINDS = (
    "input_cond",
    "input_code",
    "conv",
    "dense_map",
    "relu",
    "sigmoid",
    "softplus",
    "affine",
    "upsample2",
    "avgpool2",
    "concat",
)

# (min_inputs, max_inputs, n_tensors) per kind
_KIND_ARITY = {
    "input_cond": (0, 0, 0),
    "input_code": (0, 0, 0),
    "conv": (1, 1, 2),
    "dense_map": (1, 1, 2),
    "relu": (1, 1, 0),
    "sigmoid": (1, 1, 0),
    "softplus": (1, 1, 0),
    "affine": (1, 1, 0),
    "upsample2": (1, 1, 0),
    "avgpool2": (1, 1, 0),
    "concat": (2, 64, 0),
}


@dataclass(eq=False)
class LayerSpec:
    name: str
    kind: str
    inputs: Tuple[int, ...] = ()
    attrs: Dict[str, float] = field(default_factory=dict)
    tensors: List[np.ndarray] = field(default_factory=list)


@dataclass(eq=False)
class WeightBundle:
    """Parsed decoder weights: header plus a topologically ordered layer DAG."""

    code_size: int
    height: int
    width: int
    cond_channels: int
    prox_scale: float
    rep_scale: float
    output_prox: int
    output_unc: int
    layers: List[LayerSpec] = field(default_factory=list)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated weight stream")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        n = self.u32()
        if n > 4096:
            raise FormatError("unreasonable string length in weight stream")
        return self.take(n).decode("utf-8")


def weights_to_bytes(b: WeightBundle) -> bytes:
    out = bytearray()
    out += _WEIGHTS_MAGIC
    out += struct.pack(
        "<IIIII", _WEIGHTS_VERSION, b.code_size, b.height, b.width, b.cond_channels
    )
    out += struct.pack("<ff", b.prox_scale, b.rep_scale)
    out += struct.pack("<II", b.output_prox, b.output_unc)
    out += struct.pack("<I", len(b.layers))
    for layer in b.layers:
        out += _pack_str(layer.kind)
        out += _pack_str(layer.name)
        out += struct.pack("<I", len(layer.inputs))
        for i in layer.inputs:
            out += struct.pack("<I", i)
        out += struct.pack("<I", len(layer.attrs))
        for key in sorted(layer.attrs):
            out += _pack_str(key)
            out += struct.pack("<d", float(layer.attrs[key]))
        out += struct.pack("<I", len(layer.tensors))
        for t in layer.tensors:
            arr = np.ascontiguousarray(t, dtype="<f4")
            out += struct.pack("<I", arr.ndim)
            for d in arr.shape:
                out += struct.pack("<I", d)
            out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def write_weights(path, bundle: WeightBundle) -> None:
    Path(path).write_bytes(weights_to_bytes(bundle))


def weights_from_bytes(data: bytes) -> WeightBundle:
    if len(data) < 8:
        raise FormatError("weight stream too short")
    if data[:4] != _WEIGHTS_MAGIC:
        raise FormatError(f"bad weights magic {data[:4]!r}, expected {_WEIGHTS_MAGIC!r}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(
            f"weights checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    r = _Reader(data[:-4])
    r.take(4)
    version = r.u32()
    if version != _WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    code_size, height, width, cond_channels = (r.u32() for _ in range(4))
    prox_scale, rep_scale = r.f32(), r.f32()
    output_prox, output_unc = r.u32(), r.u32()
    n_layers = r.u32()
    if n_layers > 4096:
        raise FormatError("unreasonable layer count")
    layers: List[LayerSpec] = []
    for idx in range(n_layers):
        kind = r.string()
        name = r.string()
        if kind not in _KIND_ARITY:
            raise FormatError(f"layer {name!r}: unknown kind {kind!r}")
        lo, hi, want_tensors = _KIND_ARITY[kind]
        n_inputs = r.u32()
        inputs = tuple(r.u32() for _ in range(n_inputs))
        if not (lo <= n_inputs <= hi):
            raise FormatError(f"layer {name!r}: kind {kind} takes {lo}..{hi} inputs")
        if any(i >= idx for i in inputs):
            raise FormatError(f"layer {name!r}: inputs must reference earlier layers")
        n_attrs = r.u32()
        attrs = {}
        for _ in range(n_attrs):
            key = r.string()
            attrs[key] = r.f64()
        n_tensors = r.u32()
        if n_tensors != want_tensors:
            raise FormatError(
                f"layer {name!r}: kind {kind} carries {want_tensors} tensors, got {n_tensors}"
            )
        tensors = []
        for _ in range(n_tensors):
            rank = r.u32()
            if rank > 8:
                raise FormatError(f"layer {name!r}: tensor rank {rank} out of range")
            dims = tuple(r.u32() for _ in range(rank))
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            if count <= 0 or count > 1 << 28:
                raise FormatError(f"layer {name!r}: tensor size {dims} out of range")
            flat = np.frombuffer(r.take(4 * count), dtype="<f4")
            tensors.append(flat.reshape(dims).copy())
        _check_layer_tensors(name, kind, attrs, tensors)
        layers.append(LayerSpec(name=name, kind=kind, inputs=inputs, attrs=attrs, tensors=tensors))
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes in weight stream")
    for label, node in (("proximity", output_prox), ("uncertainty", output_unc)):
        if node >= n_layers:
            raise FormatError(f"{label} output references missing layer {node}")
    return WeightBundle(
        code_size=code_size,
        height=height,
        width=width,
        cond_channels=cond_channels,
        prox_scale=prox_scale,
        rep_scale=rep_scale,
        output_prox=output_prox,
        output_unc=output_unc,
        layers=layers,
    )


def _check_layer_tensors(name, kind, attrs, tensors) -> None:
    if kind == "conv":
        kernel, bias = tensors
        if kernel.ndim != 4:
            raise FormatError(f"layer {name!r}: conv kernel must be (out, in, kh, kw)")
        out_ch, _, kh, kw = kernel.shape
        if kh % 2 != 1 or kw % 2 != 1:
            raise FormatError(f"layer {name!r}: conv kernels must be odd-sized, got {kh}x{kw}")
        if bias.shape != (out_ch,):
            raise FormatError(f"layer {name!r}: conv bias shape {bias.shape} != ({out_ch},)")
    elif kind == "dense_map":
        w, bias = tensors
        if w.ndim != 2:
            raise FormatError(f"layer {name!r}: dense_map weight must be 2D (out, in)")
        for key in ("channels", "height", "width"):
            if key not in attrs:
                raise FormatError(f"layer {name!r}: dense_map missing attr {key!r}")
        c, h, ww = (int(attrs[k]) for k in ("channels", "height", "width"))
        if c * h * ww != w.shape[0]:
            raise FormatError(
                f"layer {name!r}: dense_map reshape {c}x{h}x{ww} != output dim {w.shape[0]}"
            )
        if bias.shape != (w.shape[0],):
            raise FormatError(f"layer {name!r}: dense_map bias mismatch")
    elif kind == "affine":
        for key in ("scale", "shift"):
            if key not in attrs:
                raise FormatError(f"layer {name!r}: affine missing attr {key!r}")


def read_weights(source: Union[bytes, str, Path]) -> WeightBundle:
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = bytes(source)
    return weights_from_bytes(data)


# ---------------------------------------------------------------------------
# PLY


def write_ply(
    path,
    vertices: np.ndarray,
    triangles: np.ndarray,
    normals: Optional[np.ndarray] = None,
) -> None:
    """Write an ASCII PLY triangle mesh."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise FormatError("triangle indices out of range")
    n = None
    if normals is not None:
        n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        if len(n) != len(v):
            raise FormatError("normal count must match vertex count")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(v)}"]
    lines += ["property float x", "property float y", "property float z"]
    if n is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += [
        f"element face {len(f)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for i in range(len(v)):
        row = f"{v[i, 0]:.6f} {v[i, 1]:.6f} {v[i, 2]:.6f}"
        if n is not None:
            row += f" {n[i, 0]:.6f} {n[i, 1]:.6f} {n[i, 2]:.6f}"
        lines.append(row)
    for tri in f:
        lines.append(f"3 {tri[0]} {tri[1]} {tri[2]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
