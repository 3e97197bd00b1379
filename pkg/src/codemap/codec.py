"""Compact-code depth decoders.

A decoder turns per-keyframe conditioning (intensity, sparse depth,
reprojection errors) plus a low-dimensional code into a dense proximity
map with per-pixel uncertainty. Decoding is affine in the code:

    P(c) = P0 + J @ c        (proximity space)

so the optimizer sees constant Jacobians. Two constructions are provided:

- :func:`analytic_decoder`: a closed-form decoder. The zero-code
  prediction interpolates the sparse proximities (inverse-distance
  weighting, weights discounted by reprojection error), the Jacobian
  columns are fixed low-frequency cosine modes, and the uncertainty grows
  with distance from the nearest sparse point. No training required; used
  for simulation and as the reference implementation of the decode
  contract.
- :func:`load_learned_decoder`: runs a trained network from a CMWT weight
  stream. The forward pass at zero code gives P0 and the uncertainty; the
  Jacobian is linearized once at zero code by central differences over
  code dimensions (only code-dependent layers are re-evaluated).

Metric depth comes from proximity via d = a (1 - p) / p; proximity outside
(0, 1) decodes to the invalid-depth sentinel 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, InsufficientConditioningError
from .geometry import ProximityParams, depth_to_proximity, proximity_to_depth_masked
from .image import DenseImage
from .io import WeightBundle, read_weights

log = logging.getLogger(__name__)

DEFAULT_CODE_SIZE = 32


@dataclass(frozen=True, eq=False)
class DepthCode:
    """A code vector on the depth manifold."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64).reshape(-1).copy()
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("code must be a nonempty finite vector")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, size: int = DEFAULT_CODE_SIZE) -> "DepthCode":
        return cls(np.zeros(size))

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True, eq=False)
class ConditioningSet:
    """Per-keyframe decoder inputs. All images share one size."""

    intensity: DenseImage
    sparse_depth: DenseImage
    rep_error: DenseImage

    def __post_init__(self) -> None:
        w, h = self.intensity.width, self.intensity.height
        for img in (self.sparse_depth, self.rep_error):
            if img.width != w or img.height != h:
                raise ValueError("conditioning images must share one size")
        if self.sparse_depth.semantics != "depth":
            raise ValueError("sparse_depth must carry depth semantics")
        rep = self.rep_error.values
        if np.any(rep < 0):
            raise ValueError("rep_error must be nonnegative")
        invalid = self.sparse_depth.values <= 0
        if np.any(rep[invalid] != 0):
            raise ValueError("rep_error must be 0 where sparse_depth is invalid")

    @property
    def width(self) -> int:
        return self.intensity.width

    @property
    def height(self) -> int:
        return self.intensity.height


@dataclass(frozen=True, eq=False)
class DecoderOutput:
    """Decoded prediction: metric depth, uncertainty, code Jacobian.

    ``jacobian`` is d(proximity)/d(code), shape (H*W, code_size), constant
    over codes for a given decoder. ``proximity`` is the raw decoded map
    the affine contract is stated in. ``depth_values``, when present, is
    the float64 depth grid before image quantization; the factors read it
    so their residuals stay differentiable to full precision (image
    storage is float32, which is coarser than a finite-difference step).
    """

    depth: DenseImage
    uncertainty: DenseImage
    jacobian: np.ndarray
    proximity: DenseImage
    depth_values: Optional[np.ndarray] = None

    def dense_depth(self) -> np.ndarray:
        """Float64 depth grid, at full precision where available."""
        if self.depth_values is not None:
            return self.depth_values
        return self.depth.astype64()


class Decoder(Protocol):
    """A conditioned decoder bound to one keyframe."""

    code_size: int
    width: int
    height: int
    prox_params: ProximityParams

    def decode(self, code: DepthCode) -> DecoderOutput: ...


class AffineDecoder:
    """Decoder defined by a zero-code proximity map plus a constant Jacobian."""

    def __init__(
        self,
        prox_prior: np.ndarray,
        jacobian: np.ndarray,
        uncertainty: np.ndarray,
        prox_params: ProximityParams,
    ):
        self.prox_prior = np.asarray(prox_prior, dtype=np.float64)
        h, w = self.prox_prior.shape
        self.height, self.width = h, w
        self.jacobian = np.asarray(jacobian, dtype=np.float64)
        if self.jacobian.shape[0] != h * w:
            raise ValueError("jacobian rows must equal pixel count")
        self.code_size = int(self.jacobian.shape[1])
        self._uncertainty = DenseImage.from_array(
            np.asarray(uncertainty, dtype=np.float64), "uncertainty"
        )
        self.prox_params = prox_params

    def decode(self, code: DepthCode) -> DecoderOutput:
        if code.size != self.code_size:
            raise ValueError(f"code size {code.size} != decoder code size {self.code_size}")
        prox = self.prox_prior + (self.jacobian @ code.values).reshape(
            self.height, self.width
        )
        depth, _ = proximity_to_depth_masked(prox, self.prox_params)
        return DecoderOutput(
            depth=DenseImage.from_array(depth, "depth"),
            uncertainty=self._uncertainty,
            jacobian=self.jacobian,
            proximity=DenseImage.from_array(prox, "proximity"),
            depth_values=depth,
        )


def decode(code: DepthCode, cond: ConditioningSet, decoder) -> DecoderOutput:
    """Decode a code against a conditioned decoder, checking compatibility."""
    if isinstance(decoder, LearnedDecoderTemplate):
        decoder = decoder.condition(cond)
    if (decoder.width, decoder.height) != (cond.width, cond.height):
        raise ValueError("conditioning size does not match the decoder")
    return decoder.decode(code)


# ---------------------------------------------------------------------------
# Analytic decoder


def _cosine_basis(width: int, height: int, code_size: int, amplitude: float) -> np.ndarray:
    """First ``code_size`` nonconstant DCT-II modes, low frequency first.

    Modes cos(pi kx (u + 1/2) / W) * cos(pi ky (v + 1/2) / H) are exactly
    orthogonal under the pixel-grid inner product, which keeps ground-truth
    code fitting a diagonal solve. The constant (kx = ky = 0) mode is
    deliberately excluded: a uniform proximity shift moves the whole
    surface along the viewing rays, the one deformation multi-view
    consistency cannot penalize, so offering it as a basis direction lets
    window optimization drift the absolute scale.
    """
    freqs = []
    r = int(np.ceil(np.sqrt(code_size))) + 2
    for ky in range(r):
        for kx in range(r):
            if kx == 0 and ky == 0:
                continue
            freqs.append((kx * kx + ky * ky, ky, kx))
    freqs.sort()
    freqs = freqs[:code_size]
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    basis = np.empty((height * width, code_size))
    for k, (_, ky, kx) in enumerate(freqs):
        mode = np.outer(np.cos(np.pi * ky * v), np.cos(np.pi * kx * u))
        basis[:, k] = amplitude * mode.reshape(-1)
    return basis


def analytic_decoder(
    cond: ConditioningSet,
    code_size: int = DEFAULT_CODE_SIZE,
    prox_params: ProximityParams = ProximityParams(),
    *,
    amplitude: float = 0.1,
    neighbors: int = 12,
    beta0: float = 0.05,
    beta1: float = 0.002,
) -> AffineDecoder:
    """Closed-form conditioned decoder.

    Raises InsufficientConditioningError with fewer than 3 valid sparse
    points. With uniform reprojection errors the prior reduces to plain
    inverse-distance-squared interpolation of the sparse proximities.
    """
    w, h = cond.width, cond.height
    depth = cond.sparse_depth.astype64()
    vv, uu = np.nonzero(depth > 0)
    if vv.size < 3:
        raise InsufficientConditioningError(
            f"analytic decoder needs >= 3 sparse points, got {vv.size}"
        )
    points = np.stack([uu, vv], axis=1).astype(np.float64)
    prox = depth_to_proximity(depth[vv, uu], prox_params)
    rep = cond.rep_error.astype64()[vv, uu]

    grid_v, grid_u = np.mgrid[0:h, 0:w]
    queries = np.stack([grid_u.reshape(-1), grid_v.reshape(-1)], axis=1).astype(np.float64)
    tree = cKDTree(points)
    k = min(neighbors, len(points))
    dist, idx = tree.query(queries, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    conf = 1.0 / (1.0 + rep)
    weights = conf[idx] / (0.01 + dist**2)
    weights_sum = weights.sum(axis=1)
    prior = (weights * prox[idx]).sum(axis=1) / weights_sum
    uncertainty = beta0 + beta1 * dist[:, 0]
    basis = _cosine_basis(w, h, code_size, amplitude)
    return AffineDecoder(
        prox_prior=prior.reshape(h, w),
        jacobian=basis,
        uncertainty=uncertainty.reshape(h, w),
        prox_params=prox_params,
    )


def fit_code(decoder: AffineDecoder, gt_depth: DenseImage) -> DepthCode:
    """Least-squares code reproducing a ground-truth depth map.

    Solves min_c || P_gt - (P0 + J c) ||^2 over the valid ground-truth
    pixels. With the cosine basis and full validity the normal matrix is
    diagonal, but the general solve is cheap at code size 32 either way.
    """
    gt = gt_depth.astype64()
    mask = (gt > 0).reshape(-1)
    p_gt = depth_to_proximity(np.where(gt > 0, gt, 1.0), decoder.prox_params).reshape(-1)
    r = p_gt[mask] - decoder.prox_prior.reshape(-1)[mask]
    j = decoder.jacobian[mask]
    sol, *_ = np.linalg.lstsq(j, r, rcond=None)
    return DepthCode(sol)


# ---------------------------------------------------------------------------
# Learned decoder: CMWT graph execution


class _Graph:
    """Executes a CMWT layer DAG on (C, H, W) float arrays."""

    def __init__(self, bundle: WeightBundle):
        self.b = bundle
        # Which nodes (transitively) depend on the code input; those are the
        # only ones re-evaluated per Jacobian probe.
        depends: List[bool] = []
        for i, layer in enumerate(bundle.layers):
            if layer.kind == "input_code":
                depends.append(True)
            else:
                depends.append(any(depends[j] for j in layer.inputs))
        self.code_dependent = depends
        if not (depends[bundle.output_prox]):
            log.debug("proximity output does not depend on the code input")

    def run(
        self,
        cond: np.ndarray,
        code: np.ndarray,
        cache: Optional[List[Optional[np.ndarray]]] = None,
    ) -> Dict[int, np.ndarray]:
        """Evaluate all nodes; reuse ``cache`` entries for code-independent ones."""
        b = self.b
        values: List[Optional[np.ndarray]] = [None] * len(b.layers)
        for i, layer in enumerate(b.layers):
            if cache is not None and not self.code_dependent[i]:
                values[i] = cache[i]
                continue
            ins = [values[j] for j in layer.inputs]
            values[i] = self._eval(layer, ins, cond, code)
        return values

    def _eval(self, layer, ins, cond, code) -> np.ndarray:
        kind = layer.kind
        if kind == "input_cond":
            return cond
        if kind == "input_code":
            return code
        x = ins[0]
        if kind == "conv":
            return _conv2d_same(x, layer.tensors[0], layer.tensors[1], layer.name)
        if kind == "dense_map":
            w, bias = layer.tensors
            if x.ndim != 1 or x.shape[0] != w.shape[1]:
                raise FormatError(
                    f"layer {layer.name!r}: dense_map expects a length-{w.shape[1]} vector"
                )
            flat = w.astype(np.float64) @ x.astype(np.float64) + bias.astype(np.float64)
            c = int(layer.attrs["channels"])
            h = int(layer.attrs["height"])
            ww = int(layer.attrs["width"])
            return flat.reshape(c, h, ww).astype(np.float32)
        if kind == "relu":
            return np.maximum(x, 0.0)
        if kind == "sigmoid":
            with np.errstate(over="ignore"):
                return (1.0 / (1.0 + np.exp(-x.astype(np.float64)))).astype(np.float32)
        if kind == "softplus":
            return np.logaddexp(0.0, x.astype(np.float64)).astype(np.float32)
        if kind == "affine":
            return (x * np.float32(layer.attrs["scale"])) + np.float32(layer.attrs["shift"])
        if kind == "upsample2":
            return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
        if kind == "avgpool2":
            c, h, w = x.shape
            if h % 2 or w % 2:
                raise FormatError(f"layer {layer.name!r}: avgpool2 needs even extents, got {h}x{w}")
            return (
                x.reshape(c, h // 2, 2, w // 2, 2).astype(np.float64).mean(axis=(2, 4))
            ).astype(np.float32)
        if kind == "concat":
            hw = {a.shape[1:] for a in ins}
            if len(hw) != 1:
                raise FormatError(f"layer {layer.name!r}: concat inputs disagree on size")
            return np.concatenate(ins, axis=0)
        raise FormatError(f"layer {layer.name!r}: unknown kind {kind!r}")


def _conv2d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, name: str) -> np.ndarray:
    """Stride-1 'same' convolution, symmetric zero padding, float64 accumulate."""
    out_ch, in_ch, kh, kw = kernel.shape
    if x.shape[0] != in_ch:
        raise FormatError(
            f"layer {name!r}: conv expects {in_ch} input channels, got {x.shape[0]}"
        )
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.astype(np.float64), ((0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    out = np.einsum("oikl,ihwkl->ohw", kernel.astype(np.float64), windows, optimize=True)
    out += bias.astype(np.float64)[:, None, None]
    return out.astype(np.float32)


class LearnedDecoderTemplate:
    """A loaded network, waiting to be conditioned on a keyframe."""

    def __init__(self, bundle: WeightBundle, fd_epsilon: float = 1e-3):
        self.bundle = bundle
        self.graph = _Graph(bundle)
        self.fd_epsilon = float(fd_epsilon)
        self.code_size = bundle.code_size
        self.width = bundle.width
        self.height = bundle.height
        self.prox_params = ProximityParams(bundle.prox_scale)

    def conditioning_tensor(self, cond: ConditioningSet) -> np.ndarray:
        """Normalize a conditioning set into the network's input planes.

        Channels: intensity as-is; sparse depth as proximity (0 where
        invalid); reprojection error as confidence a_r / (a_r + e) where
        valid, else 0. The scales come from the weight header, so any
        trainer that wrote the stream agrees on the transform.
        """
        b = self.bundle
        if (cond.width, cond.height) != (b.width, b.height):
            raise ValueError(
                f"conditioning is {cond.width}x{cond.height}, decoder wants {b.width}x{b.height}"
            )
        depth = cond.sparse_depth.astype64()
        valid = depth > 0
        prox = np.where(valid, b.prox_scale / (b.prox_scale + depth), 0.0)
        rep = cond.rep_error.astype64()
        conf = np.where(valid, b.rep_scale / (b.rep_scale + rep), 0.0)
        planes = [cond.intensity.astype64(), prox, conf]
        if b.cond_channels != len(planes):
            raise FormatError(
                f"weights expect {b.cond_channels} conditioning channels, this build provides 3"
            )
        return np.stack(planes).astype(np.float32)

    def condition(self, cond: ConditioningSet) -> AffineDecoder:
        """Bind to one keyframe: run at zero code, linearize the Jacobian."""
        x = self.conditioning_tensor(cond)
        zero = np.zeros(self.code_size, dtype=np.float32)
        values = self.graph.run(x, zero)
        prox0 = values[self.bundle.output_prox]
        unc = values[self.bundle.output_unc]
        if prox0.shape != (1, self.height, self.width):
            raise FormatError(
                f"proximity output has shape {prox0.shape}, expected (1, H, W)"
            )
        if unc.shape != (1, self.height, self.width):
            raise FormatError(f"uncertainty output has shape {unc.shape}, expected (1, H, W)")
        n = self.height * self.width
        jac = np.zeros((n, self.code_size))
        eps = self.fd_epsilon
        for k in range(self.code_size):
            probe = zero.copy()
            probe[k] = eps
            hi = self.graph.run(x, probe, cache=values)[self.bundle.output_prox]
            probe[k] = -eps
            lo = self.graph.run(x, probe, cache=values)[self.bundle.output_prox]
            jac[:, k] = (
                (hi.astype(np.float64) - lo.astype(np.float64)) / (2 * eps)
            ).reshape(-1)
        return AffineDecoder(
            prox_prior=prox0[0].astype(np.float64),
            jacobian=jac,
            uncertainty=np.maximum(unc[0], 1e-6),
            prox_params=self.prox_params,
        )


def load_learned_decoder(source: Union[bytes, str, WeightBundle]) -> LearnedDecoderTemplate:
    """Load a CMWT weight stream into a conditionable decoder template."""
    bundle = source if isinstance(source, WeightBundle) else read_weights(source)
    return LearnedDecoderTemplate(bundle)


# ---------------------------------------------------------------------------
# Reconstruction error (uncertainty-weighted L1)


def recon_error(pred: DenseImage, gt: DenseImage, b: DenseImage) -> float:
    """sum over gt-valid pixels of |pred - gt| / b + log b.

    Works on any matching image pair (depth or proximity space); validity
    comes from the ground truth. b must be strictly positive on the valid
    set.
    """
    if (pred.width, pred.height) != (gt.width, gt.height) or (
        b.width,
        b.height,
    ) != (gt.width, gt.height):
        raise ValueError("recon_error images must share one size")
    mask = gt.valid_mask()
    if not np.any(mask):
        raise ValueError("ground truth has no valid pixels")
    bb = b.astype64()[mask]
    if np.any(bb <= 0):
        raise ValueError("uncertainty must be strictly positive on valid pixels")
    r = np.abs(pred.astype64()[mask] - gt.astype64()[mask])
    return float(np.sum(r / bb + np.log(bb)))
