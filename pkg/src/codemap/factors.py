"""Pairwise error terms over depth codes, with analytic code Jacobians.

All factors keep keyframe poses fixed and differentiate only with respect
to the depth codes. The dense-warp chain for a pixel x in frame i with
decoded depth D_i is

    w(x) = proj( R_ji * D_i(x) * ray(x) + t_ji ),   ray(x) = K^-1 [u v 1]^T

and every factor differentiates through it:

    dD/dc     = (dD/dP) * J_prox[x, :]          (decoder is affine in P)
    dX_j/dD   = R_ji @ ray(x)
    d(u,v)/dX = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]

Image and depth lookups in the target frame use bilinear interpolation;
their derivatives are the exact in-cell derivatives of the interpolant
(forward differences of the bracketing texels), so the analytic Jacobians
match finite differences of the actual energy to rounding error.

Robustness: Huber with per-sample-block IRLS weights; blocks are single
pixels (photometric, geometric), single matches of two rows
(reprojection), or the entire residual (prior, which stays quadratic).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .codec import DecoderOutput, DepthCode
from .geometry import Intrinsics, Pose, ProximityParams, proximity_depth_slope, relative_pose
from .image import DenseImage

log = logging.getLogger(__name__)

# Decoded depths outside this band are treated as unusable for warping.
MIN_SANE_DEPTH = 0.05
MAX_SANE_DEPTH = 1000.0

# Bilinear depth reads whose four texels span more than this are sitting on
# a depth discontinuity; the interpolated value would be a phantom surface
# between foreground and background, so those samples are dropped.
MAX_CORNER_SPREAD = 0.25


@dataclass(frozen=True)
class HuberParams:
    delta: float

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError("huber delta must be positive")


DEFAULT_HUBER = {
    "photometric": HuberParams(0.1),
    "reprojection": HuberParams(2.0),
    "geometric": HuberParams(0.1),
}

DEFAULT_WEIGHTS = {
    "photometric": 1.0,
    "reprojection": 0.01,
    "geometric": 10.0,
    "prior": 1.0,
}


def huber_weight(residual_norm: float, params: HuberParams) -> float:
    """IRLS weight: 1 inside the delta band, delta/|r| outside."""
    r = abs(float(residual_norm))
    if r <= params.delta:
        return 1.0
    return params.delta / r


def _huber_weights(norms: np.ndarray, delta: float) -> np.ndarray:
    out = np.ones_like(norms)
    big = norms > delta
    out[big] = delta / norms[big]
    return out


def _huber_rho(norms: np.ndarray, delta: float) -> np.ndarray:
    """Huber loss of a block norm: s^2/2 inside, delta*(s - delta/2) outside."""
    out = 0.5 * norms**2
    big = norms > delta
    out[big] = delta * (norms[big] - 0.5 * delta)
    return out


@dataclass(frozen=True)
class Correspondence:
    """A matched landmark: pixel in frame i, pixel in frame j."""

    landmark_id: int
    pixel_i: Tuple[float, float]
    pixel_j: Tuple[float, float]

    def swapped(self) -> "Correspondence":
        return Correspondence(self.landmark_id, self.pixel_j, self.pixel_i)


@dataclass(eq=False)
class FactorResidual:
    """One evaluated factor.

    residuals: stacked residual vector (block_size rows per block).
    jacobians: per involved code, keyed "i"/"j", each (len(residuals), K).
    robust_weights: one Huber IRLS weight per block.
    energy: sum of Huber losses of the block norms (before the factor's
    global weight is applied).
    """

    residuals: np.ndarray
    jacobians: Dict[str, np.ndarray]
    robust_weights: np.ndarray
    block_size: int
    energy: float

    @property
    def n_blocks(self) -> int:
        return len(self.robust_weights)

    def row_weights(self) -> np.ndarray:
        """Per-row IRLS weights (block weights expanded)."""
        return np.repeat(self.robust_weights, self.block_size)


def _empty_factor(keys: Sequence[str], code_size: int) -> FactorResidual:
    return FactorResidual(
        residuals=np.zeros(0),
        jacobians={k: np.zeros((0, code_size)) for k in keys},
        robust_weights=np.zeros(0),
        block_size=1,
        energy=0.0,
    )


def _finish(residuals, jacobians, block_size, delta) -> FactorResidual:
    if block_size == 1:
        norms = np.abs(residuals)
    else:
        norms = np.linalg.norm(residuals.reshape(-1, block_size), axis=1)
    if delta is None:
        weights = np.ones_like(norms)
        energy = float(0.5 * np.sum(norms**2))
    else:
        weights = _huber_weights(norms, delta)
        energy = float(np.sum(_huber_rho(norms, delta)))
    return FactorResidual(
        residuals=residuals,
        jacobians=jacobians,
        robust_weights=weights,
        block_size=block_size,
        energy=energy,
    )


# ---------------------------------------------------------------------------
# Bilinear machinery


def bilinear_with_gradient(
    grid: np.ndarray, uv: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample a (H, W) grid at float pixels; also the interpolant's gradient.

    Caller guarantees 0 <= u < W-1 and 0 <= v < H-1.
    """
    u = uv[:, 0]
    v = uv[:, 1]
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    fu = u - x0
    fv = v - y0
    c00 = grid[y0, x0]
    c10 = grid[y0, x0 + 1]
    c01 = grid[y0 + 1, x0]
    c11 = grid[y0 + 1, x0 + 1]
    val = (
        c00 * (1 - fu) * (1 - fv)
        + c10 * fu * (1 - fv)
        + c01 * (1 - fu) * fv
        + c11 * fu * fv
    )
    gu = (c10 - c00) * (1 - fv) + (c11 - c01) * fv
    gv = (c01 - c00) * (1 - fu) + (c11 - c10) * fu
    return val, gu, gv


def _bilinear_corners(uv: np.ndarray):
    u = uv[:, 0]
    v = uv[:, 1]
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    fu = u - x0
    fv = v - y0
    weights = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1
    )
    return x0, y0, fu, fv, weights


def sample_grid(k: Intrinsics, stride: int) -> np.ndarray:
    """Regular integer pixel lattice used for dense factors, (N, 2) float."""
    us = np.arange(0, k.width, stride)
    vs = np.arange(0, k.height, stride)
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1).astype(np.float64)


@dataclass(eq=False)
class _WarpChain:
    """Shared forward/derivative pieces of the dense warp at integer samples."""

    uv_j: np.ndarray        # (N, 2) warped pixels
    z_j: np.ndarray         # (N,) warped depths
    duv_dD: np.ndarray      # (N, 2) d(warped pixel)/d(source depth)
    dz_dD: np.ndarray       # (N,) d(warped depth)/d(source depth)
    dD_dcode: np.ndarray    # (N, K) d(source depth)/d(code)
    sample_uv: np.ndarray   # (N, 2) the surviving source pixels (integer grid)
    sample_idx: np.ndarray  # (N,) flat indices of those pixels
    valid_frac: float


def _warp_chain(
    out_i: DecoderOutput,
    pose_i: Pose,
    pose_j: Pose,
    k: Intrinsics,
    samples: np.ndarray,
    prox_params: ProximityParams,
) -> Optional[_WarpChain]:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    ui = samples[:, 0].astype(np.intp)
    vi = samples[:, 1].astype(np.intp)
    depth = out_i.dense_depth()[vi, ui]
    ok = (depth > MIN_SANE_DEPTH) & (depth < MAX_SANE_DEPTH)

    t_ji = relative_pose(pose_i, pose_j)
    r = t_ji.rotation()
    rays = np.empty((len(samples), 3))
    rays[:, 0] = (samples[:, 0] - k.cx) / k.fx
    rays[:, 1] = (samples[:, 1] - k.cy) / k.fy
    rays[:, 2] = 1.0
    rd = rays @ r.T  # rotated ray directions: dX_j/dD
    x_j = depth[:, None] * rd + t_ji.t
    z = x_j[:, 2]
    ok &= z > 1e-6
    zs = np.where(ok, z, 1.0)
    u_j = k.fx * x_j[:, 0] / zs + k.cx
    v_j = k.fy * x_j[:, 1] / zs + k.cy
    ok &= (u_j >= 0) & (u_j < k.width - 1) & (v_j >= 0) & (v_j < k.height - 1)
    if not np.any(ok):
        return None

    sel = np.nonzero(ok)[0]
    z = z[sel]
    x_j = x_j[sel]
    rd = rd[sel]
    depth = depth[sel]
    u_j = u_j[sel]
    v_j = v_j[sel]

    du_dX = np.stack(
        [k.fx / z, np.zeros_like(z), -k.fx * x_j[:, 0] / z**2], axis=1
    )
    dv_dX = np.stack(
        [np.zeros_like(z), k.fy / z, -k.fy * x_j[:, 1] / z**2], axis=1
    )
    duv_dD = np.stack(
        [np.sum(du_dX * rd, axis=1), np.sum(dv_dX * rd, axis=1)], axis=1
    )
    flat_idx = vi[sel] * k.width + ui[sel]
    dD_dP = proximity_depth_slope(depth, prox_params)
    dD_dcode = dD_dP[:, None] * out_i.jacobian[flat_idx]
    return _WarpChain(
        uv_j=np.stack([u_j, v_j], axis=1),
        z_j=z,
        duv_dD=duv_dD,
        dz_dD=rd[:, 2],
        dD_dcode=dD_dcode,
        sample_uv=samples[sel],
        sample_idx=flat_idx,
        valid_frac=len(sel) / max(len(samples), 1),
    )


# ---------------------------------------------------------------------------
# Factors


def photometric_factor(
    kf_i,
    kf_j,
    code_i: DepthCode,
    decoder_i,
    samples: np.ndarray,
    *,
    huber: HuberParams = DEFAULT_HUBER["photometric"],
    output_i: Optional[DecoderOutput] = None,
) -> FactorResidual:
    """Intensity consistency: r(x) = I_i[x] - I_j[warp(x)] per sampled pixel.

    Samples whose decoded depth is invalid or whose warp leaves frame j
    are dropped; an entirely dropped sample set yields an empty factor.
    """
    out = output_i if output_i is not None else decoder_i.decode(code_i)
    chain = _warp_chain(
        out, kf_i.pose, kf_j.pose, kf_i.intrinsics, samples, decoder_i.prox_params
    )
    if chain is None:
        log.debug("photometric factor %s->%s: no valid samples", kf_i.id, kf_j.id)
        return _empty_factor(("i",), decoder_i.code_size)
    img_i = kf_i.intensity.astype64()
    img_j = kf_j.intensity.astype64()
    ui = chain.sample_uv[:, 0].astype(np.intp)
    vi = chain.sample_uv[:, 1].astype(np.intp)
    val_j, gu, gv = bilinear_with_gradient(img_j, chain.uv_j)
    residuals = img_i[vi, ui] - val_j
    dI_dD = gu * chain.duv_dD[:, 0] + gv * chain.duv_dD[:, 1]
    jac = -dI_dD[:, None] * chain.dD_dcode
    return _finish(residuals, {"i": jac}, 1, huber.delta)


def reprojection_factor(
    kf_i,
    kf_j,
    code_i: DepthCode,
    decoder_i,
    matches: Sequence[Correspondence],
    *,
    huber: HuberParams = DEFAULT_HUBER["reprojection"],
    output_i: Optional[DecoderOutput] = None,
) -> FactorResidual:
    """Match consistency: r = warp(x_i) - y_j per correspondence, 2 rows each.

    The decoded depth at the (generally non-integer) match pixel is read
    with bilinear interpolation, so the Jacobian mixes the four bracketing
    texels' code sensitivities.
    """
    code_size = decoder_i.code_size
    if len(matches) == 0:
        return _empty_factor(("i",), code_size)
    out = output_i if output_i is not None else decoder_i.decode(code_i)
    k = kf_i.intrinsics
    uv_i = np.array([m.pixel_i for m in matches], dtype=np.float64)
    uv_j_meas = np.array([m.pixel_j for m in matches], dtype=np.float64)

    ok = (
        (uv_i[:, 0] >= 0)
        & (uv_i[:, 0] < k.width - 1)
        & (uv_i[:, 1] >= 0)
        & (uv_i[:, 1] < k.height - 1)
    )
    depth_grid = out.dense_depth()
    x0, y0, fu, fv, wts = _bilinear_corners(uv_i)
    x0c = np.clip(x0, 0, k.width - 2)
    y0c = np.clip(y0, 0, k.height - 2)
    corners = np.stack(
        [
            depth_grid[y0c, x0c],
            depth_grid[y0c, x0c + 1],
            depth_grid[y0c + 1, x0c],
            depth_grid[y0c + 1, x0c + 1],
        ],
        axis=1,
    )
    ok &= np.all((corners > MIN_SANE_DEPTH) & (corners < MAX_SANE_DEPTH), axis=1)
    ok &= corners.max(axis=1) - corners.min(axis=1) <= MAX_CORNER_SPREAD
    depth = np.sum(wts * corners, axis=1)

    t_ji = relative_pose(kf_i.pose, kf_j.pose)
    r = t_ji.rotation()
    rays = np.empty((len(matches), 3))
    rays[:, 0] = (uv_i[:, 0] - k.cx) / k.fx
    rays[:, 1] = (uv_i[:, 1] - k.cy) / k.fy
    rays[:, 2] = 1.0
    rd = rays @ r.T
    x_j = depth[:, None] * rd + t_ji.t
    z = x_j[:, 2]
    ok &= z > 1e-6
    if not np.any(ok):
        log.debug("reprojection factor %s->%s: all matches unusable", kf_i.id, kf_j.id)
        return _empty_factor(("i",), code_size)
    sel = np.nonzero(ok)[0]
    z = z[sel]
    x_j = x_j[sel]
    rd = rd[sel]

    u_pred = k.fx * x_j[:, 0] / z + k.cx
    v_pred = k.fy * x_j[:, 1] / z + k.cy
    residuals = np.stack(
        [u_pred - uv_j_meas[sel, 0], v_pred - uv_j_meas[sel, 1]], axis=1
    ).reshape(-1)

    du_dD = (k.fx / z) * rd[:, 0] - (k.fx * x_j[:, 0] / z**2) * rd[:, 2]
    dv_dD = (k.fy / z) * rd[:, 1] - (k.fy * x_j[:, 1] / z**2) * rd[:, 2]
    # Depth sensitivity to the code through the four bracketing texels.
    dD_dP = proximity_depth_slope(corners[sel], decoder_i.prox_params)
    flat = np.stack(
        [
            y0c[sel] * k.width + x0c[sel],
            y0c[sel] * k.width + x0c[sel] + 1,
            (y0c[sel] + 1) * k.width + x0c[sel],
            (y0c[sel] + 1) * k.width + x0c[sel] + 1,
        ],
        axis=1,
    )
    jrows = out.jacobian[flat]  # (n, 4, K)
    dD_dcode = np.einsum("nc,nck->nk", wts[sel] * dD_dP, jrows)
    jac = np.empty((len(sel) * 2, code_size))
    jac[0::2] = du_dD[:, None] * dD_dcode
    jac[1::2] = dv_dD[:, None] * dD_dcode
    return _finish(residuals, {"i": jac}, 2, huber.delta)


def sparse_geometric_factor(
    kf_i,
    kf_j,
    code_i: DepthCode,
    code_j: DepthCode,
    decoder_i,
    decoder_j,
    samples: np.ndarray,
    *,
    huber: HuberParams = DEFAULT_HUBER["geometric"],
    output_i: Optional[DecoderOutput] = None,
    output_j: Optional[DecoderOutput] = None,
) -> FactorResidual:
    """Depth consistency: r(x) = z_j(x) - D_j[warp(x)] per sampled pixel.

    Couples both codes: the warped depth through code i, the target
    decoder's map through code j. Works on textureless surfaces where the
    photometric term is flat.
    """
    out_i = output_i if output_i is not None else decoder_i.decode(code_i)
    out_j = output_j if output_j is not None else decoder_j.decode(code_j)
    chain = _warp_chain(
        out_i, kf_i.pose, kf_j.pose, kf_i.intrinsics, samples, decoder_i.prox_params
    )
    if chain is None:
        return _empty_factor(("i", "j"), decoder_i.code_size)
    k = kf_i.intrinsics
    depth_j = out_j.dense_depth()
    x0, y0, fu, fv, wts = _bilinear_corners(chain.uv_j)
    corners = np.stack(
        [
            depth_j[y0, x0],
            depth_j[y0, x0 + 1],
            depth_j[y0 + 1, x0],
            depth_j[y0 + 1, x0 + 1],
        ],
        axis=1,
    )
    ok = np.all((corners > MIN_SANE_DEPTH) & (corners < MAX_SANE_DEPTH), axis=1)
    ok &= corners.max(axis=1) - corners.min(axis=1) <= MAX_CORNER_SPREAD
    if not np.any(ok):
        log.debug("geometric factor %s->%s: no valid target depths", kf_i.id, kf_j.id)
        return _empty_factor(("i", "j"), decoder_i.code_size)
    sel = np.nonzero(ok)[0]

    val = np.sum(wts[sel] * corners[sel], axis=1)
    gu = (corners[sel, 1] - corners[sel, 0]) * (1 - fv[sel]) + (
        corners[sel, 3] - corners[sel, 2]
    ) * fv[sel]
    gv = (corners[sel, 2] - corners[sel, 0]) * (1 - fu[sel]) + (
        corners[sel, 3] - corners[sel, 1]
    ) * fu[sel]
    residuals = chain.z_j[sel] - val

    dr_dD_i = chain.dz_dD[sel] - (
        gu * chain.duv_dD[sel, 0] + gv * chain.duv_dD[sel, 1]
    )
    jac_i = dr_dD_i[:, None] * chain.dD_dcode[sel]

    dD_dP_j = proximity_depth_slope(corners[sel], decoder_j.prox_params)
    flat = np.stack(
        [
            y0[sel] * k.width + x0[sel],
            y0[sel] * k.width + x0[sel] + 1,
            (y0[sel] + 1) * k.width + x0[sel],
            (y0[sel] + 1) * k.width + x0[sel] + 1,
        ],
        axis=1,
    )
    jrows = out_j.jacobian[flat]
    jac_j = -np.einsum("nc,nck->nk", wts[sel] * dD_dP_j, jrows)
    return _finish(residuals, {"i": jac_i, "j": jac_j}, 1, huber.delta)


def zero_code_prior(code: DepthCode, weight: float) -> FactorResidual:
    """Quadratic pull toward the zero code: r = sqrt(w) * c, J = sqrt(w) * I.

    Kept unrobustified; a Huber on the regularizer would soften exactly
    the codes that drift furthest, which is backwards.
    """
    if weight < 0:
        raise ValueError("prior weight must be nonnegative")
    s = np.sqrt(weight)
    residuals = s * code.values
    jac = s * np.eye(code.size)
    return _finish(residuals, {"i": jac}, code.size, None)
