"""Factor residuals and their analytic code Jacobians.

Every factor is checked two ways: against constructed cases whose
residuals are known in closed form (identity pairs, uniform depth
offsets, displaced matches), and against central finite differences of
its own residual vector over the code, which validates the full chain
rule through decoder, warp, projection, and bilinear sampling.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from conftest import decoder_for

from codemap.codec import DecoderOutput, DepthCode
from codemap.factors import (
    DEFAULT_HUBER,
    DEFAULT_WEIGHTS,
    Correspondence,
    HuberParams,
    bilinear_with_gradient,
    huber_weight,
    photometric_factor,
    reprojection_factor,
    sample_grid,
    sparse_geometric_factor,
    zero_code_prior,
)
from codemap.geometry import (
    PixelCoord,
    Pose,
    depth_to_proximity,
    relative_pose,
    warp,
)
from codemap.image import DenseImage

CODE = 32


# ── Shared helpers ───────────────────────────────────────────────────────


def _gt_output(packet, decoder) -> DecoderOutput:
    """A DecoderOutput holding the exact rendered depth, so residuals
    measure geometric consistency rather than code-fit error."""
    depth64 = packet.gt_depth.astype64()
    prox = depth_to_proximity(depth64, decoder.prox_params)
    return DecoderOutput(
        depth=packet.gt_depth,
        uncertainty=DenseImage.full(
            packet.gt_depth.width, packet.gt_depth.height, 0.05, "uncertainty"
        ),
        jacobian=decoder.jacobian,
        proximity=DenseImage.from_array(prox, "proximity"),
        depth_values=depth64,
    )


def _fd_jacobian(residual_fn, code_values: np.ndarray, eps: float = 1e-6):
    """Central differences of residual_fn over every code entry.

    Requires the valid-sample set to stay fixed across the probes, which
    it does for the small steps used here; a row-count change fails loudly
    instead of silently comparing misaligned rows.
    """
    base = residual_fn(code_values)
    fd = np.empty((base.size, code_values.size))
    for k in range(code_values.size):
        plus = code_values.copy()
        plus[k] += eps
        minus = code_values.copy()
        minus[k] -= eps
        rp = residual_fn(plus)
        rm = residual_fn(minus)
        assert rp.size == base.size and rm.size == base.size
        fd[:, k] = (rp - rm) / (2 * eps)
    return fd


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    return float(
        np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)
    )


def _assert_finite(factor):
    assert np.all(np.isfinite(factor.residuals))
    for jac in factor.jacobians.values():
        assert np.all(np.isfinite(jac))
    assert np.all(np.isfinite(factor.robust_weights))
    assert factor.energy >= 0.0


# ── Huber weighting ──────────────────────────────────────────────────────


class TestHuber:
    def test_weight_profile(self):
        p = HuberParams(0.5)
        assert huber_weight(0.0, p) == 1.0
        assert huber_weight(0.5, p) == 1.0
        assert huber_weight(1.0, p) == pytest.approx(0.5)

    def test_delta_validated(self):
        with pytest.raises(ValueError):
            HuberParams(0.0)

    def test_stock_thresholds(self):
        assert DEFAULT_HUBER["photometric"].delta == 0.1
        assert DEFAULT_HUBER["reprojection"].delta == 2.0
        assert DEFAULT_HUBER["geometric"].delta == 0.1
        assert DEFAULT_WEIGHTS == {
            "photometric": 1.0,
            "reprojection": 0.01,
            "geometric": 10.0,
            "prior": 1.0,
        }


# ── Sampling machinery ───────────────────────────────────────────────────


class TestSampleGrid:
    def test_counts_and_integrality(self, small_packets):
        k = small_packets[0].intrinsics
        grid = sample_grid(k, 4)
        assert grid.shape == (192, 2)
        assert np.all(grid == np.round(grid))
        assert np.all(grid[:, 0] >= 0) and np.all(grid[:, 0] < k.width)
        assert np.all(grid[:, 1] >= 0) and np.all(grid[:, 1] < k.height)
        assert len(np.unique(grid, axis=0)) == len(grid)


class TestBilinear:
    def test_integer_pixels_exact(self):
        rng = np.random.default_rng(0)
        grid = rng.uniform(0, 1, (10, 14))
        uv = np.array([[3.0, 2.0], [0.0, 0.0], [12.0, 8.0]])
        vals, _, _ = bilinear_with_gradient(grid, uv)
        np.testing.assert_array_equal(
            vals, grid[uv[:, 1].astype(int), uv[:, 0].astype(int)]
        )

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(1)
        grid = rng.uniform(0, 1, (12, 16))
        uv = np.stack(
            [rng.uniform(0, 14.9, 50), rng.uniform(0, 10.9, 50)], axis=1
        )
        vals, _, _ = bilinear_with_gradient(grid, uv)
        x0 = np.floor(uv[:, 0]).astype(int)
        y0 = np.floor(uv[:, 1]).astype(int)
        fu = uv[:, 0] - x0
        fv = uv[:, 1] - y0
        ref = (
            grid[y0, x0] * (1 - fu) * (1 - fv)
            + grid[y0, x0 + 1] * fu * (1 - fv)
            + grid[y0 + 1, x0] * (1 - fu) * fv
            + grid[y0 + 1, x0 + 1] * fu * fv
        )
        np.testing.assert_allclose(vals, ref, rtol=1e-12)

    def test_gradient_matches_in_cell_differences(self):
        rng = np.random.default_rng(2)
        grid = rng.uniform(0, 1, (12, 16))
        uv = np.stack(
            [rng.uniform(0.2, 14.7, 30), rng.uniform(0.2, 10.7, 30)], axis=1
        )
        _, gu, gv = bilinear_with_gradient(grid, uv)
        h = 1e-7
        vu_p, _, _ = bilinear_with_gradient(grid, uv + [h, 0])
        vu_m, _, _ = bilinear_with_gradient(grid, uv - [h, 0])
        vv_p, _, _ = bilinear_with_gradient(grid, uv + [0, h])
        vv_m, _, _ = bilinear_with_gradient(grid, uv - [0, h])
        np.testing.assert_allclose(gu, (vu_p - vu_m) / (2 * h), atol=1e-6)
        np.testing.assert_allclose(gv, (vv_p - vv_m) / (2 * h), atol=1e-6)


# ── Photometric factor ───────────────────────────────────────────────────


class TestPhotometricFactor:
    def test_identity_pair_zero_residual(self, small_packets, small_decoders):
        kf = small_packets[0]
        dec = small_decoders[0]
        rng = np.random.default_rng(3)
        code = DepthCode(rng.normal(0, 0.3, CODE))
        samples = sample_grid(kf.intrinsics, 4)
        f = photometric_factor(kf, kf, code, dec, samples)
        assert f.n_blocks > 0
        np.testing.assert_allclose(f.residuals, 0.0, atol=1e-12)
        assert f.energy == pytest.approx(0.0, abs=1e-20)

    def test_constant_intensity_flat_for_any_code(
        self, textureless_packets, textureless_decoders
    ):
        kf_i, kf_j = textureless_packets
        dec = textureless_decoders[0]
        samples = sample_grid(kf_i.intrinsics, 8)
        rng = np.random.default_rng(4)
        for _ in range(3):
            code = DepthCode(rng.normal(0, 0.5, CODE))
            f = photometric_factor(kf_i, kf_j, code, dec, samples)
            np.testing.assert_allclose(f.residuals, 0.0, atol=1e-6)

    def test_true_code_on_textured_plane(
        self, plane_packets, plane_decoders, plane_gt_codes
    ):
        kf_i, kf_j = plane_packets[0], plane_packets[1]
        samples = sample_grid(kf_i.intrinsics, 4)
        f = photometric_factor(
            kf_i, kf_j, plane_gt_codes[0], plane_decoders[0], samples
        )
        assert f.n_blocks > 100
        assert np.mean(np.abs(f.residuals)) < 1e-3
        _assert_finite(f)

    def test_jacobian_versus_finite_differences(
        self, small_packets, small_decoders
    ):
        kf_i, kf_j = small_packets
        dec = small_decoders[0]
        samples = sample_grid(kf_i.intrinsics, 8)
        rng = np.random.default_rng(5)
        for _ in range(20):
            vals = rng.normal(0, 0.3, CODE)
            f = photometric_factor(kf_i, kf_j, DepthCode(vals), dec, samples)
            _assert_finite(f)
            fd = _fd_jacobian(
                lambda c: photometric_factor(
                    kf_i, kf_j, DepthCode(c), dec, samples
                ).residuals,
                vals,
            )
            assert _rel_err(f.jacobians["i"], fd) < 1e-3

    def test_all_samples_out_of_view_yields_empty(
        self, small_packets, small_decoders
    ):
        kf_i = small_packets[0]
        far = dataclasses.replace(
            kf_i, pose=Pose.from_rotvec((0.0, 0.0, 0.0), (100.0, 0.0, 0.0))
        )
        samples = sample_grid(kf_i.intrinsics, 8)
        code = DepthCode.zeros(CODE)
        f = photometric_factor(kf_i, far, code, small_decoders[0], samples)
        assert f.n_blocks == 0
        assert f.energy == 0.0
        _assert_finite(f)

    def test_sample_order_does_not_matter(self, small_packets, small_decoders):
        kf_i, kf_j = small_packets
        dec = small_decoders[0]
        samples = sample_grid(kf_i.intrinsics, 4)
        code = DepthCode(np.random.default_rng(6).normal(0, 0.3, CODE))
        a = photometric_factor(kf_i, kf_j, code, dec, samples)
        perm = np.random.default_rng(7).permutation(len(samples))
        b = photometric_factor(kf_i, kf_j, code, dec, samples[perm])
        assert a.energy == pytest.approx(b.energy, abs=1e-10)
        np.testing.assert_allclose(
            np.sort(a.residuals), np.sort(b.residuals), atol=1e-12
        )


# ── Reprojection factor ──────────────────────────────────────────────────


class TestReprojectionFactor:
    def test_consistent_geometry_is_exact(self, small_packets, small_decoders):
        """Matches synthesized by warping the exact depths the factor
        reads must close the loop to well under a microtexel."""
        kf_i, kf_j = small_packets
        out = _gt_output(kf_i, small_decoders[0])
        depth = out.dense_depth()
        t_ji = relative_pose(kf_i.pose, kf_j.pose)
        matches = []
        for n, (u, v) in enumerate([(8, 6), (20, 15), (33, 24), (44, 30), (55, 40)]):
            y, _ = warp(PixelCoord(float(u), float(v)), float(depth[v, u]),
                        t_ji, kf_i.intrinsics)
            matches.append(Correspondence(n, (float(u), float(v)), (y.u, y.v)))
        f = reprojection_factor(
            kf_i, kf_j, DepthCode.zeros(CODE), small_decoders[0], matches,
            output_i=out,
        )
        assert f.n_blocks == len(matches)
        assert f.block_size == 2
        np.testing.assert_allclose(f.residuals, 0.0, atol=1e-6)

    def test_stored_sequence_matches_close_to_true_warp(
        self, small_packets, small_decoders
    ):
        """Sequence matches were generated from the renderer's own
        geometry; through the float32 depth raster they still close to
        within a few microtexels."""
        kf_i, kf_j = small_packets[1], small_packets[0]
        matches = kf_i.matches[0]
        assert len(matches) > 10
        out = _gt_output(kf_i, small_decoders[1])
        f = reprojection_factor(
            kf_i, kf_j, DepthCode.zeros(CODE), small_decoders[1], matches,
            output_i=out,
        )
        assert f.n_blocks == len(matches)
        np.testing.assert_allclose(f.residuals, 0.0, atol=1e-4)

    def test_displaced_match_residual_norm(self, small_packets, small_decoders):
        kf_i, kf_j = small_packets
        out = _gt_output(kf_i, small_decoders[0])
        x = PixelCoord(20.0, 15.0)
        d = float(out.dense_depth()[15, 20])
        t_ji = relative_pose(kf_i.pose, kf_j.pose)
        y_true, _ = warp(x, d, t_ji, kf_i.intrinsics)
        match = Correspondence(0, (x.u, x.v), (y_true.u + 2.0, y_true.v))
        f = reprojection_factor(
            kf_i, kf_j, DepthCode.zeros(CODE), small_decoders[0], [match],
            output_i=out,
        )
        assert np.linalg.norm(f.residuals) == pytest.approx(2.0, abs=1e-9)

    def test_self_matches_zero(self, small_packets, small_decoders):
        kf = small_packets[0]
        matches = [
            Correspondence(n, (float(u), float(v)), (float(u), float(v)))
            for n, (u, v) in enumerate([(10, 10), (30, 20), (50, 40)])
        ]
        code = DepthCode(np.random.default_rng(8).normal(0, 0.3, CODE))
        f = reprojection_factor(kf, kf, code, small_decoders[0], matches)
        np.testing.assert_allclose(f.residuals, 0.0, atol=1e-9)

    def test_empty_matches_empty_factor(self, small_packets, small_decoders):
        kf_i, kf_j = small_packets
        f = reprojection_factor(
            kf_i, kf_j, DepthCode.zeros(CODE), small_decoders[0], []
        )
        assert f.n_blocks == 0
        _assert_finite(f)

    def test_out_of_bounds_match_dropped(self, small_packets, small_decoders):
        kf_i, kf_j = small_packets
        matches = [
            Correspondence(0, (20.0, 15.0), (21.0, 15.0)),
            Correspondence(1, (200.0, 15.0), (21.0, 15.0)),
        ]
        code = DepthCode.zeros(CODE)
        f = reprojection_factor(kf_i, kf_j, code, small_decoders[0], matches)
        assert f.n_blocks == 1
        _assert_finite(f)

    def test_jacobian_versus_finite_differences(
        self, small_packets, small_decoders
    ):
        kf_i, kf_j = small_packets[1], small_packets[0]
        dec = small_decoders[1]
        matches = kf_i.matches[0][:12]
        rng = np.random.default_rng(9)
        for _ in range(20):
            vals = rng.normal(0, 0.3, CODE)
            f = reprojection_factor(kf_i, kf_j, DepthCode(vals), dec, matches)
            _assert_finite(f)
            fd = _fd_jacobian(
                lambda c: reprojection_factor(
                    kf_i, kf_j, DepthCode(c), dec, matches
                ).residuals,
                vals,
            )
            assert _rel_err(f.jacobians["i"], fd) < 1e-5


# ── Sparse geometric factor ──────────────────────────────────────────────


class TestGeometricFactor:
    def test_identical_frames_zero(self, small_packets, small_decoders):
        kf = small_packets[0]
        dec = small_decoders[0]
        code = DepthCode(np.random.default_rng(10).normal(0, 0.3, CODE))
        samples = sample_grid(kf.intrinsics, 4)
        f = sparse_geometric_factor(kf, kf, code, code, dec, dec, samples)
        assert f.n_blocks > 0
        np.testing.assert_allclose(f.residuals, 0.0, atol=1e-12)

    def test_uniform_offset_shows_up_negated(self, small_packets, small_decoders):
        """Raising the target map by eps lowers every residual by eps:
        r(x) = z_warped - D_j[warp(x)]."""
        kf = small_packets[0]
        dec = small_decoders[0]
        code = DepthCode.zeros(CODE)
        out = dec.decode(code)
        eps = 0.05
        shifted = dataclasses.replace(out, depth_values=out.dense_depth() + eps)
        samples = sample_grid(kf.intrinsics, 4)
        f = sparse_geometric_factor(
            kf, kf, code, code, dec, dec, samples, output_j=shifted
        )
        np.testing.assert_allclose(f.residuals, -eps, atol=1e-9)

    def test_two_true_views_consistent(self, small_packets, small_decoders):
        kf_i, kf_j = small_packets
        out_i = _gt_output(kf_i, small_decoders[0])
        out_j = _gt_output(kf_j, small_decoders[1])
        samples = sample_grid(kf_i.intrinsics, 4)
        f = sparse_geometric_factor(
            kf_i, kf_j, DepthCode.zeros(CODE), DepthCode.zeros(CODE),
            small_decoders[0], small_decoders[1], samples,
            output_i=out_i, output_j=out_j,
        )
        assert f.n_blocks > 100
        assert np.mean(np.abs(f.residuals)) < 1e-3

    def test_jacobians_versus_finite_differences(
        self, small_packets, small_decoders
    ):
        kf_i, kf_j = small_packets
        dec_i, dec_j = small_decoders
        samples = sample_grid(kf_i.intrinsics, 8)
        rng = np.random.default_rng(11)
        for _ in range(20):
            ci = rng.normal(0, 0.3, CODE)
            cj = rng.normal(0, 0.3, CODE)
            f = sparse_geometric_factor(
                kf_i, kf_j, DepthCode(ci), DepthCode(cj), dec_i, dec_j, samples
            )
            _assert_finite(f)
            fd_i = _fd_jacobian(
                lambda c: sparse_geometric_factor(
                    kf_i, kf_j, DepthCode(c), DepthCode(cj), dec_i, dec_j,
                    samples,
                ).residuals,
                ci,
            )
            fd_j = _fd_jacobian(
                lambda c: sparse_geometric_factor(
                    kf_i, kf_j, DepthCode(ci), DepthCode(c), dec_i, dec_j,
                    samples,
                ).residuals,
                cj,
            )
            assert _rel_err(f.jacobians["i"], fd_i) < 1e-5
            assert _rel_err(f.jacobians["j"], fd_j) < 1e-5

    def test_sample_order_does_not_matter(self, small_packets, small_decoders):
        kf_i, kf_j = small_packets
        dec_i, dec_j = small_decoders
        samples = sample_grid(kf_i.intrinsics, 4)
        rng = np.random.default_rng(12)
        ci, cj = DepthCode(rng.normal(0, 0.3, CODE)), DepthCode(rng.normal(0, 0.3, CODE))
        a = sparse_geometric_factor(kf_i, kf_j, ci, cj, dec_i, dec_j, samples)
        perm = rng.permutation(len(samples))
        b = sparse_geometric_factor(kf_i, kf_j, ci, cj, dec_i, dec_j, samples[perm])
        assert a.energy == pytest.approx(b.energy, abs=1e-10)


# ── Zero-code prior ──────────────────────────────────────────────────────


class TestZeroCodePrior:
    def test_zero_code(self):
        f = zero_code_prior(DepthCode.zeros(CODE), 1.0)
        np.testing.assert_array_equal(f.residuals, np.zeros(CODE))
        assert f.energy == 0.0

    def test_unit_code_weight_four(self):
        vals = np.zeros(CODE)
        vals[0] = 1.0
        f = zero_code_prior(DepthCode(vals), 4.0)
        assert np.linalg.norm(f.residuals) == pytest.approx(2.0)
        assert f.energy == pytest.approx(2.0)  # 0.5 * ||sqrt(4) e_1||^2

    def test_jacobian_is_scaled_identity(self):
        f = zero_code_prior(DepthCode.zeros(8), 9.0)
        np.testing.assert_array_equal(f.jacobians["i"], 3.0 * np.eye(8))
        assert np.all(f.robust_weights == 1.0)

    def test_linearity_against_differences(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            vals = rng.normal(0, 1.0, 16)
            w = float(rng.uniform(0.1, 5.0))
            f = zero_code_prior(DepthCode(vals), w)
            fd = _fd_jacobian(
                lambda c: zero_code_prior(DepthCode(c), w).residuals, vals
            )
            assert _rel_err(f.jacobians["i"], fd) < 1e-9
