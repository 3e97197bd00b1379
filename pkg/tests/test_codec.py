"""Depth codes, the analytic decoder, and learned-decoder replay.

The decoder contract everything downstream leans on: decoding is affine
in the code (proximity space), D(c) = P0 + J c, with the Jacobian J
constant per conditioned keyframe. The analytic decoder builds P0 by
confidence-weighted inverse-distance interpolation of the sparse depths
and J from orthogonal cosine modes; the learned decoder replays an
exported CMWT graph and is linearized at the zero code.
"""

from __future__ import annotations

import numpy as np
import pytest

from codemap.codec import (
    DEFAULT_CODE_SIZE,
    AffineDecoder,
    ConditioningSet,
    DepthCode,
    FormatError,
    InsufficientConditioningError,
    LearnedDecoderTemplate,
    analytic_decoder,
    decode,
    fit_code,
    load_learned_decoder,
    recon_error,
)
from codemap.geometry import ProximityParams, depth_to_proximity
from codemap.image import DenseImage
from codemap.io import LayerSpec, WeightBundle, weights_to_bytes
from codemap.synth import make_sequence, plane_scene

from conftest import decoder_for, depth_mae


# ── DepthCode ────────────────────────────────────────────────────────────


class TestDepthCode:
    def test_zeros_and_size(self):
        c = DepthCode.zeros(32)
        assert c.size == 32
        assert not c.values.any()
        assert c.values.dtype == np.float64

    def test_default_code_size(self):
        assert DEFAULT_CODE_SIZE == 32

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            DepthCode(np.array([0.0, np.nan]))
        with pytest.raises(ValueError):
            DepthCode(np.array([np.inf]))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            DepthCode(np.array([]))


# ── Analytic decoder ─────────────────────────────────────────────────────


class TestAnalyticDecoder:
    def test_zero_code_returns_the_prior_exactly(self, small_packets, small_decoders):
        dec = small_decoders[0]
        out = dec.decode(DepthCode.zeros(dec.code_size))
        np.testing.assert_array_equal(
            out.proximity.astype64(), dec.prox_prior.astype(np.float32).astype(np.float64)
        )

    def test_unit_code_adds_one_basis_image(self, small_decoders):
        dec = small_decoders[0]
        for k in (0, 5, dec.code_size - 1):
            e_k = np.zeros(dec.code_size)
            e_k[k] = 1.0
            prox = dec.prox_prior + (dec.jacobian @ e_k).reshape(dec.height, dec.width)
            out = dec.decode(DepthCode(e_k))
            np.testing.assert_allclose(
                out.proximity.astype64(), prox, atol=1e-6
            )

    def test_jacobian_matches_finite_differences(self, small_decoders):
        """Forward difference through the float64 depth path; the f32
        proximity raster is for storage, not numerics."""
        dec = small_decoders[0]
        eps = 1e-4
        rng = np.random.default_rng(0)
        for k in rng.choice(dec.code_size, size=8, replace=False):
            e_k = np.zeros(dec.code_size)
            e_k[k] = eps
            plus = dec.decode(DepthCode(e_k))
            prox_plus = depth_to_proximity(plus.dense_depth(), dec.prox_params)
            col = (prox_plus - dec.prox_prior).reshape(-1) / eps
            ref = dec.jacobian[:, k]
            err = np.abs(col - ref)
            scale = np.maximum(np.abs(ref), 1e-6)
            assert np.max(err / scale) < 1e-6

    def test_decode_is_affine_in_the_code(self, small_decoders):
        dec = small_decoders[0]
        rng = np.random.default_rng(1)
        c1 = DepthCode(rng.normal(0, 0.3, dec.code_size))
        c2 = DepthCode(rng.normal(0, 0.3, dec.code_size))
        for alpha in (0.0, 0.3, 0.7, 1.0):
            mix = DepthCode(alpha * c1.values + (1 - alpha) * c2.values)
            p_mix = dec.decode(mix).proximity.astype64()
            p_lin = alpha * dec.decode(c1).proximity.astype64() + (
                1 - alpha
            ) * dec.decode(c2).proximity.astype64()
            np.testing.assert_allclose(p_mix, p_lin, atol=1e-6)

    def test_depth_positive_where_proximity_in_range(self, small_decoders):
        dec = small_decoders[0]
        out = dec.decode(DepthCode(np.full(dec.code_size, 0.5)))
        prox = out.proximity.astype64()
        inside = (prox > 0) & (prox < 1)
        assert np.all(out.dense_depth()[inside] > 0)

    def test_uncertainty_strictly_positive(self, small_decoders):
        for dec in small_decoders:
            out = dec.decode(DepthCode.zeros(dec.code_size))
            assert np.all(out.uncertainty.values > 0)

    def test_jacobian_row_count_equals_pixel_count(self, small_decoders):
        dec = small_decoders[0]
        assert dec.jacobian.shape == (dec.width * dec.height, dec.code_size)

    def test_needs_at_least_three_sparse_points(self):
        intensity = DenseImage.full(8, 6, 0.5, "intensity")
        sparse = np.zeros((6, 8), np.float32)
        sparse[2, 3] = 2.0
        sparse[4, 5] = 2.5
        cond = ConditioningSet(
            intensity,
            DenseImage.from_array(sparse, "depth"),
            DenseImage.from_array(np.where(sparse > 0, 0.5, 0.0), "rep_error"),
        )
        with pytest.raises(InsufficientConditioningError):
            analytic_decoder(cond)

    def test_prior_tracks_dense_truth_given_exact_points(self):
        """500 noise-free sparse samples of a smooth plane pin the
        interpolated prior to the true surface within 5 cm."""
        packets = make_sequence(plane_scene(n_frames=2), 500, None, seed=2)
        dec = decoder_for(packets[0])
        out = dec.decode(DepthCode.zeros(dec.code_size))
        assert depth_mae(out.depth, packets[0].gt_depth) < 0.05

    def test_uniform_rep_error_level_does_not_change_the_prior(self, small_packets):
        """Confidence weighting normalizes out when every point carries
        the same reprojection error."""
        p = small_packets[0]
        sparse = p.sparse_depth.values
        priors = []
        for level in (0.25, 3.0):
            rep = DenseImage.from_array(
                np.where(sparse > 0, level, 0.0).astype(np.float32), "rep_error"
            )
            dec = analytic_decoder(ConditioningSet(p.intensity, p.sparse_depth, rep))
            priors.append(dec.prox_prior)
        np.testing.assert_allclose(priors[0], priors[1], atol=1e-12)

    def test_basis_images_are_orthogonal(self, small_decoders):
        j = small_decoders[0].jacobian
        gram = j.T @ j
        diag = np.diag(gram)
        off = gram - np.diag(diag)
        assert np.max(np.abs(off)) / np.min(diag) < 1e-6

    def test_wrong_code_size_rejected(self, small_decoders):
        with pytest.raises(ValueError):
            small_decoders[0].decode(DepthCode.zeros(7))


# ── Ground-truth code fitting ────────────────────────────────────────────


class TestFitCode:
    def test_fit_reaches_rendered_depth(self, plane_packets, plane_decoders):
        """The 32-mode basis must be expressive enough to carry the
        optimizer tests: fitted codes reproduce the smooth scene to
        better than 2 cm."""
        maes = []
        for p, dec in zip(plane_packets, plane_decoders):
            code = fit_code(dec, p.gt_depth)
            out = dec.decode(code)
            maes.append(depth_mae(out.depth, p.gt_depth))
        assert max(maes) < 0.02

    def test_fit_is_a_least_squares_optimum(self, small_packets, small_decoders):
        """Perturbing the fitted code in any basis direction must not
        reduce the masked proximity residual."""
        p, dec = small_packets[0], small_decoders[0]
        code = fit_code(dec, p.gt_depth)
        gt = p.gt_depth.astype64()
        mask = (gt > 0).reshape(-1)
        p_gt = depth_to_proximity(np.where(gt > 0, gt, 1.0), dec.prox_params).reshape(-1)

        def sq_err(c: np.ndarray) -> float:
            pred = dec.prox_prior.reshape(-1) + dec.jacobian @ c
            return float(np.sum((p_gt[mask] - pred[mask]) ** 2))

        best = sq_err(code.values)
        rng = np.random.default_rng(3)
        for _ in range(10):
            step = rng.normal(0, 1e-3, code.size)
            assert sq_err(code.values + step) >= best - 1e-12


# ── Reconstruction error ─────────────────────────────────────────────────


class TestReconError:
    def _pair(self, depth: np.ndarray):
        img = DenseImage.from_array(depth.astype(np.float32), "depth")
        return img

    def test_zero_at_equal_maps_with_unit_b(self):
        gt = self._pair(np.full((4, 5), 2.0))
        b = DenseImage.full(5, 4, 1.0, "uncertainty")
        assert recon_error(gt, gt, b) == pytest.approx(0.0, abs=1e-12)

    def test_log_term_alone_counts_valid_pixels(self):
        gt = self._pair(np.full((4, 5), 2.0))
        b = DenseImage.full(5, 4, float(np.e), "uncertainty")
        assert recon_error(gt, gt, b) == pytest.approx(20.0, rel=1e-6)

    def test_pointwise_minimum_at_b_equal_residual(self):
        rng = np.random.default_rng(4)
        gt = self._pair(rng.uniform(1.0, 3.0, (6, 6)))
        pred = self._pair(gt.astype64() + rng.uniform(0.05, 0.5, (6, 6)))
        r = np.abs(pred.astype64() - gt.astype64())
        at_r = recon_error(pred, gt, DenseImage.from_array(r, "uncertainty"))
        for factor in (0.6, 0.85, 1.2, 1.7):
            other = recon_error(
                pred, gt, DenseImage.from_array(factor * r, "uncertainty")
            )
            assert other > at_r

    def test_invalid_gt_pixels_ignored(self):
        gt_vals = np.full((3, 3), 2.0)
        gt_vals[0, 0] = 0.0
        gt = self._pair(gt_vals)
        pred_vals = np.full((3, 3), 2.0)
        pred_vals[0, 0] = 17.0  # must not contribute
        pred = self._pair(pred_vals)
        b = DenseImage.full(3, 3, 1.0, "uncertainty")
        assert recon_error(pred, gt, b) == pytest.approx(0.0, abs=1e-12)

    def test_nonpositive_uncertainty_rejected(self):
        gt = self._pair(np.full((2, 2), 1.0))
        bad = DenseImage.from_array(np.zeros((2, 2)), "uncertainty")
        with pytest.raises(ValueError):
            recon_error(gt, gt, bad)

    def test_size_mismatch_rejected(self):
        gt = self._pair(np.full((2, 2), 1.0))
        wide = self._pair(np.full((2, 3), 1.0))
        b = DenseImage.full(2, 2, 1.0, "uncertainty")
        with pytest.raises(ValueError):
            recon_error(wide, gt, b)


# ── Learned decoder replay ───────────────────────────────────────────────

H, W, CODE = 12, 16, 8


def _zero_weight_bundle() -> WeightBundle:
    """Smallest legal graph with both output heads.

    dense_map lifts the code to a (1, H, W) plane, a 1x1 conv reads the
    conditioning, the two are concatenated and two 1x1 conv heads feed
    sigmoid (proximity) and softplus (uncertainty). All weights zero, so
    proximity is exactly 0.5 and the Jacobian vanishes.
    """
    z = lambda *shape: np.zeros(shape, np.float32)
    layers = [
        LayerSpec("cond", "input_cond", (), {}, []),
        LayerSpec("code", "input_code", (), {}, []),
        LayerSpec(
            "lift",
            "dense_map",
            (1,),
            {"channels": 1.0, "height": float(H), "width": float(W)},
            [z(H * W, CODE), z(H * W)],
        ),
        LayerSpec("feat", "conv", (0,), {}, [z(1, 3, 1, 1), z(1)]),
        LayerSpec("cat", "concat", (2, 3), {}, []),
        LayerSpec("head_p", "conv", (4,), {}, [z(1, 2, 1, 1), z(1)]),
        LayerSpec("prox", "sigmoid", (5,), {}, []),
        LayerSpec("head_u", "conv", (4,), {}, [z(1, 2, 1, 1), z(1)]),
        LayerSpec("unc", "softplus", (7,), {}, []),
    ]
    return WeightBundle(
        code_size=CODE,
        height=H,
        width=W,
        cond_channels=3,
        prox_scale=2.0,
        rep_scale=1.0,
        output_prox=6,
        output_unc=8,
        layers=layers,
    )


def _toy_cond() -> ConditioningSet:
    rng = np.random.default_rng(9)
    sparse = np.zeros((H, W), np.float32)
    for u, v, d in ((3, 2, 1.5), (10, 5, 2.0), (14, 9, 3.0), (6, 10, 2.5)):
        sparse[v, u] = d
    return ConditioningSet(
        DenseImage.from_array(rng.uniform(0.2, 0.8, (H, W)), "intensity"),
        DenseImage.from_array(sparse, "depth"),
        DenseImage.from_array(np.where(sparse > 0, 0.7, 0.0).astype(np.float32), "rep_error"),
    )


class TestLearnedDecoder:
    def test_zero_weights_give_constant_half_proximity(self):
        template = load_learned_decoder(weights_to_bytes(_zero_weight_bundle()))
        dec = template.condition(_toy_cond())
        out = dec.decode(DepthCode.zeros(CODE))
        np.testing.assert_allclose(out.proximity.astype64(), 0.5, atol=1e-7)
        # p = a / (a + d) = 0.5 at d = a = 2
        np.testing.assert_allclose(out.dense_depth(), 2.0, atol=1e-5)
        np.testing.assert_allclose(
            out.uncertainty.astype64(), np.log(2.0), atol=1e-6
        )

    def test_zero_weights_give_zero_jacobian(self):
        template = load_learned_decoder(weights_to_bytes(_zero_weight_bundle()))
        dec = template.condition(_toy_cond())
        assert np.max(np.abs(dec.jacobian)) == 0.0
        rng = np.random.default_rng(2)
        out0 = dec.decode(DepthCode.zeros(CODE))
        out1 = dec.decode(DepthCode(rng.normal(size=CODE)))
        np.testing.assert_array_equal(out0.proximity.values, out1.proximity.values)

    def test_linearization_matches_graph_for_small_codes(self):
        """With a nonzero dense_map the graph is still affine-through-
        sigmoid; at small code norm the linearized decoder must track the
        true forward pass to first order."""
        bundle = _zero_weight_bundle()
        layers = list(bundle.layers)
        rng = np.random.default_rng(5)
        lift = layers[2]
        layers[2] = LayerSpec(
            lift.name,
            lift.kind,
            lift.inputs,
            lift.attrs,
            [rng.normal(0, 0.05, (H * W, CODE)).astype(np.float32), np.zeros(H * W, np.float32)],
        )
        head = layers[5]
        layers[5] = LayerSpec(
            head.name, head.kind, head.inputs,
            head.attrs, [np.array([[[[1.0]]], [[[0.0]]]], np.float32).reshape(1, 2, 1, 1), np.zeros(1, np.float32)],
        )
        import dataclasses

        bundle = dataclasses.replace(bundle, layers=layers)
        template = LearnedDecoderTemplate(bundle)
        dec = template.condition(_toy_cond())
        code = DepthCode(rng.normal(0, 1e-3, CODE))
        lin = dec.decode(code).proximity.astype64()
        x = template.conditioning_tensor(_toy_cond())
        truth = template.graph.run(x, code.values.astype(np.float32))[
            bundle.output_prox
        ][0]
        np.testing.assert_allclose(lin, truth, atol=1e-6)

    def test_truncated_stream_fails_without_partial_decoder(self):
        raw = weights_to_bytes(_zero_weight_bundle())
        with pytest.raises(FormatError):
            load_learned_decoder(raw[: len(raw) - 9])

    def test_conditioning_size_must_match_weights(self):
        template = load_learned_decoder(weights_to_bytes(_zero_weight_bundle()))
        small = ConditioningSet(
            DenseImage.full(4, 3, 0.5, "intensity"),
            DenseImage.from_array(
                np.array([[0, 2.0, 0, 2.1], [0, 0, 2.2, 0], [2.3, 0, 0, 0]], np.float32),
                "depth",
            ),
            DenseImage.from_array(
                np.array([[0, 0.5, 0, 0.5], [0, 0, 0.5, 0], [0.5, 0, 0, 0]], np.float32),
                "rep_error",
            ),
        )
        with pytest.raises(ValueError):
            template.condition(small)

    def test_decode_dispatch_checks_code_size(self):
        template = load_learned_decoder(weights_to_bytes(_zero_weight_bundle()))
        cond = _toy_cond()
        out = decode(DepthCode.zeros(CODE), cond, template)
        assert out.proximity.values.shape == (H, W)
        with pytest.raises(ValueError):
            decode(DepthCode.zeros(CODE + 1), cond, template)
