import numpy as np
import pytest

from fbquant.errors import NumericError, ShapeError
from fbquant.fbcore import (
    LayerRecord,
    OptimizerSettings,
    SubBranch,
    _layer_rng,
    baseline_subbranch,
    fb_reconstruct,
    grad_ab,
    grad_sigma,
    grad_sigma_ste,
    gradient_check,
    optimize_layer,
    quantize_model,
    reconstruction_loss,
)
from fbquant.linalg import frobenius_sq, gram, gram_null_basis
from fbquant.quantizer import QuantConfig, dequantize, quantize_rtn


def _expand_half(q, cols):
    return np.repeat(q.scales / 2.0, q.config.group_size, axis=1)[:, :cols]


def on_grid_weights(rng, rows, cols):
    """Integer-valued weights whose rows span [0, 255]: with 8-bit single-group
    quantization the scale is exactly 1.0 and zero-point 0, so the grid is the
    integers and quantization is exact."""
    w = rng.integers(0, 256, size=(rows, cols)).astype(np.float64)
    w[:, 0] = 0.0
    w[:, -1] = 255.0
    return w


GRID_CFG = QuantConfig(bits=8, group_size=512)


class TestFbReconstruct:
    def test_zero_subbranch_is_plain_rtn(self, rng):
        w = rng.standard_normal((8, 24))
        cfg = QuantConfig(bits=3, group_size=8)
        sub = SubBranch.initialize(8, 24, 4, 0.01, rng)  # b == 0, dense form == 0
        w_f, q = fb_reconstruct(w, sub, cfg)
        assert np.array_equal(w_f, dequantize(quantize_rtn(w, cfg)))

    def test_on_grid_residual_reconstructs_exactly(self, rng):
        w_grid = on_grid_weights(rng, 6, 32)
        sigma = rng.integers(-16, 16, size=(6, 32)) / 2.0  # exact halves
        w = w_grid + sigma
        w_f, q = fb_reconstruct(w, sigma, GRID_CFG)
        assert np.array_equal(w_f, w)
        assert np.abs(w - w_f).max() == 0.0

    def test_bound_many_draws(self, rng):
        for _ in range(200):
            bits = int(rng.choice([2, 3, 4, 8]))
            group = int(rng.choice([8, 32, 128]))
            rows = int(rng.integers(1, 7))
            cols = int(rng.integers(1, 3 * group + 2))
            w = rng.standard_normal((rows, cols)) * rng.uniform(0.05, 5.0)
            sigma = rng.standard_normal((rows, cols)) * rng.uniform(0.0, 3.0)
            w_f, q = fb_reconstruct(w, sigma, QuantConfig(bits=bits, group_size=group))
            assert (np.abs(w - w_f) <= _expand_half(q, cols)).all()

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            fb_reconstruct(np.zeros((3, 4)), np.zeros((4, 3)), QuantConfig(bits=4, group_size=4))


class TestReconstructionLoss:
    def test_zero_for_equal_weights(self, rng):
        w = rng.standard_normal((5, 7))
        assert reconstruction_loss(w, w, rng.standard_normal((3, 7))) == 0.0

    def test_identity_inputs_give_frobenius(self, rng):
        w = rng.standard_normal((5, 7))
        w_f = w + rng.standard_normal((5, 7)) * 0.1
        loss = reconstruction_loss(w, w_f, np.eye(7))
        assert loss == pytest.approx(frobenius_sq(w - w_f), rel=1e-12)

    def test_trace_form_equals_direct_product(self, rng):
        w = rng.standard_normal((4, 4))
        w_f = w + rng.standard_normal((4, 4)) * 0.3
        x = rng.standard_normal((4, 4))
        direct = frobenius_sq((w - w_f) @ x.T)
        assert reconstruction_loss(w, w_f, x) == pytest.approx(direct, rel=1e-10)


class TestGradients:
    def test_zero_delta(self):
        assert np.array_equal(grad_sigma(np.zeros((3, 4)), np.eye(4)), np.zeros((3, 4)))

    def test_scalar_hand_case(self):
        g = gram(np.array([[2.0]]))
        assert np.array_equal(g, [[4.0]])
        assert grad_sigma(np.array([[0.1]]), g)[0, 0] == pytest.approx(-0.8)

    def test_grad_ab_zero_b_kills_grad_a(self, rng):
        sub = SubBranch.initialize(5, 8, 3, 0.02, rng)
        ga, gb = grad_ab(rng.standard_normal((5, 8)), sub)
        assert np.array_equal(ga, np.zeros((3, 8)))
        assert np.abs(gb).max() > 0

    def test_grad_ab_zero_upstream(self, rng):
        sub = SubBranch(rng.standard_normal((3, 8)), rng.standard_normal((5, 3)))
        ga, gb = grad_ab(np.zeros((5, 8)), sub)
        assert np.array_equal(ga, np.zeros((3, 8)))
        assert np.array_equal(gb, np.zeros((5, 3)))

    def test_finite_difference_agreement(self):
        result = gradient_check(seed=11, instances=10, max_dim=16, rank=4)
        assert result["overall"] < 1e-6

    def test_explicit_entrywise_fd(self, rng):
        # Independent oracle: per-entry central differences of the frozen loss.
        w = rng.standard_normal((5, 6))
        x = rng.standard_normal((4, 6))
        sigma = rng.standard_normal((5, 6)) * 0.2
        g = gram(x)
        cfg = QuantConfig(bits=4, group_size=6)
        frozen = dequantize(quantize_rtn(w - sigma, cfg))
        analytic = grad_sigma(w - frozen - sigma, g)
        h = 1e-5
        fd = np.zeros_like(sigma)
        for i in range(5):
            for j in range(6):
                up, dn = sigma.copy(), sigma.copy()
                up[i, j] += h
                dn[i, j] -= h
                loss_up = frobenius_sq((w - frozen - up) @ x.T)
                loss_dn = frobenius_sq((w - frozen - dn) @ x.T)
                fd[i, j] = (loss_up - loss_dn) / (2 * h)
        assert np.abs(fd - analytic).max() <= 1e-6 * max(1.0, np.abs(analytic).max())

    def test_ste_chain_rule_is_exact_zero(self, rng):
        delta = rng.standard_normal((7, 9))
        g = gram(rng.standard_normal((5, 9)))
        out = grad_sigma_ste(delta, g)
        assert out.shape == (7, 9)
        assert np.all(out == 0.0)


class TestOptimizeLayer:
    def test_on_grid_weights_exit_immediately(self, rng):
        layer = LayerRecord("grid", on_grid_weights(rng, 6, 32), rng.standard_normal((4, 32)))
        sub, report = optimize_layer(layer, GRID_CFG, OptimizerSettings(rank=4, seed=3))
        assert report.loss_per_epoch == [0.0]
        assert report.final_loss == 0.0
        assert np.array_equal(sub.dense(), np.zeros((6, 32)))

    def test_all_zero_weights(self, rng):
        layer = LayerRecord("zero", np.zeros((4, 16)), rng.standard_normal((3, 16)))
        sub, report = optimize_layer(layer, QuantConfig(bits=4, group_size=16), OptimizerSettings(rank=2))
        assert report.loss_per_epoch == [0.0]

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_backtracking_improves(self, seed):
        g = np.random.default_rng(seed)
        layer = LayerRecord("l", g.standard_normal((64, 64)), g.standard_normal((32, 64)))
        settings = OptimizerSettings(
            epochs=20, learning_rate=1e-2, rank=8, seed=seed, step_rule="backtracking"
        )
        sub, report = optimize_layer(layer, QuantConfig(bits=3, group_size=128), settings)
        curve = report.loss_per_epoch
        assert len(curve) == 21
        assert report.initial_rtn_loss == curve[0]
        assert report.final_loss < report.initial_rtn_loss
        assert all(a >= b for a, b in zip(curve, curve[1:]))
        assert report.bound_violations == 0
        assert report.max_weight_deviation <= report.bound_s_half

    def test_deterministic_given_seed(self, rng):
        layer = LayerRecord("l", rng.standard_normal((16, 16)), rng.standard_normal((8, 16)))
        settings = OptimizerSettings(epochs=5, learning_rate=1e-2, rank=3, seed=9)
        sub1, rep1 = optimize_layer(layer, QuantConfig(bits=4, group_size=16), settings)
        sub2, rep2 = optimize_layer(layer, QuantConfig(bits=4, group_size=16), settings)
        assert np.array_equal(sub1.a, sub2.a) and np.array_equal(sub1.b, sub2.b)
        assert rep1.loss_per_epoch == rep2.loss_per_epoch

    def test_numeric_error_names_epoch(self, rng):
        layer = LayerRecord("l", rng.standard_normal((8, 8)), rng.standard_normal((8, 8)))
        settings = OptimizerSettings(epochs=3, learning_rate=1e160, rank=2, step_rule="fixed")
        with pytest.raises(NumericError) as info:
            optimize_layer(layer, QuantConfig(bits=4, group_size=8), settings)
        assert info.value.epoch is not None

    def test_rank_zero_equals_rtn(self, rng):
        layer = LayerRecord("l", rng.standard_normal((8, 16)), rng.standard_normal((4, 16)))
        cfg = QuantConfig(bits=3, group_size=16)
        sub, report = optimize_layer(layer, cfg, OptimizerSettings(rank=0))
        assert len(report.loss_per_epoch) == 1
        assert report.initial_rtn_loss == pytest.approx(
            reconstruction_loss(layer.w, dequantize(quantize_rtn(layer.w, cfg)), layer.x)
        )


class TestNullSpaceInvariance:
    def test_conventional_loss_unchanged_feedback_bound_intact(self, rng):
        # Rank-deficient calibration: perturbing the sub-branch inside the
        # Gram null space leaves the conventional objective unchanged, while
        # the feedback deviation stays bounded for the perturbed weights too.
        w = rng.standard_normal((12, 24))
        x = rng.standard_normal((6, 24))
        cfg = QuantConfig(bits=4, group_size=24)
        g = gram(x)
        basis = gram_null_basis(x)
        assert basis.shape[0] == 18
        w_q = dequantize(quantize_rtn(w, cfg))
        delta = w - w_q
        sigma = rng.standard_normal((12, 24)) * 0.1
        bump = (rng.standard_normal((12, basis.shape[0])) * 5.0) @ basis
        loss_a = float((((delta - sigma) @ g) * (delta - sigma)).sum())
        perturbed = sigma + bump
        loss_b = float((((delta - perturbed) @ g) * (delta - perturbed)).sum())
        assert abs(loss_a - loss_b) <= 1e-8 * abs(loss_a)
        w_f, q = fb_reconstruct(w, perturbed, cfg)
        assert (np.abs(w - w_f) <= _expand_half(q, 24)).all()


class TestBaselines:
    def test_svd_of_delta_recovers_low_rank_error(self, rng):
        w_grid = on_grid_weights(rng, 8, 32)
        lo = rng.standard_normal((8, 2)) * 0.1
        hi = rng.standard_normal((2, 32))
        delta = lo @ hi
        delta[:, 0] = 0.0   # keep the group min/max entries on-grid
        delta[:, -1] = 0.0
        delta = np.clip(delta, -0.45, 0.45)
        layer = LayerRecord("l", w_grid + delta, rng.standard_normal((16, 32)))
        sub, report = baseline_subbranch(layer, GRID_CFG, rank=4, method="svd_of_delta")
        assert report.max_weight_deviation <= 1e-9
        assert report.final_loss <= 1e-12 * max(report.initial_rtn_loss, 1.0)

    def test_rank_zero_is_plain_rtn(self, rng):
        layer = LayerRecord("l", rng.standard_normal((8, 16)), rng.standard_normal((4, 16)))
        cfg = QuantConfig(bits=3, group_size=16)
        sub, report = baseline_subbranch(layer, cfg, rank=0, method="svd_of_delta")
        assert len(report.loss_per_epoch) == 1
        assert np.array_equal(sub.dense(), np.zeros((8, 16)))

    def test_direct_gd_improves_calibration_loss(self, rng):
        layer = LayerRecord("l", rng.standard_normal((32, 32)), rng.standard_normal((8, 32)))
        settings = OptimizerSettings(epochs=15, learning_rate=1e-2, rank=4, seed=2, step_rule="backtracking")
        sub, report = baseline_subbranch(layer, QuantConfig(bits=3, group_size=32), 4, "direct_gd", settings)
        assert report.final_loss < report.initial_rtn_loss
        assert all(a >= b for a, b in zip(report.loss_per_epoch, report.loss_per_epoch[1:]))

    def test_unknown_method_rejected(self, rng):
        layer = LayerRecord("l", rng.standard_normal((4, 8)), rng.standard_normal((2, 8)))
        with pytest.raises(ValueError):
            baseline_subbranch(layer, QuantConfig(bits=4, group_size=8), 2, "nope")


class TestQuantizeModel:
    def test_single_layer_matches_direct_call(self, block_layers):
        cfg = QuantConfig(bits=4, group_size=32)
        settings = OptimizerSettings(epochs=4, learning_rate=1e-2, rank=4, seed=5, step_rule="backtracking")
        results = quantize_model(block_layers[:1], cfg, settings, "fbquant")
        sub, report = optimize_layer(block_layers[0], cfg, settings, rng=_layer_rng(5, block_layers[0].name))
        assert np.array_equal(results[0].sub.a, sub.a)
        assert np.array_equal(results[0].sub.b, sub.b)
        assert results[0].report.loss_per_epoch == report.loss_per_epoch

    def test_permutation_equivariance(self, block_layers):
        cfg = QuantConfig(bits=4, group_size=32)
        settings = OptimizerSettings(epochs=3, learning_rate=1e-2, rank=4, seed=5, step_rule="backtracking")
        fwd = quantize_model(block_layers, cfg, settings, "fbquant")
        rev = quantize_model(block_layers[::-1], cfg, settings, "fbquant")
        for res_f, res_r in zip(fwd, rev[::-1]):
            assert res_f.report.layer == res_r.report.layer
            assert np.array_equal(res_f.sub.a, res_r.sub.a)
            assert np.array_equal(res_f.sub.b, res_r.sub.b)
            assert np.array_equal(res_f.q.codes, res_r.q.codes)

    def test_rtn_method(self, block_layers):
        cfg = QuantConfig(bits=4, group_size=32)
        results = quantize_model(block_layers, cfg, OptimizerSettings(rank=0), "rtn")
        for layer, res in zip(block_layers, results):
            assert len(res.report.loss_per_epoch) == 1
            assert res.sub.rank == 0
            assert np.array_equal(res.q.codes, quantize_rtn(layer.w, cfg).codes)

    def test_empty_layer_list_rejected(self):
        with pytest.raises(ValueError):
            quantize_model([], QuantConfig(bits=4), OptimizerSettings(), "rtn")

    def test_error_names_layer(self, rng):
        layer = LayerRecord("bad_layer", rng.standard_normal((8, 8)), rng.standard_normal((4, 8)))
        settings = OptimizerSettings(epochs=2, learning_rate=1e160, rank=2, step_rule="fixed")
        with pytest.raises(NumericError, match="bad_layer"):
            quantize_model([layer], QuantConfig(bits=4, group_size=8), settings, "fbquant")
