"""Tensor kernel tests: forward vs naive oracles, gradients, Adam."""

import numpy as np
import pytest

from superspectral import tensorcore as tc
from superspectral.errors import NonFiniteGradientError, ShapeError

import gradsuite
from oracles import conv1d_naive, conv2d_naive, numeric_grad, rel_error, tconv1d_naive


class TestForwardAgainstNaive:
    def test_conv1d_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        for k, s, p, cin, cout, length in [(3, 1, 0, 2, 3, 8), (3, 2, 1, 3, 2, 9),
                                           (1, 1, 0, 4, 4, 5), (5, 1, 2, 1, 2, 12)]:
            layer = tc.LayerSpec("conv1d", k, s, cin, cout, p)
            x = rng.uniform(-2, 2, size=(2, cin, length)).astype(np.float32)
            w = rng.uniform(-1, 1, size=layer.weight_shape()).astype(np.float32)
            b = rng.uniform(-1, 1, size=cout).astype(np.float32)
            y, _ = tc.forward(layer, x, (w, b))
            ref = conv1d_naive(x, w, b, s, p)
            assert y.shape == ref.shape
            np.testing.assert_allclose(y, ref, rtol=1e-5, atol=1e-5)

    def test_tconv1d_matches_scatter_reference(self):
        rng = np.random.default_rng(1)
        for k, s, p, crop, cin, cout, length in [
            (3, 2, 0, (0, 0), 1, 2, 4),
            (3, 2, 0, (0, 1), 1, 32, 3),   # 3 -> 6, the first upscale stage
            (3, 2, 0, (0, 1), 32, 32, 6),  # 6 -> 12
            (3, 1, 0, (1, 1), 32, 1, 24),  # 24 -> 24 refinement stage
            (4, 2, 1, (0, 0), 2, 3, 5),
            (3, 3, 2, (1, 0), 1, 1, 4),
        ]:
            layer = tc.LayerSpec("tconv1d", k, s, cin, cout, p, crop=crop)
            x = rng.uniform(-2, 2, size=(2, cin, length)).astype(np.float32)
            w = rng.uniform(-1, 1, size=layer.weight_shape()).astype(np.float32)
            b = rng.uniform(-1, 1, size=cout).astype(np.float32)
            y, _ = tc.forward(layer, x, (w, b))
            ref = tconv1d_naive(x, w, b, s, p, crop)
            assert y.shape == ref.shape
            assert y.shape[2] == layer.out_length(length)
            np.testing.assert_allclose(y, ref, rtol=1e-4, atol=1e-4)

    def test_conv2d_matches_loop_reference(self):
        rng = np.random.default_rng(2)
        for k, s, p, cin, cout, h, w_ in [(3, 1, 0, 2, 3, 6, 7), (5, 1, 2, 3, 2, 8, 8),
                                          (3, 2, 1, 2, 2, 7, 7)]:
            layer = tc.LayerSpec("conv2d", k, s, cin, cout, p)
            x = rng.uniform(-2, 2, size=(2, cin, h, w_)).astype(np.float32)
            w = rng.uniform(-1, 1, size=layer.weight_shape()).astype(np.float32)
            b = rng.uniform(-1, 1, size=cout).astype(np.float32)
            y, _ = tc.forward(layer, x, (w, b))
            ref = conv2d_naive(x, w, b, s, p)
            assert y.shape == ref.shape
            np.testing.assert_allclose(y, ref, rtol=1e-5, atol=1e-5)

    def test_out_length_formula_matches_reference_shapes(self):
        rng = np.random.default_rng(3)
        for k in (1, 2, 3, 4):
            for s in (1, 2, 3):
                for p in range(k):
                    for length in (4, 5, 7):
                        x = rng.normal(size=(1, 1, length)).astype(np.float32)
                        w1 = rng.normal(size=(1, 1, k)).astype(np.float32)
                        if length + 2 * p >= k:
                            conv = tc.LayerSpec("conv1d", k, s, 1, 1, p, has_bias=False)
                            ref = conv1d_naive(x, w1, None, s, p)
                            assert conv.out_length(length) == ref.shape[2]
                        tconv = tc.LayerSpec("tconv1d", k, s, 1, 1, p, has_bias=False)
                        ref = tconv1d_naive(x, w1, None, s, p, (0, 0))
                        assert tconv.out_length(length) == ref.shape[2]

    def test_upscale_chain_3_to_24(self):
        # 3 channels of an RGB pixel treated as a length-3 spectral signal,
        # doubled three times with crops absorbing the odd samples.
        specs = [
            tc.LayerSpec("tconv1d", 3, 2, 1, 8, 0, crop=(0, 1)),
            tc.LayerSpec("tconv1d", 3, 2, 8, 8, 0, crop=(0, 1)),
            tc.LayerSpec("tconv1d", 3, 2, 8, 8, 0, crop=(0, 1)),
            tc.LayerSpec("tconv1d", 3, 1, 8, 1, 0, crop=(1, 1)),
        ]
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 1, size=(5, 1, 3)).astype(np.float32)
        lengths = [3]
        for spec in specs:
            w = rng.normal(size=spec.weight_shape()).astype(np.float32) * 0.1
            b = np.zeros(spec.out_channels, dtype=np.float32)
            x, _ = tc.forward(spec, x, (w, b))
            lengths.append(x.shape[2])
        assert lengths == [3, 6, 12, 24, 24]


class TestGradients:
    @pytest.mark.parametrize("case", gradsuite.build_cases(), ids=lambda c: c.name)
    def test_analytic_matches_finite_differences(self, case):
        errors = gradsuite.run_case(case)
        for tensor, err in errors.items():
            assert err < 1e-3, f"{case.name}/{tensor}: rel error {err:.2e}"

    def test_suite_covers_every_kind(self):
        kinds = {c.layer.kind for c in gradsuite.build_cases()}
        assert kinds == set(tc.LAYER_KINDS)
        assert len(gradsuite.build_cases()) >= 20


class TestLoss:
    def test_value_and_gradient(self):
        rng = np.random.default_rng(5)
        pred = rng.uniform(-3, 3, size=(4, 6)).astype(np.float32)
        target = rng.uniform(-3, 3, size=(4, 6)).astype(np.float32)
        loss, grad = tc.l2_loss(pred, target)
        expected = np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2)
        assert loss == pytest.approx(expected, rel=1e-6)

        def fn(p):
            return tc.l2_loss(p, target)[0]

        num = numeric_grad(fn, pred, eps=1e-2)
        assert rel_error(grad, num) < 1e-3

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            tc.l2_loss(np.zeros((2, 3), np.float32), np.zeros((3, 2), np.float32))


class TestShapeValidation:
    def test_wrong_channel_count(self):
        layer = tc.LayerSpec("conv1d", 3, 1, 2, 3, 0)
        w = np.zeros(layer.weight_shape(), np.float32)
        b = np.zeros(3, np.float32)
        with pytest.raises(ShapeError):
            tc.forward(layer, np.zeros((1, 4, 8), np.float32), (w, b))

    def test_tconv_padding_bound(self):
        with pytest.raises(ShapeError):
            tc.LayerSpec("tconv1d", 3, 2, 1, 1, 3)

    def test_crop_cannot_consume_output(self):
        layer = tc.LayerSpec("tconv1d", 3, 1, 1, 1, 0, crop=(2, 2))
        w = np.zeros(layer.weight_shape(), np.float32)
        with pytest.raises(ShapeError):
            tc.forward(layer, np.zeros((1, 1, 2), np.float32), (w, None))

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            tc.LayerSpec("pool")

    def test_stale_cache_rejected(self):
        layer_a = tc.LayerSpec("relu")
        layer_b = tc.LayerSpec("conv1d", 3, 1, 1, 1, 0)
        y, cache = tc.forward(layer_a, np.ones((1, 1, 4), np.float32))
        with pytest.raises(ShapeError):
            tc.backward(layer_b, y, cache)

    def test_grad_shape_must_match_forward_output(self):
        layer = tc.LayerSpec("relu")
        y, cache = tc.forward(layer, np.ones((1, 2, 4), np.float32))
        with pytest.raises(ShapeError):
            tc.backward(layer, np.ones((1, 2, 5), np.float32), cache)

    def test_binary_kinds_need_pairs(self):
        with pytest.raises(ShapeError):
            tc.forward(tc.LayerSpec("concat"), np.ones((1, 2, 3), np.float32))
        with pytest.raises(ShapeError):
            tc.forward(tc.LayerSpec("residual-add"),
                       (np.ones((1, 2, 3), np.float32), np.ones((1, 2, 4), np.float32)))


class TestAdam:
    def _quadratic_setup(self):
        rng = np.random.default_rng(6)
        target = {"a": rng.normal(size=(3, 2)).astype(np.float32),
                  "b": rng.normal(size=(4,)).astype(np.float32)}
        values = {k: np.zeros_like(v) for k, v in target.items()}
        return values, target

    def test_converges_on_quadratic(self):
        values, target = self._quadratic_setup()
        state = tc.init_adam(values, lr=0.05)
        for _ in range(400):
            grads = {k: 2.0 * (values[k] - target[k]) for k in values}
            values, state = tc.adam_step(values, grads, state)
        for k in values:
            np.testing.assert_allclose(values[k], target[k], atol=1e-3)
        assert state.step == 400

    def test_frozen_entries_are_bit_identical(self):
        values, target = self._quadratic_setup()
        state = tc.init_adam(values, lr=0.05)
        before = values["a"].tobytes()
        for _ in range(25):
            grads = {k: 2.0 * (values[k] - target[k]) for k in values}
            values, state = tc.adam_step(values, grads, state, frozen={"a"})
        assert values["a"].tobytes() == before
        assert state.m["a"].tobytes() == np.zeros_like(values["a"]).tobytes()
        assert values["b"].tobytes() != np.zeros_like(values["b"]).tobytes()

    def test_nonfinite_gradient_rejects_whole_step(self):
        values, _ = self._quadratic_setup()
        state = tc.init_adam(values)
        snapshot = {k: v.copy() for k, v in values.items()}
        grads = {"a": np.full((3, 2), np.nan, np.float32), "b": np.ones(4, np.float32)}
        with pytest.raises(NonFiniteGradientError):
            tc.adam_step(values, grads, state)
        for k in values:
            assert values[k].tobytes() == snapshot[k].tobytes()
        assert state.step == 0

    def test_missing_or_misshapen_gradient(self):
        values, _ = self._quadratic_setup()
        state = tc.init_adam(values)
        with pytest.raises(ShapeError):
            tc.adam_step(values, {"a": np.zeros((3, 2), np.float32)}, state)
        with pytest.raises(ShapeError):
            tc.adam_step(values, {"a": np.zeros((2, 3), np.float32),
                                  "b": np.zeros(4, np.float32)}, state)
