import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import numeric_grad, rel_err
from orco.errors import (
    InvalidArgumentError,
    InvalidStateError,
    NumericalFailureError,
    ParseError,
    ScheduleExhaustedError,
)
from orco.losses import FeatureBatch, scl_loss
from orco.model import (
    HEAD_ONLY,
    CosineWarmup,
    FreezePlan,
    Layer,
    OptimizerState,
    ProjectionModel,
    backward,
    forward,
    input_gradient,
    load_model,
    optimizer_step,
    save_model,
)


def _toy(seed=0, d=4):
    return ProjectionModel.initialize(input_dim=d, encoder_dims=(d,), hidden_dim=d, output_dim=d, seed=seed)


def _weighted_sum_loss(model, x, w):
    out, _ = forward(model, x)
    return float(np.sum(out * w))


class TestForward:
    def test_identity_layers_pass_input_through(self, rng):
        eye = lambda: Layer(np.eye(4), np.zeros(4), "identity")
        model = ProjectionModel([eye()], [eye(), eye()])
        x = rng.standard_normal((5, 4))
        out, _ = forward(model, x)
        assert np.allclose(out, x / np.linalg.norm(x, axis=1, keepdims=True), atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_unit_norm(self, seed):
        rng = np.random.default_rng(seed)
        model = ProjectionModel.initialize(input_dim=6, encoder_dims=(16, 16), hidden_dim=32, output_dim=3, seed=seed)
        out, _ = forward(model, rng.standard_normal((8, 6)))
        assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1.0) <= 1e-9)

    def test_dead_units_raise_instead_of_zero_rows(self):
        model = _toy()
        for layer in model.head_layers[:1]:
            layer.bias = -100.0 * np.ones_like(layer.bias)
        with pytest.raises(NumericalFailureError, match="rows"):
            forward(model, np.ones((2, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            forward(_toy(), np.zeros((2, 5)))

    def test_head_must_have_two_layers(self):
        with pytest.raises(InvalidArgumentError):
            ProjectionModel([], [Layer(np.eye(2), np.zeros(2))])

    def test_shapes_must_chain(self):
        with pytest.raises(InvalidArgumentError):
            ProjectionModel([Layer(np.zeros((3, 4)), np.zeros(4))],
                            [Layer(np.zeros((5, 2)), np.zeros(2)), Layer(np.zeros((2, 2)), np.zeros(2))])

    @pytest.mark.parametrize("seed", range(5))
    def test_jacobian(self, seed):
        rng = np.random.default_rng(seed)
        model = _toy(seed)
        for layer in model.layers:
            layer.bias = 0.1 * rng.standard_normal(layer.bias.shape)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        _, cache = forward(model, x)
        analytic = input_gradient(model, cache, w)
        num = numeric_grad(lambda z: _weighted_sum_loss(model, z, w), x)
        assert rel_err(analytic, num) < 1e-4


class TestBackward:
    @pytest.mark.parametrize("seed", range(5))
    def test_all_parameters_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = _toy(seed)
        for layer in model.layers:
            layer.bias = 0.1 * rng.standard_normal(layer.bias.shape)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        _, cache = forward(model, x)
        grads = backward(model, cache, w)
        params = model.parameters()
        for k, p in enumerate(params):
            def f(value, k=k):
                trial = [q.copy() for q in params]
                trial[k] = value
                m = model.copy()
                m.set_parameters(trial)
                return _weighted_sum_loss(m, x, w)
            assert rel_err(grads[k], numeric_grad(f, p)) < 1e-4

    def test_frozen_encoder_gets_zero(self, rng):
        model = _toy()
        x = rng.standard_normal((4, 4))
        out, cache = forward(model, x, HEAD_ONLY)
        grads = backward(model, cache, np.ones_like(out), HEAD_ONLY)
        assert all(np.all(g == 0) for g in grads[:2])
        assert any(np.any(g != 0) for g in grads[2:])

    def test_both_frozen_rejected(self):
        with pytest.raises(InvalidArgumentError):
            FreezePlan(True, True)

    def test_stale_cache(self, rng):
        model = _toy()
        out, cache = forward(model, rng.standard_normal((2, 4)))
        model.set_parameters(model.parameters())
        with pytest.raises(InvalidStateError):
            backward(model, cache, out)
        other = _toy()
        with pytest.raises(InvalidStateError):
            backward(other, cache, out)

    def test_normalisation_gradient_is_tangent(self, rng):
        eye = lambda: Layer(np.eye(4), np.zeros(4), "identity")
        model = ProjectionModel([eye()], [eye(), eye()])
        x = rng.standard_normal((3, 4))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        _, cache = forward(model, x)
        g = input_gradient(model, cache, rng.standard_normal((3, 4)))
        assert np.all(np.abs(np.sum(g * x, axis=1)) < 1e-9)


def _opt(kind="sgd", lr=0.1, momentum=0.9, total=10, warmup=0, **kw):
    return OptimizerState(kind, lr, CosineWarmup(warmup, total), momentum=momentum, **kw)


class TestOptimizer:
    def test_plain_descent_step(self, rng):
        w, g = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        opt = _opt(momentum=0.0, lr=0.3, total=10)
        (w2,), opt = optimizer_step(opt, [w], [g])
        assert np.array_equal(w2, w - opt.lr_at(1) * g)
        assert opt.lr_at(1) == pytest.approx(0.3 * 0.5 * (1 + math.cos(math.pi / 10)))

    def test_schedule_endpoints(self):
        s = CosineWarmup(5, 50)
        assert s.factor(5) == 1.0
        assert abs(s.factor(50)) <= 1e-12
        assert s.factor(1) == pytest.approx(0.2)
        assert all(s.factor(t) >= s.factor(t + 1) for t in range(5, 50))

    def test_for_epochs(self):
        s = CosineWarmup.for_epochs(10, 8, 0.05)
        assert s.total_steps == 80 and s.warmup_steps == 4

    def test_momentum_recurrence(self):
        g = np.array([1.0, -2.0])
        opt = _opt(momentum=0.9, lr=0.1, total=4)
        (w1,), opt = optimizer_step(opt, [np.zeros(2)], [g])
        (w2,), opt = optimizer_step(opt, [w1], [g])
        lr1, lr2 = opt.lr_at(1), opt.lr_at(2)
        # v1 = g, v2 = 0.9 g + g = 1.9 g
        assert np.allclose(w2, -(lr1 * 1.0 + lr2 * 1.9) * g, atol=1e-15)

    def test_exhausted(self):
        opt = _opt(total=1)
        optimizer_step(opt, [np.zeros(1)], [np.ones(1)])
        with pytest.raises(ScheduleExhaustedError):
            optimizer_step(opt, [np.zeros(1)], [np.ones(1)])

    def test_lars_trust_ratio(self):
        w = np.array([3.0, 4.0])
        g = np.array([0.0, 10.0])
        opt = _opt("lars", momentum=0.0, lr=1.0, total=2, trust_coefficient=0.02)
        (w2,), opt = optimizer_step(opt, [w], [g])
        expected = w - opt.lr_at(1) * (0.02 * 5.0 / (10.0 + 1e-9)) * g
        assert np.allclose(w2, expected, atol=1e-15)

    def test_lars_zero_gradient(self):
        opt = _opt("lars", momentum=0.0, total=2)
        (w2,), _ = optimizer_step(opt, [np.ones(3)], [np.zeros(3)])
        assert np.array_equal(w2, np.ones(3))

    def test_frozen_arrays_untouched(self, rng):
        params = [rng.standard_normal(3), rng.standard_normal(3)]
        opt = _opt(total=20)
        out = params
        for _ in range(20):
            out, opt = optimizer_step(opt, out, [np.ones(3), np.ones(3)], trainable=[False, True])
        assert out[0] is params[0]
        assert not np.array_equal(out[1], params[1])

    @pytest.mark.parametrize("bad", [dict(lr=0.0), dict(momentum=1.0)])
    def test_invalid_state(self, bad):
        with pytest.raises(InvalidArgumentError):
            _opt(**bad)


def _train(model, x, y, steps, lr, seed):
    opt = OptimizerState("sgd", lr, CosineWarmup(0, steps + 1), momentum=0.9)
    for _ in range(steps):
        out, cache = forward(model, x)
        grads = backward(model, cache, scl_loss(FeatureBatch(out, y), 0.5).grad_features)
        params, opt = optimizer_step(opt, model.parameters(), grads)
        model.set_parameters(params)
    return model


class TestTraining:
    def test_descent_property(self):
        ok = 0
        for trial in range(100):
            rng = np.random.default_rng(trial)
            model = ProjectionModel.initialize(input_dim=8, encoder_dims=(32,), hidden_dim=32, output_dim=4, seed=trial)
            x = rng.standard_normal((12, 8))
            y = np.repeat(np.arange(4), 3)
            out, cache = forward(model, x)
            before = scl_loss(FeatureBatch(out, y), 0.5)
            grads = backward(model, cache, before.grad_features)
            params, _ = optimizer_step(_opt(lr=1e-3, momentum=0.9, total=2), model.parameters(), grads)
            model.set_parameters(params)
            ok += scl_loss(FeatureBatch(forward(model, x)[0], y), 0.5).value <= before.value
        assert ok >= 95

    def test_deterministic(self, rng):
        x = rng.standard_normal((12, 6))
        y = np.repeat(np.arange(3), 4)
        a = _train(ProjectionModel.initialize(6, (6,), 8, 4, seed=1), x, y, 10, 0.1, 0)
        b = _train(ProjectionModel.initialize(6, (6,), 8, 4, seed=1), x, y, 10, 0.1, 0)
        assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_frozen_encoder_bit_identical(self, rng):
        model = ProjectionModel.initialize(6, (6,), 8, 4, seed=2)
        enc = [p.copy() for p in model.parameters()[:2]]
        x = rng.standard_normal((12, 6))
        y = np.repeat(np.arange(3), 4)
        opt = OptimizerState("sgd", 0.1, CosineWarmup(0, 6), momentum=0.9)
        mask = model.trainable_mask(HEAD_ONLY)
        for _ in range(5):
            out, cache = forward(model, x, HEAD_ONLY)
            grads = backward(model, cache, scl_loss(FeatureBatch(out, y), 0.5).grad_features, HEAD_ONLY)
            params, opt = optimizer_step(opt, model.parameters(), grads, mask)
            model.set_parameters(params)
        assert all(np.array_equal(p, q) for p, q in zip(enc, model.parameters()[:2]))


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path, rng):
        model = ProjectionModel.initialize(5, (7, 3), 6, 4, seed=9)
        model.head_layers[0].bias = rng.standard_normal(6)
        save_model(model, tmp_path / "m.txt")
        assert (tmp_path / "m.txt").read_text().startswith("orco-model v1\n")
        back = load_model(tmp_path / "m.txt")
        assert all(np.array_equal(p, q) for p, q in zip(model.parameters(), back.parameters()))
        assert [l.activation for l in back.layers] == [l.activation for l in model.layers]
        x = rng.standard_normal((3, 5))
        assert np.array_equal(forward(model, x)[0], forward(back, x)[0])

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.txt").write_text("orco-model v2\n")
        with pytest.raises(ParseError):
            load_model(tmp_path / "m.txt")

    def test_truncated(self, tmp_path):
        model = _toy()
        save_model(model, tmp_path / "m.txt")
        lines = (tmp_path / "m.txt").read_text().splitlines()
        (tmp_path / "m.txt").write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(ParseError):
            load_model(tmp_path / "m.txt")
