import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import naive_ce, naive_orth, naive_pscl, naive_scl, naive_sscl, numeric_grad, rel_err
from _instances import random_setup as _random_setup
from _instances import two_view_batch as _two_view_batch
from conftest import unit_rows
from orco.errors import ConfigurationError, EmptyScopeError, InvalidArgumentError, UnassignedClassError
from orco.geometry import (
    Distribution,
    PerturbedTargets,
    TargetSet,
    generate_random_targets,
    target_generation_loss,
)
from orco.losses import (
    CeScope,
    ContrastiveContext,
    FeatureBatch,
    PerturbScope,
    ce_loss,
    info_nce,
    orco_loss,
    orth_loss,
    oversample_perturbations,
    perturbation_scope,
    pretrain_loss,
    pscl_loss,
    scl_loss,
    sscl_loss,
)
from orco.matching import AssignmentState

E = math.e


def _fd_check(loss_fn, batch, tol=1e-4):
    def f(x):
        return loss_fn(batch.with_features(x)).value
    num = numeric_grad(f, batch.features)
    return rel_err(loss_fn(batch).grad_features, num)


class TestScl:
    def test_hand_example(self):
        # two identical same-label rows and one orthogonal other-label row; anchors 0 and 1
        f = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        y = np.array([0, 0, 1])
        pos = np.array([[False, True, False], [True, False, False]])
        den = np.array([[False, True, True], [True, False, True]])
        value, _ = info_nce(f, [0, 1], pos, den, 1.0)
        assert value == pytest.approx(-math.log(E / (E + 1)), abs=1e-12)
        assert value == pytest.approx(0.31326, abs=1e-5)
        with pytest.raises(ConfigurationError, match="label 1"):
            scl_loss(FeatureBatch(f, y), 1.0)

    def test_two_pairs(self):
        f = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        r = scl_loss(FeatureBatch(f, [0, 0, 1, 1]), 1.0)
        assert r.value == pytest.approx(-math.log(E / (E + 2)), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        b, d = int(rng.integers(2, 13)), int(rng.integers(2, 9))
        y = rng.integers(0, 3, b)
        y[1] = y[0]
        y = np.where(np.bincount(y)[y] > 1, y, y[0])  # fold singleton classes into the first one
        batch = FeatureBatch(unit_rows(rng, b, d), y)
        tau = float(rng.uniform(0.1, 1.0))
        assert scl_loss(batch, tau).value == pytest.approx(naive_scl(batch.features, y, tau), abs=1e-10)
        assert _fd_check(lambda bb: scl_loss(bb, tau), batch) < 1e-4

    def test_bad_tau(self):
        with pytest.raises(InvalidArgumentError):
            scl_loss(FeatureBatch(np.eye(2), [0, 0]), 0.0)

    @given(st.integers(0, 2**32 - 1))
    def test_rotation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        f = unit_rows(rng, 6, 4)
        y = np.array([0, 0, 1, 1, 2, 2])
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        a = scl_loss(FeatureBatch(f, y), 0.3).value
        b = scl_loss(FeatureBatch(f @ q, y), 0.3).value
        assert abs(a - b) <= 1e-9


class TestSscl:
    def test_hand_example(self):
        f = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        r = sscl_loss(FeatureBatch(f, [0, 1, 0, 1], [0, 0, 1, 1]), 1.0)
        assert r.value == pytest.approx(-math.log(E / (E + 2)), abs=1e-12)

    def test_limit_case(self):
        x = np.array([1.0, 0.0, 0.0])
        neg = np.array([-1.0, 0.0, 0.0])
        f = np.array([x, neg, x, neg])
        assert float(x @ neg) <= -0.99
        assert sscl_loss(FeatureBatch(f, [0, 1, 0, 1], [0, 0, 1, 1]), 0.1).value < 0.01

    def test_unpaired(self):
        with pytest.raises(InvalidArgumentError):
            sscl_loss(FeatureBatch(np.eye(3), [0, 0, 0], [0, 0, 1]))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_and_reference(self, seed):
        rng = np.random.default_rng(seed)
        batch = _two_view_batch(rng, int(rng.integers(2, 7)), int(rng.integers(2, 9)))
        tau = float(rng.uniform(0.1, 1.0))
        assert sscl_loss(batch, tau).value == pytest.approx(naive_sscl(batch.features, batch.view_ids, tau), abs=1e-10)
        assert _fd_check(lambda bb: sscl_loss(bb, tau), batch) < 1e-4


class TestPretrain:
    def test_mixture(self, rng):
        batch = _two_view_batch(rng, 5, 4)
        scl, sscl = scl_loss(batch, 0.2), sscl_loss(batch, 0.2)
        assert pretrain_loss(batch, 0.0, 0.2).value == scl.value
        assert np.array_equal(pretrain_loss(batch, 0.0, 0.2).grad_features, scl.grad_features)
        assert pretrain_loss(batch, 1.0, 0.2).value == sscl.value
        assert abs(pretrain_loss(batch, 0.5, 0.2).value - 0.5 * (scl.value + sscl.value)) <= 1e-12

    def test_alpha_range(self, rng):
        with pytest.raises(InvalidArgumentError):
            pretrain_loss(_two_view_batch(rng, 3, 3), 1.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        batch = _two_view_batch(rng, 4, 5)
        assert _fd_check(lambda bb: pretrain_loss(bb, 0.3, 0.5), batch) < 1e-4


class TestPscl:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_reference_and_gradient(self, seed):
        batch, ctx = _random_setup(seed)
        r = pscl_loss(batch, ctx)
        ref = naive_pscl(batch.features, batch.labels, ctx.assignment.assigned, ctx.assignment.unassigned,
                         ctx.targets.vectors, ctx.perturbed.base_index, ctx.perturbed.vectors, ctx.tau)
        assert r.value == pytest.approx(ref, abs=1e-10)
        assert _fd_check(lambda bb: pscl_loss(bb, ctx), batch) < 1e-4

    def test_reduces_to_scl_with_target_positive(self, rng):
        # no perturbations and no free targets: each anchor gains its target as one extra positive
        targets = TargetSet(np.eye(4))
        assignment = AssignmentState({0: 2, 1: 0, 2: 1, 3: 3}, (), ())
        f = unit_rows(rng, 6, 4)
        y = np.array([0, 0, 1, 1, 3, 3])
        ctx = ContrastiveContext(assignment, targets, PerturbedTargets.empty(4), tau=0.5)
        own = targets.vectors[[assignment.assigned[c] for c in y]]
        expected = []
        for i in range(6):
            pos = [f[j] for j in range(6) if j != i and y[j] == y[i]] + [own[i]]
            den = [f[j] for j in range(6) if j != i] + [own[i]]
            s_pos = [f[i] @ p / 0.5 for p in pos]
            s_den = [f[i] @ d / 0.5 for d in den]
            expected.append(-np.mean(s_pos) + math.log(sum(math.exp(s) for s in s_den)))
        assert abs(pscl_loss(FeatureBatch(f, y), ctx).value - np.mean(expected)) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_lambda_equals_exact_targets(self, seed):
        batch, ctx = _random_setup(seed, perturb=1, lam=0.0)
        exact = PerturbedTargets(ctx.perturbed.base_index, ctx.targets.vectors[ctx.perturbed.base_index], 0.0,
                                 Distribution.UNIFORM)
        ctx2 = ContrastiveContext(ctx.assignment, ctx.targets, exact, ctx.tau, class_sessions=ctx.class_sessions)
        a, b = pscl_loss(batch, ctx), pscl_loss(batch, ctx2)
        assert a.value == b.value and np.array_equal(a.grad_features, b.grad_features)

    def test_unassigned_class(self, rng):
        ctx = ContrastiveContext(AssignmentState({0: 0}, (1,), ()), TargetSet(np.eye(2)), PerturbedTargets.empty(2))
        with pytest.raises(UnassignedClassError):
            pscl_loss(FeatureBatch(unit_rows(rng, 2, 2), [0, 5]), ctx)

    @given(st.integers(0, 2**32 - 1))
    def test_joint_rotation_invariant(self, seed):
        batch, ctx = _random_setup(seed % 10_000)
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((batch.dim, batch.dim)))
        q_ctx = ContrastiveContext(
            ctx.assignment, TargetSet(ctx.targets.vectors @ q),
            PerturbedTargets(ctx.perturbed.base_index, ctx.perturbed.vectors @ q, ctx.perturbed.lam,
                             ctx.perturbed.distribution),
            ctx.tau, class_sessions=ctx.class_sessions, session=ctx.session,
        )
        for fn in (pscl_loss, ce_loss_or_zero, lambda b, c: orth_loss(b, c, 0.7)):
            assert abs(fn(batch, ctx).value - fn(batch.with_features(batch.features @ q), q_ctx).value) <= 1e-9


def ce_loss_or_zero(batch, ctx):
    try:
        return ce_loss(batch, ctx)
    except EmptyScopeError:
        return type("R", (), {"value": 0.0})()


class TestCe:
    def test_hand_example(self):
        ctx = ContrastiveContext(AssignmentState({0: 0, 1: 1}, (), ()), TargetSet(np.eye(2)), PerturbedTargets.empty(2))
        r = ce_loss(FeatureBatch(np.array([[1.0, 0.0]]), [0]), ctx)
        assert r.value == pytest.approx(0.31326, abs=1e-5)

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_uniform_logits(self, k):
        ctx = ContrastiveContext(AssignmentState({c: c for c in range(k)}, (), ()), TargetSet(np.eye(k + 1)[:k]),
                                 PerturbedTargets.empty(k + 1))
        f = np.zeros((1, k + 1))
        f[0, k] = 1.0
        assert ce_loss(FeatureBatch(f, [1]), ctx).value == pytest.approx(math.log(k), abs=1e-12)

    def test_incremental_scope(self, rng):
        ctx = ContrastiveContext(AssignmentState({0: 0, 1: 1, 2: 2}, (3,), ()), generate_random_targets(4, 4, 0),
                                 PerturbedTargets.empty(4), class_sessions={2: 1}, session=1)
        with pytest.raises(EmptyScopeError):
            ce_loss(FeatureBatch(unit_rows(rng, 2, 4), [0, 1]), ctx)
        batch = FeatureBatch(unit_rows(rng, 3, 4), [0, 2, 2])
        r = ce_loss(batch, ctx)
        assert np.array_equal(r.grad_features[0], np.zeros(4))
        # a single in-scope class gives a zero-loss softmax
        assert r.value == pytest.approx(0.0, abs=1e-12)
        all_ctx = ContrastiveContext(ctx.assignment, ctx.targets, ctx.perturbed, ce_scope=CeScope.ALL,
                                     class_sessions={2: 1}, session=1)
        ref = naive_ce(batch.features, batch.labels, [0, 1, 2], ctx.assignment.assigned, ctx.targets.vectors)
        assert ce_loss(batch, all_ctx).value == pytest.approx(ref, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_and_reference(self, seed):
        batch, ctx = _random_setup(seed)
        ctx = ContrastiveContext(ctx.assignment, ctx.targets, ctx.perturbed, ctx.tau, ce_scope="all",
                                 class_sessions=ctx.class_sessions, session=ctx.session)
        ref = naive_ce(batch.features, batch.labels, sorted(ctx.assignment.assigned), ctx.assignment.assigned,
                       ctx.targets.vectors)
        assert ce_loss(batch, ctx).value == pytest.approx(ref, abs=1e-10)
        assert _fd_check(lambda bb: ce_loss(bb, ctx), batch) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_geodesic_decrease(self, seed):
        # the other logits stay at zero when the feature starts orthogonal to the other targets
        rng = np.random.default_rng(seed)
        targets = TargetSet(np.eye(6)[:3])
        ctx = ContrastiveContext(AssignmentState({0: 0, 1: 1, 2: 2}, (), ()), targets, PerturbedTargets.empty(6))
        f = unit_rows(rng, 3, 6)
        start = np.zeros(6)
        start[[0, 3, 4, 5]] = rng.standard_normal(4)
        start /= np.linalg.norm(start)
        t = targets.vectors[0]
        omega = math.acos(float(np.clip(start @ t, -1, 1)))
        values = []
        for s in np.linspace(0, 1, 5):
            g = f.copy()
            g[0] = (math.sin((1 - s) * omega) * start + math.sin(s * omega) * t) / math.sin(omega)
            values.append(ce_loss(FeatureBatch(g, [0, 1, 2]), ctx).value)
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_target_is_not_the_sphere_minimiser(self):
        # without a temperature the optimum leans away from the other targets
        targets = TargetSet(np.eye(3))
        ctx = ContrastiveContext(AssignmentState({0: 0, 1: 1, 2: 2}, (), ()), targets, PerturbedTargets.empty(3))
        tilted = np.array([[1.0, -0.3, -0.3]]) / np.linalg.norm([1.0, -0.3, -0.3])
        at_target = ce_loss(FeatureBatch(np.eye(3)[:1], [0]), ctx).value
        assert ce_loss(FeatureBatch(tilted, [0]), ctx).value < at_target


class TestOrth:
    def test_reduces_to_target_generation(self, rng):
        f = unit_rows(rng, 6, 4)
        y = np.array([0, 1, 2, 0, 1, 2])
        ctx = ContrastiveContext(AssignmentState({0: 0, 1: 1, 2: 2}, (), ()), generate_random_targets(3, 4, 0),
                                 PerturbedTargets.empty(4))
        means = np.array([f[y == c].mean(axis=0) for c in range(3)])
        assert orth_loss(FeatureBatch(f, y), ctx, 0.5).value == pytest.approx(target_generation_loss(means, 0.5), abs=1e-12)

    def test_orthogonal_extra_target(self, rng):
        f = np.zeros((4, 4))
        f[:, :3] = unit_rows(rng, 4, 3)
        y = np.array([0, 0, 1, 1])
        extra = np.array([0.0, 0.0, 0.0, 1.0])
        targets = TargetSet(np.vstack([np.eye(4)[:2], extra]))
        without = ContrastiveContext(AssignmentState({0: 0, 1: 1}, (), ()), TargetSet(np.eye(4)[:2]),
                                     PerturbedTargets.empty(4))
        with_extra = ContrastiveContext(AssignmentState({0: 0, 1: 1}, (2,), ()), targets, PerturbedTargets.empty(4))
        tau = 0.8
        means = np.array([f[y == c].mean(axis=0) for c in (0, 1)])
        s = np.exp(means @ means.T / tau).sum(axis=1)
        n = len(means)
        closed = (np.sum(np.log(s + 1.0)) + math.log(n + math.exp(1 / tau))) / (n + 1)
        base = orth_loss(FeatureBatch(f, y), without, tau).value
        assert base == pytest.approx(np.mean(np.log(s)), abs=1e-12)
        assert abs(orth_loss(FeatureBatch(f, y), with_extra, tau).value - closed) <= 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_and_reference(self, seed):
        batch, ctx = _random_setup(seed)
        tau_o = 0.5 + seed / 20
        ref = naive_orth(batch.features, batch.labels, ctx.assignment.assigned, ctx.assignment.unassigned,
                         ctx.targets.vectors, tau_o)
        assert orth_loss(batch, ctx, tau_o).value == pytest.approx(ref, abs=1e-10)
        assert _fd_check(lambda bb: orth_loss(bb, ctx, tau_o), batch) < 1e-4


class TestOrco:
    @pytest.mark.parametrize("seed", range(20))
    def test_additive_and_gradient(self, seed):
        batch, ctx = _random_setup(seed)
        total = orco_loss(batch, ctx, 0.9)
        parts = pscl_loss(batch, ctx).value + ce_loss_or_zero(batch, ctx).value + orth_loss(batch, ctx, 0.9).value
        assert abs(total.value - parts) <= 1e-12
        assert set(total.components) == {"pscl", "ce", "orth"}
        assert _fd_check(lambda bb: orco_loss(bb, ctx, 0.9), batch) < 1e-4

    def test_pscl_only(self):
        batch, ctx = _random_setup(3)
        a = orco_loss(batch, ctx, use_ce=False, use_orth=False)
        b = pscl_loss(batch, ctx)
        assert a.value == b.value and np.array_equal(a.grad_features, b.grad_features)

    def test_all_disabled(self):
        batch, ctx = _random_setup(3)
        with pytest.raises(ConfigurationError):
            orco_loss(batch, ctx, use_pscl=False, use_ce=False, use_orth=False)

    @given(st.integers(0, 10_000))
    def test_finite(self, seed):
        batch, ctx = _random_setup(seed)
        assert math.isfinite(orco_loss(batch, ctx).value)


class TestPerturbationPlumbing:
    def test_scope(self):
        a = AssignmentState({0: 3, 1: 1, 2: 0}, (2, 4), ())
        assert perturbation_scope(a, "inc", {2: 1}).tolist() == [0, 2, 4]
        assert perturbation_scope(a, PerturbScope.ALL_ASSIGNED_AND_UNASSIGNED, {}).tolist() == [0, 1, 2, 3, 4]

    def test_oversample_round_robin(self):
        t = generate_random_targets(5, 4, 0)
        q = oversample_perturbations(t, [1, 3, 4], 7, 1e-2, "uniform", seed=0, offset=1)
        assert q.base_index.tolist() == [3, 4, 1, 3, 4, 1, 3]

    def test_none_gives_no_rows(self):
        t = generate_random_targets(5, 4, 0)
        assert len(oversample_perturbations(t, [1, 2], 8, 1e-2, "none", seed=0)) == 0
        assert len(oversample_perturbations(t, [], 8, 1e-2, "uniform", seed=0)) == 0
