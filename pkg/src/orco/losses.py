"""Contrastive, cross-entropy and orthogonality losses with analytic gradients.

Every contrastive loss here is an InfoNCE over a pool of rows: for an anchor
``a`` with positive set ``P_a`` and denominator set ``D_a``::

    loss_a = -1/|P_a| * sum_{p in P_a} s_ap + log sum_{k in D_a} exp(s_ak)

with ``s = x_a . x_k / tau``. ``D_a`` is every pool row other than the anchor
(positives included), which is the usual supervised-contrastive convention.
Gradients are returned for the batch features only; targets are constants.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .batch import FeatureBatch
from .errors import ConfigurationError, EmptyScopeError, InvalidArgumentError, UnassignedClassError
from .geometry import (
    Distribution,
    PerturbedTargets,
    TargetSet,
    perturb_targets,
    target_generation_grad,
    target_generation_loss,
)
from .matching import AssignmentState

__all__ = [
    "FeatureBatch",
    "PerturbScope",
    "CeScope",
    "ContrastiveContext",
    "LossResult",
    "info_nce",
    "scl_loss",
    "sscl_loss",
    "pretrain_loss",
    "pscl_loss",
    "ce_loss",
    "orth_loss",
    "orco_loss",
    "perturbation_scope",
    "oversample_perturbations",
]


class PerturbScope(str, enum.Enum):
    INCREMENTAL_AND_UNASSIGNED = "inc"
    ALL_ASSIGNED_AND_UNASSIGNED = "all"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"incremental": "inc", "inc+unassigned": "inc", "base+inc": "all", "incrementalandunassigned": "inc",
                   "allassignedandunassigned": "all"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InvalidArgumentError(f"unknown perturbation scope {value!r}") from None


class CeScope(str, enum.Enum):
    INCREMENTAL_ONLY = "inc"
    ALL = "all"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"incremental": "inc", "incrementalonly": "inc", "base+inc": "all"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InvalidArgumentError(f"unknown cross-entropy scope {value!r}") from None


@dataclass(frozen=True)
class ContrastiveContext:
    """Everything the target-aware losses need besides the batch.

    ``class_sessions`` maps class id to the session that introduced it; classes
    missing from it count as base classes. ``session`` is the session being
    trained (0 during base alignment).
    """

    assignment: AssignmentState
    targets: TargetSet
    perturbed: PerturbedTargets
    tau: float = 0.1
    perturb_scope: PerturbScope = PerturbScope.INCREMENTAL_AND_UNASSIGNED
    ce_scope: CeScope = CeScope.INCREMENTAL_ONLY
    class_sessions: dict = field(default_factory=dict)
    session: int = 0


@dataclass
class LossResult:
    value: float
    grad_features: np.ndarray
    grad_aux: np.ndarray | None = None
    components: dict = field(default_factory=dict)


def info_nce(rows, anchors, pos, denom, tau, n_train=None):
    """Mean InfoNCE over ``anchors`` with boolean ``pos``/``denom`` masks.

    ``pos`` and ``denom`` have shape (len(anchors), len(rows)). Returns the
    value and the gradient w.r.t. the first ``n_train`` rows.
    """
    rows = np.asarray(rows, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.int64)
    n_rows = rows.shape[0]
    n_train = n_rows if n_train is None else n_train
    if anchors.size == 0:
        return 0.0, np.zeros((n_train, rows.shape[1]))
    npos = pos.sum(axis=1)
    if np.any(npos == 0):
        raise ConfigurationError("an anchor has an empty positive set")
    if np.any(~denom.any(axis=1)):
        raise ConfigurationError("an anchor has an empty denominator")
    a = rows[anchors]
    s = a @ rows.T / tau
    masked = np.where(denom, s, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    z = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(z))[:, 0]
    pos_mean = np.where(pos, s, 0.0).sum(axis=1) / npos
    value = float(np.mean(lse - pos_mean))

    g = (e / z - pos / npos[:, None]) / len(anchors)  # d value / d s
    grad = g.T @ a / tau
    grad[anchors] += g @ rows / tau
    return value, grad[:n_train]


def _no_self(n_anchor_rows, n_rows, anchors):
    mask = np.ones((n_anchor_rows, n_rows), dtype=bool)
    mask[np.arange(n_anchor_rows), anchors] = False
    return mask


def scl_loss(batch: FeatureBatch, tau: float = 0.1) -> LossResult:
    """Supervised contrastive loss: positives are the other rows sharing the label."""
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    y = batch.labels
    b = len(batch)
    anchors = np.arange(b)
    others = _no_self(b, b, anchors)
    pos = (y[:, None] == y[None, :]) & others
    lonely = ~pos.any(axis=1)
    if lonely.any():
        raise ConfigurationError(f"label {int(y[lonely][0])} has a single sample: no positive for its anchor")
    value, grad = info_nce(batch.features, anchors, pos, others, tau)
    return LossResult(value, grad)


def _view_partners(batch: FeatureBatch) -> np.ndarray:
    """Index of each row's other view; the k-th view-0 row pairs with the k-th view-1 row."""
    v0 = np.flatnonzero(batch.view_ids == 0)
    v1 = np.flatnonzero(batch.view_ids == 1)
    if len(v0) != len(v1):
        raise InvalidArgumentError(f"unpaired views: {len(v0)} view-0 rows vs {len(v1)} view-1 rows")
    partner = np.empty(len(batch), dtype=np.int64)
    partner[v0] = v1
    partner[v1] = v0
    return partner


def sscl_loss(batch: FeatureBatch, tau: float = 0.1) -> LossResult:
    """Self-supervised contrastive loss: the sole positive is the row's other view."""
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    partner = _view_partners(batch)
    b = len(batch)
    anchors = np.arange(b)
    pos = np.zeros((b, b), dtype=bool)
    pos[anchors, partner] = True
    value, grad = info_nce(batch.features, anchors, pos, _no_self(b, b, anchors), tau)
    return LossResult(value, grad)


def pretrain_loss(batch: FeatureBatch, alpha: float = 0.5, tau: float = 0.1) -> LossResult:
    """``(1 - alpha) * SCL + alpha * SSCL``."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError("alpha must lie in [0, 1]")
    scl = scl_loss(batch, tau)
    sscl = sscl_loss(batch, tau)
    value = (1.0 - alpha) * scl.value + alpha * sscl.value
    grad = (1.0 - alpha) * scl.grad_features + alpha * sscl.grad_features
    return LossResult(value, grad, components={"scl": scl.value, "sscl": sscl.value})


def _assigned_targets(batch: FeatureBatch, assignment: AssignmentState) -> np.ndarray:
    missing = {int(c) for c in np.unique(batch.labels)} - set(assignment.assigned)
    if missing:
        raise UnassignedClassError(missing)
    return np.array([assignment.assigned[int(c)] for c in batch.labels], dtype=np.int64)


def pscl_loss(batch: FeatureBatch, ctx: ContrastiveContext) -> LossResult:
    """Perturbed supervised contrastive loss.

    Pool rows are the batch features, the exact targets that act as anchors
    or positives, and the perturbed targets in ``ctx.perturbed``.

    * Real anchor with label y (target t): positives are same-label rows,
      t itself and every perturbation of t; the denominator additionally
      holds all other batch rows and all other perturbations.
    * Unassigned target anchor u with at least one perturbation: positives
      are u's perturbations; the denominator is every batch row plus every
      perturbation.
    """
    if ctx.tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    f = batch.features
    b = len(batch)
    own = _assigned_targets(batch, ctx.assignment)
    q_base = np.asarray(ctx.perturbed.base_index, dtype=np.int64)
    q = np.asarray(ctx.perturbed.vectors, dtype=np.float64).reshape(len(q_base), f.shape[1])

    assigned_idx = np.unique(own)
    unassigned = np.array(ctx.assignment.unassigned, dtype=np.int64)
    u_anchor_idx = unassigned[np.isin(unassigned, q_base)]
    exact_idx = np.concatenate([assigned_idx, u_anchor_idx])
    e_rows = ctx.targets.vectors[exact_idx]
    ne, nq = len(exact_idx), len(q_base)
    rows = np.vstack([f, e_rows, q]) if nq else np.vstack([f, e_rows])
    n = b + ne + nq
    e_slot = {int(t): b + k for k, t in enumerate(exact_idx)}

    y = batch.labels
    real_pos = np.zeros((b, n), dtype=bool)
    real_pos[:, :b] = y[:, None] == y[None, :]
    real_pos[np.arange(b), np.arange(b)] = False
    own_slot = np.array([e_slot[int(t)] for t in own], dtype=np.int64)
    real_pos[np.arange(b), own_slot] = True
    real_pos[:, b + ne:] = own[:, None] == q_base[None, :]
    real_den = np.zeros((b, n), dtype=bool)
    real_den[:, :b] = True
    real_den[np.arange(b), np.arange(b)] = False
    real_den[np.arange(b), own_slot] = True
    real_den[:, b + ne:] = True

    nu = len(u_anchor_idx)
    u_pos = np.zeros((nu, n), dtype=bool)
    u_pos[:, b + ne:] = u_anchor_idx[:, None] == q_base[None, :]
    u_den = np.zeros((nu, n), dtype=bool)
    u_den[:, :b] = True
    u_den[:, b + ne:] = True

    anchors = np.concatenate([np.arange(b), [e_slot[int(t)] for t in u_anchor_idx]]).astype(np.int64)
    value, grad = info_nce(rows, anchors, np.vstack([real_pos, u_pos]), np.vstack([real_den, u_den]), ctx.tau, n_train=b)
    return LossResult(value, grad)


def _session_of(ctx: ContrastiveContext, class_id) -> int:
    return int(ctx.class_sessions.get(int(class_id), 0))


def ce_classes(ctx: ContrastiveContext) -> list:
    """Classes whose targets enter the cross-entropy softmax.

    With the incremental-only scope this is every class introduced in a
    session >= 1; during base alignment (session 0) there are none yet, so
    the base classes themselves are used.
    """
    classes = sorted(ctx.assignment.assigned)
    if CeScope.parse(ctx.ce_scope) is CeScope.ALL or ctx.session == 0:
        return classes
    return [c for c in classes if _session_of(ctx, c) >= 1]


def ce_loss(batch: FeatureBatch, ctx: ContrastiveContext) -> LossResult:
    """Softmax cross-entropy of feature-target dot products over in-scope classes."""
    classes = ce_classes(ctx)
    contributing = np.isin(batch.labels, classes)
    if not contributing.any():
        raise EmptyScopeError("no batch sample belongs to a cross-entropy class")
    _assigned_targets(FeatureBatch(batch.features[contributing], batch.labels[contributing]), ctx.assignment)
    t = ctx.targets.vectors[[ctx.assignment.assigned[c] for c in classes]]
    col = {c: k for k, c in enumerate(classes)}
    f = batch.features[contributing]
    onehot = np.zeros((len(f), len(classes)))
    onehot[np.arange(len(f)), [col[int(c)] for c in batch.labels[contributing]]] = 1.0
    logits = f @ t.T
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    logp = logits - m - np.log(z)
    value = float(-(onehot * logp).sum() / len(f))
    grad = np.zeros_like(batch.features)
    grad[contributing] = (e / z - onehot) @ t / len(f)
    return LossResult(value, grad)


def orth_loss(batch: FeatureBatch, ctx: ContrastiveContext, tau_o: float = 1.0) -> LossResult:
    """Target-generation energy over batch class means, absent classes' targets and free targets."""
    y = batch.labels
    present = np.unique(y)
    means = np.array([batch.features[y == c].mean(axis=0) for c in present])
    absent = [c for c in sorted(ctx.assignment.assigned) if c not in set(present.tolist())]
    extra_idx = [ctx.assignment.assigned[c] for c in absent] + list(ctx.assignment.unassigned)
    o = np.vstack([means, ctx.targets.vectors[extra_idx]]) if extra_idx else means
    value = target_generation_loss(o, tau_o)
    g_o = target_generation_grad(o, tau_o)
    grad = np.zeros_like(batch.features)
    for k, c in enumerate(present):
        rows = y == c
        grad[rows] = g_o[k] / rows.sum()
    return LossResult(value, grad)


def orco_loss(
    batch: FeatureBatch,
    ctx: ContrastiveContext,
    tau_o: float = 1.0,
    use_pscl: bool = True,
    use_ce: bool = True,
    use_orth: bool = True,
) -> LossResult:
    """Unit-weight sum of PSCL, cross-entropy and orthogonality terms.

    A cross-entropy term with no in-scope sample contributes zero.
    """
    if not (use_pscl or use_ce or use_orth):
        raise ConfigurationError("at least one loss component must be enabled")
    value = 0.0
    grad = np.zeros_like(batch.features)
    components = {}
    if use_pscl:
        r = pscl_loss(batch, ctx)
        components["pscl"] = r.value
        value += r.value
        grad += r.grad_features
    if use_ce:
        try:
            r = ce_loss(batch, ctx)
        except EmptyScopeError:
            components["ce"] = 0.0
        else:
            components["ce"] = r.value
            value += r.value
            grad += r.grad_features
    if use_orth:
        r = orth_loss(batch, ctx, tau_o)
        components["orth"] = r.value
        value += r.value
        grad += r.grad_features
    return LossResult(value, grad, components=components)


def perturbation_scope(assignment: AssignmentState, scope, class_sessions: dict) -> np.ndarray:
    """Target indices eligible for perturbation, ascending."""
    scope = PerturbScope.parse(scope)
    idx = set(assignment.unassigned)
    for c, t in assignment.assigned.items():
        if scope is PerturbScope.ALL_ASSIGNED_AND_UNASSIGNED or int(class_sessions.get(c, 0)) >= 1:
            idx.add(t)
    return np.array(sorted(idx), dtype=np.int64)


def oversample_perturbations(
    targets: TargetSet,
    scope_indices,
    n_rows: int,
    lam: float,
    distribution,
    seed: int,
    offset: int = 0,
) -> PerturbedTargets:
    """``n_rows`` perturbed targets spread round-robin over ``scope_indices``.

    ``offset`` rotates the starting target so that small batches still visit
    every in-scope target over successive steps. Distribution ``none`` yields
    no rows at all (the contrastive loss then sees no target perturbations).
    """
    distribution = Distribution.parse(distribution)
    scope_indices = np.asarray(scope_indices, dtype=np.int64)
    if distribution is Distribution.NONE or len(scope_indices) == 0 or n_rows <= 0:
        return PerturbedTargets.empty(targets.dim, distribution)
    picks = scope_indices[(offset + np.arange(n_rows)) % len(scope_indices)]
    return perturb_targets(targets, picks, lam, distribution, seed=seed, samples_per_target=1)
