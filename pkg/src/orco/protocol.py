"""Three-phase FSCIL driver: pretrain, base alignment, few-shot alignment.

Phase 1 trains encoder and head with the SCL/SSCL mixture on base data.
Pseudo-targets are then generated, base class means are matched to them,
and the head alone is aligned with the OrCo loss. Each incremental session
matches the new class means to free targets, trains the head on the new
shots plus replayed exemplars, and evaluates on every class seen so far.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .batch import FeatureBatch
from .data import FeatureDataset, SessionData, augment_view, partition_fscil
from .errors import (
    CapacityError,
    ConfigurationError,
    DegenerateMeanError,
    InvalidArgumentError,
    InvalidStateError,
    NumericalFailureError,
    ScheduleExhaustedError,
    TrainingFailureError,
)
from .geometry import Distribution, TargetSet, generate_random_targets, normalize_rows, optimize_targets
from .losses import (
    CeScope,
    ContrastiveContext,
    PerturbScope,
    orco_loss,
    oversample_perturbations,
    perturbation_scope,
    pretrain_loss,
)
from .matching import AssignmentState, ClassMeans, Strategy, assign_session, class_means
from .metrics import (
    SessionReport,
    accuracy,
    confusion_by_group,
    fp_inc,
    harmonic_mean,
    nearest_target_classify,
    session_group,
    sim_cls,
    sim_cls_to_target,
)
from .model import (
    CosineWarmup,
    FreezePlan,
    OptimizerKind,
    OptimizerState,
    ProjectionModel,
    backward,
    forward,
    optimizer_step,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SessionPlan:
    base_classes: int = 10
    sessions: int = 3
    ways: int = 3
    shots: int = 5

    def __post_init__(self):
        if self.base_classes < 1 or self.sessions < 0 or self.ways < 1 or self.shots < 1:
            raise InvalidArgumentError("plan sizes must be positive (sessions may be 0)")

    @property
    def total_classes(self) -> int:
        return self.base_classes + self.sessions * self.ways

    def classes_seen(self, session: int) -> int:
        return self.base_classes + session * self.ways


@dataclass(frozen=True)
class PhaseConfig:
    # loss
    alpha: float = 0.5
    tau: float = 0.3
    tau_o: float = 1.0
    lam: float = 1e-2
    perturb_distribution: Distribution = Distribution.UNIFORM
    perturb_scope: PerturbScope = PerturbScope.INCREMENTAL_AND_UNASSIGNED
    ce_scope: CeScope = CeScope.INCREMENTAL_ONLY
    use_pscl: bool = True
    use_ce: bool = True
    use_orth: bool = True
    # schedule
    epochs_phase1: int = 30
    epochs_phase2: int = 10
    epochs_phase3: int = 100
    lr_phase1: float = 0.4
    lr_phase2: float = 0.25
    lr_phase3: float = 0.1
    momentum: float = 0.9
    lars_trust: float = 0.02
    warmup_fraction: float = 0.05
    batch_size: int = 64
    jitter_std: float = 0.05
    skip_pretrain: bool = False
    finetune_encoder_phase2: bool = False
    finetune_encoder_phase3: bool = False
    # targets and assignment
    target_count: int = 0
    target_lr: float = 1e-2
    target_epochs: int = 2000
    target_method: str = "amsgrad"
    assignment_strategy: Strategy = Strategy.GREEDY
    exemplars_per_class: int = 5
    # model
    encoder_dims: tuple = (64, 64)
    head_hidden: int = 128
    output_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "perturb_distribution", Distribution.parse(self.perturb_distribution))
        object.__setattr__(self, "perturb_scope", PerturbScope.parse(self.perturb_scope))
        object.__setattr__(self, "ce_scope", CeScope.parse(self.ce_scope))
        object.__setattr__(self, "assignment_strategy", Strategy.parse(self.assignment_strategy))
        object.__setattr__(self, "encoder_dims", tuple(int(d) for d in self.encoder_dims))
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError("alpha must lie in [0, 1]")
        if self.tau <= 0 or self.tau_o <= 0:
            raise InvalidArgumentError("temperatures must be positive")
        if self.lam < 0:
            raise InvalidArgumentError("lambda must be non-negative")
        for name in ("epochs_phase1", "epochs_phase2", "epochs_phase3", "exemplars_per_class", "target_count"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.output_dim < 2:
            raise InvalidArgumentError("output_dim must be >= 2")
        if not (self.use_pscl or self.use_ce or self.use_orth):
            raise InvalidArgumentError("at least one loss component must be enabled")

    def freeze_phase2(self) -> FreezePlan:
        return FreezePlan(encoder_frozen=not self.finetune_encoder_phase2)

    def freeze_phase3(self) -> FreezePlan:
        return FreezePlan(encoder_frozen=not self.finetune_encoder_phase3)


@dataclass
class ExemplarMemory:
    capacity_per_class: int
    seed: int = 0
    per_class: dict = field(default_factory=dict)

    def store(self, x, y, classes, rng) -> None:
        for c in classes:
            rows = np.flatnonzero(y == c)
            if c in self.per_class:
                raise InvalidArgumentError(f"class {c} already has stored exemplars")
            k = min(self.capacity_per_class, len(rows))
            pick = np.sort(rng.choice(rows, size=k, replace=False)) if k else rows[:0]
            self.per_class[int(c)] = x[pick].copy()

    def joint(self):
        xs = [v for _, v in sorted(self.per_class.items()) if len(v)]
        ys = [np.full(len(v), c) for c, v in sorted(self.per_class.items()) if len(v)]
        if not xs:
            return None, None
        return np.vstack(xs), np.concatenate(ys)

    def __len__(self):
        return len(self.per_class)


@dataclass
class RunResult:
    reports: list
    model: ProjectionModel
    state: AssignmentState
    memory: ExemplarMemory
    targets: TargetSet
    pretrain_trace: list
    encoder_snapshots: dict


def _rng(seed, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *keys]))


_PHASE1, _PHASE2, _PHASE3, _TARGETS, _MEMORY, _ASSIGN, _MODEL = range(1, 8)


def prepare_inputs(x) -> np.ndarray:
    """Raw features are compared by direction only: rows are L2-normalised."""
    return normalize_rows(np.asarray(x, dtype=np.float64))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _two_views(x, y, jitter_std, rng, session_tags=None):
    v0 = augment_view(x, jitter_std, rng)
    v1 = augment_view(x, jitter_std, rng)
    n = len(x)
    tags = np.zeros(n, np.int64) if session_tags is None else session_tags
    return (
        np.vstack([v0, v1]),
        np.concatenate([y, y]),
        np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)]),
        np.concatenate([tags, tags]),
    )


def _check_finite(value, phase, session=None):
    if not math.isfinite(value):
        raise TrainingFailureError(f"non-finite loss in {phase}", phase=phase, session=session)


def new_model(input_dim: int, cfg: PhaseConfig) -> ProjectionModel:
    return ProjectionModel.initialize(
        input_dim=input_dim,
        encoder_dims=cfg.encoder_dims,
        hidden_dim=cfg.head_hidden,
        output_dim=cfg.output_dim,
        seed=int(_rng(cfg.seed, _MODEL).integers(2**63)),
    )


def phase1_pretrain(model: ProjectionModel, base_x, base_y, cfg: PhaseConfig):
    """SCL/SSCL pretraining of encoder and head; returns ``(model, epoch_losses)``.

    The model is updated in place and also returned.
    """
    base_x, base_y = np.asarray(base_x, np.float64), np.asarray(base_y, np.int64)
    labels, counts = np.unique(base_y, return_counts=True)
    if np.any(counts < 2):
        raise ConfigurationError(f"class {int(labels[counts < 2][0])} has fewer than 2 base samples")
    trace = []
    if cfg.epochs_phase1 == 0:
        return model, trace
    rng = _rng(cfg.seed, _PHASE1)
    n_batches = math.ceil(len(base_x) / cfg.batch_size)
    opt = OptimizerState(
        OptimizerKind.LARS,
        cfg.lr_phase1,
        CosineWarmup.for_epochs(cfg.epochs_phase1, n_batches, cfg.warmup_fraction),
        momentum=cfg.momentum,
        trust_coefficient=cfg.lars_trust,
    )
    for _ in range(cfg.epochs_phase1):
        losses = []
        for idx in _batches(len(base_x), cfg.batch_size, rng):
            x, y, views, _ = _two_views(base_x[idx], base_y[idx], cfg.jitter_std, rng)
            z, cache = forward(model, x)
            res = pretrain_loss(FeatureBatch(z, y, views), cfg.alpha, cfg.tau)
            _check_finite(res.value, "phase1")
            grads = backward(model, cache, res.grad_features)
            params, opt = optimizer_step(opt, model.parameters(), grads)
            model.set_parameters(params)
            losses.append(res.value)
        trace.append(float(np.mean(losses)))
    return model, trace


def generate_targets(cfg: PhaseConfig, plan: SessionPlan) -> TargetSet:
    count = cfg.target_count or plan.total_classes
    if count < plan.total_classes:
        raise CapacityError(f"{count} targets cannot serve {plan.total_classes} classes")
    seed = int(_rng(cfg.seed, _TARGETS).integers(2**63))
    targets = generate_random_targets(count, cfg.output_dim, seed)
    if cfg.target_epochs:
        targets = optimize_targets(targets, cfg.target_lr, cfg.target_epochs, cfg.tau_o, cfg.target_method)
    return targets


def _align(model, x, y, tags, state, targets, cfg, session, class_sessions, epochs, lr, freeze, rng):
    """Head alignment with the OrCo loss over ``epochs`` passes of ``(x, y)``."""
    if epochs == 0 or len(x) == 0:
        return []
    n_batches = math.ceil(len(x) / cfg.batch_size)
    opt = OptimizerState(
        OptimizerKind.SGD_MOMENTUM, lr, CosineWarmup.for_epochs(epochs, n_batches, cfg.warmup_fraction),
        momentum=cfg.momentum,
    )
    scope = perturbation_scope(state, cfg.perturb_scope, class_sessions)
    trainable = model.trainable_mask(freeze)
    trace, step = [], 0
    phase = "phase2" if session == 0 else "phase3"
    for _ in range(epochs):
        losses = []
        for idx in _batches(len(x), cfg.batch_size, rng):
            xb, yb, views, tb = _two_views(x[idx], y[idx], cfg.jitter_std, rng, tags[idx])
            z, cache = forward(model, xb, freeze)
            perturbed = oversample_perturbations(
                targets, scope, len(z), cfg.lam, cfg.perturb_distribution,
                seed=int(rng.integers(2**63)), offset=step * len(z),
            )
            ctx = ContrastiveContext(
                state, targets, perturbed, cfg.tau, cfg.perturb_scope, cfg.ce_scope, class_sessions, session,
            )
            res = orco_loss(FeatureBatch(z, yb, views, tb), ctx, cfg.tau_o, cfg.use_pscl, cfg.use_ce, cfg.use_orth)
            _check_finite(res.value, phase, session)
            grads = backward(model, cache, res.grad_features, freeze)
            params, opt = optimizer_step(opt, model.parameters(), grads, trainable)
            model.set_parameters(params)
            losses.append(res.value)
            step += 1
        trace.append(float(np.mean(losses)))
    return trace


def phase2_base_align(model, base_x, base_y, targets: TargetSet, cfg: PhaseConfig, freeze: FreezePlan | None = None):
    """Match base class means to targets, then align the head. Returns ``(model, state)``."""
    base_x, base_y = np.asarray(base_x, np.float64), np.asarray(base_y, np.int64)
    classes = np.unique(base_y)
    if targets.count < len(classes):
        raise CapacityError(f"{targets.count} targets cannot serve {len(classes)} base classes")
    freeze = cfg.freeze_phase2() if freeze is None else freeze
    rng = _rng(cfg.seed, _PHASE2)
    means = class_means(forward(model, base_x)[0], base_y)
    state = assign_session(
        AssignmentState.initial(targets.count), means, targets, cfg.assignment_strategy,
        seed=int(_rng(cfg.seed, _ASSIGN, 0).integers(2**63)),
    )
    class_sessions = {int(c): 0 for c in classes}
    tags = np.zeros(len(base_y), np.int64)
    _align(model, base_x, base_y, tags, state, targets, cfg, 0, class_sessions,
           cfg.epochs_phase2, cfg.lr_phase2, freeze, rng)
    return model, state


def evaluate_session(model, state, targets, x_val, y_val, plan: SessionPlan, session_index: int) -> SessionReport:
    """Nearest-assigned-target evaluation on every class seen so far."""
    seen = plan.classes_seen(session_index)
    keep = y_val < seen
    x, y = np.asarray(x_val)[keep], np.asarray(y_val)[keep]
    z = model.embed(x)
    pred = nearest_target_classify(z, state, targets)
    base = y < plan.base_classes
    acc_base = accuracy(pred[base], y[base])
    acc_inc = accuracy(pred[~base], y[~base]) if session_index >= 1 else math.nan
    acc_overall = accuracy(pred, y)
    hm = harmonic_mean(acc_base, acc_inc) if session_index >= 1 else math.nan
    per_class = {int(c): accuracy(pred[y == c], y[y == c]) for c in np.unique(y)}
    diag = {}
    base_set = range(plan.base_classes)
    if session_index >= 1:
        diag["fp_inc"] = fp_inc(pred, y, base_set)
        diag["fp_inc_excl_base"] = fp_inc(pred, y, base_set, exclude_base_predictions=True)
    means = class_means(z, y)
    diag["sim_cls"] = sim_cls(means) if len(means) >= 2 else math.nan
    diag["sim_cls_to_target"] = sim_cls_to_target(z, state, targets) if state.unassigned else math.nan
    return SessionReport(
        session_index=session_index,
        acc_base=acc_base,
        acc_inc=acc_inc,
        acc_overall=acc_overall,
        hm=hm,
        n_base=int(base.sum()),
        n_inc=int((~base).sum()),
        per_class_acc=per_class,
        confusion_by_group=confusion_by_group(pred, y, plan),
        diagnostics=diag,
    )


def phase3_incremental(
    model,
    session_data: SessionData,
    state: AssignmentState,
    memory: ExemplarMemory,
    targets: TargetSet,
    cfg: PhaseConfig,
    session_index: int,
    class_sessions: dict | None = None,
    mean_cache: dict | None = None,
    freeze: FreezePlan | None = None,
    plan: SessionPlan | None = None,
    val=None,
):
    """One few-shot session; returns ``(model, state, memory, report)``.

    ``class_sessions`` maps class -> introducing session. When omitted it is
    derived from ``plan`` if given, otherwise every assigned class is taken
    to be a base class. It and ``mean_cache`` (class -> last unit mean, used
    by reassignment for classes without exemplars) are updated in place.
    ``report`` is None unless both ``plan`` and ``val = (x_val, y_val)`` are
    given.
    """
    if session_index < 1:
        raise InvalidArgumentError("incremental sessions are numbered from 1")
    x = np.asarray(session_data.x, np.float64)
    y = np.asarray(session_data.y, np.int64)
    new = [int(c) for c in np.unique(y)]
    if plan is not None:
        counts = np.unique(y, return_counts=True)[1]
        if len(new) != plan.ways or np.any(counts != plan.shots):
            raise InvalidArgumentError(f"session must hold {plan.ways} classes x {plan.shots} shots")
    if class_sessions is None:
        if plan is not None:
            class_sessions = {c: session_group(c, plan) for c in state.assigned}
        else:
            class_sessions = {c: 0 for c in state.assigned}
    dup = set(new) & (set(state.assigned) | set(class_sessions))
    if dup:
        raise InvalidArgumentError(f"classes already introduced: {sorted(dup)}")
    strategy = cfg.assignment_strategy
    if strategy is not Strategy.REASSIGNMENT and len(new) > len(state.unassigned):
        raise CapacityError(f"{len(new)} new classes but only {len(state.unassigned)} unassigned targets")
    mean_cache = {} if mean_cache is None else mean_cache
    freeze = cfg.freeze_phase3() if freeze is None else freeze

    new_means = class_means(model.embed(x), y)
    for c, m in zip(new_means.class_ids, new_means.means):
        mean_cache[c] = m
    assign_seed = int(_rng(cfg.seed, _ASSIGN, session_index).integers(2**63))
    if strategy is Strategy.REASSIGNMENT:
        mx, my = memory.joint()
        if mx is not None:
            old = class_means(model.embed(mx), my)
            for c, m in zip(old.class_ids, old.means):
                mean_cache[c] = m
        ids = sorted(set(state.assigned) | set(new))
        means = ClassMeans(tuple(ids), np.array([mean_cache[c] for c in ids]), tuple(1 for _ in ids))
        state = assign_session(state, means, targets, strategy, seed=assign_seed)
    else:
        state = assign_session(state, new_means, targets, strategy, seed=assign_seed)
    for c in new:
        class_sessions[c] = session_index

    mx, my = memory.joint()
    if mx is None:
        jx, jy = x, y
    else:
        jx, jy = np.vstack([x, mx]), np.concatenate([y, my])
    tags = np.array([class_sessions[int(c)] for c in jy], dtype=np.int64)
    rng = _rng(cfg.seed, _PHASE3, session_index)
    _align(model, jx, jy, tags, state, targets, cfg, session_index, class_sessions,
           cfg.epochs_phase3, cfg.lr_phase3, freeze, rng)
    memory.store(x, y, new, _rng(cfg.seed, _MEMORY, session_index))
    report = None
    if plan is not None and val is not None:
        report = evaluate_session(model, state, targets, val[0], val[1], plan, session_index)
    return model, state, memory, report


def ncm_accuracy(model, x_train, y_train, x_val, y_val) -> float:
    """Nearest-class-mean accuracy of the model's embeddings (phase-1 quality probe)."""
    means = class_means(model.embed(x_train), y_train)
    pred = np.asarray(means.class_ids)[np.argmax(model.embed(x_val) @ means.means.T, axis=1)]
    return accuracy(pred, y_val)


_TRAINING_ERRORS = (NumericalFailureError, DegenerateMeanError, InvalidStateError, ScheduleExhaustedError,
                    FloatingPointError)


def _encoder_snapshot(model):
    return [p.copy() for layer in model.encoder_layers for p in (layer.weight, layer.bias)]


def run_fscil_detailed(cfg: PhaseConfig, plan: SessionPlan, dataset: FeatureDataset, pretrained=None) -> RunResult:
    """Full pipeline. ``pretrained`` may supply a phase-1 model to reuse (it is copied)."""
    sessions = partition_fscil(dataset, plan, seed=int(_rng(cfg.seed, 0).integers(2**63)))
    x_val, y_val = prepare_inputs(dataset.x_val), dataset.y_val
    base = sessions[0]
    base_x = prepare_inputs(base.x)

    if pretrained is not None:
        model, trace = pretrained.copy(), []
    else:
        model = new_model(dataset.dim, cfg)
        trace = []
        if not cfg.skip_pretrain:
            try:
                model, trace = phase1_pretrain(model, base_x, base.y, cfg)
            except _TRAINING_ERRORS as exc:
                raise TrainingFailureError(str(exc), phase="phase1") from exc
    snapshots = {"phase1": _encoder_snapshot(model)}

    try:
        targets = generate_targets(cfg, plan)
    except NumericalFailureError as exc:
        raise TrainingFailureError(str(exc), phase="targets") from exc
    try:
        model, state = phase2_base_align(model, base_x, base.y, targets, cfg)
    except _TRAINING_ERRORS as exc:
        raise TrainingFailureError(str(exc), phase="phase2", session=0) from exc
    snapshots["phase2"] = _encoder_snapshot(model)
    memory = ExemplarMemory(cfg.exemplars_per_class, seed=cfg.seed)
    memory.store(base_x, base.y, base.classes, _rng(cfg.seed, _MEMORY, 0))
    reports = [evaluate_session(model, state, targets, x_val, y_val, plan, 0)]
    class_sessions = {int(c): 0 for c in base.classes}
    mean_cache = {}
    for sd in sessions[1:]:
        sd = replace(sd, x=prepare_inputs(sd.x))
        try:
            model, state, memory, report = phase3_incremental(
                model, sd, state, memory, targets, cfg, sd.session, class_sessions, mean_cache,
                plan=plan, val=(x_val, y_val),
            )
        except _TRAINING_ERRORS as exc:
            raise TrainingFailureError(str(exc), phase="phase3", session=sd.session) from exc
        reports.append(report)
        snapshots[f"session{sd.session}"] = _encoder_snapshot(model)
        log.info("session %d: base %.2f inc %.2f hm %.2f", sd.session, reports[-1].acc_base,
                 reports[-1].acc_inc, reports[-1].hm)
    return RunResult(reports, model, state, memory, targets, trace, snapshots)


def run_fscil(cfg: PhaseConfig, plan: SessionPlan, dataset: FeatureDataset, pretrained=None) -> list:
    return run_fscil_detailed(cfg, plan, dataset, pretrained).reports


def pretrain_only(cfg: PhaseConfig, plan: SessionPlan, dataset: FeatureDataset) -> ProjectionModel:
    """The phase-1 model ``run_fscil`` would build, for reuse across ablation variants."""
    sessions = partition_fscil(dataset, plan, seed=int(_rng(cfg.seed, 0).integers(2**63)))
    model = new_model(dataset.dim, cfg)
    if not cfg.skip_pretrain:
        model, _ = phase1_pretrain(model, prepare_inputs(sessions[0].x), sessions[0].y, cfg)
    return model


def config_fields() -> dict:
    return {f.name: f for f in fields(PhaseConfig)}
