"""scikit-learn style wrappers around the protocol.

``OrCoClassifier.fit`` runs pretraining, target generation and base
alignment on the base session; each ``partial_fit`` call is one few-shot
session with new classes. ``predict`` returns the class of the nearest
assigned target and ``transform`` returns the unit-norm embeddings.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, validate_data

from .data import SessionData
from .errors import CapacityError, InvalidArgumentError
from .geometry import generate_random_targets, optimize_targets, pairwise_angle_stats
from .metrics import nearest_target_classify
from .protocol import (
    ExemplarMemory,
    PhaseConfig,
    _rng,
    _MEMORY,
    new_model,
    phase1_pretrain,
    phase2_base_align,
    phase3_incremental,
    prepare_inputs,
)

_DEFAULTS = PhaseConfig()


class OrCoClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot class-incremental classifier with fixed orthogonal targets.

    ``n_targets`` must cover every class that will ever be seen; when None
    it defaults to twice the number of base classes.
    """

    def __init__(
        self,
        n_targets=None,
        output_dim=_DEFAULTS.output_dim,
        encoder_dims=_DEFAULTS.encoder_dims,
        head_hidden=_DEFAULTS.head_hidden,
        alpha=_DEFAULTS.alpha,
        tau=_DEFAULTS.tau,
        tau_o=_DEFAULTS.tau_o,
        lam=_DEFAULTS.lam,
        perturb_distribution="uniform",
        perturb_scope="inc",
        ce_scope="inc",
        use_pscl=True,
        use_ce=True,
        use_orth=True,
        epochs_phase1=_DEFAULTS.epochs_phase1,
        epochs_phase2=_DEFAULTS.epochs_phase2,
        epochs_phase3=_DEFAULTS.epochs_phase3,
        lr_phase1=_DEFAULTS.lr_phase1,
        lr_phase2=_DEFAULTS.lr_phase2,
        lr_phase3=_DEFAULTS.lr_phase3,
        batch_size=_DEFAULTS.batch_size,
        jitter_std=_DEFAULTS.jitter_std,
        assignment_strategy="greedy",
        exemplars_per_class=_DEFAULTS.exemplars_per_class,
        target_epochs=_DEFAULTS.target_epochs,
        random_state=0,
    ):
        self.n_targets = n_targets
        self.output_dim = output_dim
        self.encoder_dims = encoder_dims
        self.head_hidden = head_hidden
        self.alpha = alpha
        self.tau = tau
        self.tau_o = tau_o
        self.lam = lam
        self.perturb_distribution = perturb_distribution
        self.perturb_scope = perturb_scope
        self.ce_scope = ce_scope
        self.use_pscl = use_pscl
        self.use_ce = use_ce
        self.use_orth = use_orth
        self.epochs_phase1 = epochs_phase1
        self.epochs_phase2 = epochs_phase2
        self.epochs_phase3 = epochs_phase3
        self.lr_phase1 = lr_phase1
        self.lr_phase2 = lr_phase2
        self.lr_phase3 = lr_phase3
        self.batch_size = batch_size
        self.jitter_std = jitter_std
        self.assignment_strategy = assignment_strategy
        self.exemplars_per_class = exemplars_per_class
        self.target_epochs = target_epochs
        self.random_state = random_state

    def _config(self) -> PhaseConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return PhaseConfig(
            alpha=self.alpha, tau=self.tau, tau_o=self.tau_o, lam=self.lam,
            perturb_distribution=self.perturb_distribution, perturb_scope=self.perturb_scope,
            ce_scope=self.ce_scope, use_pscl=self.use_pscl, use_ce=self.use_ce, use_orth=self.use_orth,
            epochs_phase1=self.epochs_phase1, epochs_phase2=self.epochs_phase2, epochs_phase3=self.epochs_phase3,
            lr_phase1=self.lr_phase1, lr_phase2=self.lr_phase2, lr_phase3=self.lr_phase3,
            batch_size=self.batch_size, jitter_std=self.jitter_std,
            assignment_strategy=self.assignment_strategy, exemplars_per_class=self.exemplars_per_class,
            target_epochs=self.target_epochs, encoder_dims=tuple(self.encoder_dims),
            head_hidden=self.head_hidden, output_dim=self.output_dim, seed=seed,
        )

    def fit(self, X, y):
        """Base session: pretrain, generate targets, align base classes."""
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        cfg = self._config()
        n_targets = self.n_targets if self.n_targets is not None else 2 * len(self.classes_)
        if n_targets < len(self.classes_):
            raise CapacityError(f"n_targets={n_targets} is below the {len(self.classes_)} base classes")
        x = prepare_inputs(X)
        model = new_model(X.shape[1], cfg)
        model, self.pretrain_trace_ = phase1_pretrain(model, x, y_idx, cfg)
        targets = generate_random_targets(n_targets, cfg.output_dim, int(_rng(cfg.seed, 4).integers(2**63)))
        if cfg.target_epochs:
            targets = optimize_targets(targets, cfg.target_lr, cfg.target_epochs, cfg.tau_o, cfg.target_method)
        model, state = phase2_base_align(model, x, y_idx, targets, cfg)
        memory = ExemplarMemory(cfg.exemplars_per_class, seed=cfg.seed)
        memory.store(x, y_idx, range(len(self.classes_)), _rng(cfg.seed, _MEMORY, 0))
        self.model_, self.targets_, self.state_, self.memory_ = model, targets, state, memory
        self.class_sessions_ = {c: 0 for c in range(len(self.classes_))}
        self.mean_cache_ = {}
        self.n_sessions_ = 0
        return self

    def partial_fit(self, X, y):
        """One incremental session; every label in ``y`` must be new."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        check_classification_targets(y)
        new = np.unique(y)
        if np.isin(new, self.classes_).any():
            raise InvalidArgumentError(f"labels already seen: {new[np.isin(new, self.classes_)].tolist()}")
        offset = len(self.classes_)
        y_idx = offset + np.searchsorted(new, y)
        self.n_sessions_ += 1
        sd = SessionData(self.n_sessions_, tuple(range(offset, offset + len(new))), prepare_inputs(X), y_idx)
        self.model_, self.state_, self.memory_, _ = phase3_incremental(
            self.model_, sd, self.state_, self.memory_, self.targets_, self._config(), self.n_sessions_,
            self.class_sessions_, self.mean_cache_,
        )
        self.classes_ = np.concatenate([self.classes_, new])
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return self.model_.embed(prepare_inputs(X))

    def predict(self, X):
        idx = nearest_target_classify(self.transform(X), self.state_, self.targets_)
        return self.classes_[idx]


class PseudoTargetGenerator(TransformerMixin, BaseEstimator):
    """Optimised pseudo-targets; ``transform`` gives cosine similarity of rows to each target."""

    def __init__(self, n_targets=100, dim=128, lr=1e-2, epochs=2000, tau_o=1.0, method="amsgrad", random_state=0):
        self.n_targets = n_targets
        self.dim = dim
        self.lr = lr
        self.epochs = epochs
        self.tau_o = tau_o
        self.method = method
        self.random_state = random_state

    def fit(self, X=None, y=None):
        seed = 0 if self.random_state is None else int(self.random_state)
        t = generate_random_targets(self.n_targets, self.dim, seed)
        self.targets_ = optimize_targets(t, self.lr, self.epochs, self.tau_o, self.method) if self.epochs else t
        self.angle_stats_ = pairwise_angle_stats(self.targets_)
        return self

    def transform(self, X):
        check_is_fitted(self, "targets_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.dim:
            raise InvalidArgumentError(f"expected {self.dim} features, got {X.shape[1]}")
        return prepare_inputs(X) @ self.targets_.vectors.T
