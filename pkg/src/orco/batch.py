from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

NORM_TOL = 1e-9


@dataclass(frozen=True)
class FeatureBatch:
    """Embedding rows with labels, augmentation-view ids and session tags.

    Row norms are not enforced here so that finite-difference probes can
    perturb features; call :meth:`check_unit_norm` where unit norm is a
    precondition.
    """

    features: np.ndarray
    labels: np.ndarray
    view_ids: np.ndarray | None = None
    session_tags: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise InvalidArgumentError(f"features must be a non-empty matrix, got shape {f.shape}")
        b = f.shape[0]
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        views = np.zeros(b, np.int64) if self.view_ids is None else np.asarray(self.view_ids, np.int64)
        tags = np.zeros(b, np.int64) if self.session_tags is None else np.asarray(self.session_tags, np.int64)
        for name, arr in (("labels", labels), ("view_ids", views), ("session_tags", tags)):
            if arr.shape != (b,):
                raise InvalidArgumentError(f"{name} must have length {b}")
        if not np.all((views == 0) | (views == 1)):
            raise InvalidArgumentError("view_ids must be 0 or 1")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "view_ids", views)
        object.__setattr__(self, "session_tags", tags)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, features) -> "FeatureBatch":
        return FeatureBatch(features, self.labels, self.view_ids, self.session_tags)

    def check_unit_norm(self, tol: float = NORM_TOL) -> "FeatureBatch":
        norms = np.linalg.norm(self.features, axis=1)
        if not np.all(np.abs(norms - 1.0) <= tol):
            raise InvalidArgumentError("feature rows must have unit norm")
        return self
