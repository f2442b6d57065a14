"""Accuracy decompositions, harmonic means and embedding diagnostics.

All accuracies are percentages. Quantities that are undefined for a session
(incremental accuracy in session 0, similarity to free targets once every
target is assigned) are reported as NaN.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .batch import FeatureBatch
from .errors import InvalidArgumentError, InvalidStateError
from .matching import AssignmentState, ClassMeans

REPORT_COLUMNS = ("session", "acc_base", "acc_inc", "acc_overall", "hm", "fp_inc", "sim_cls", "sim_cls_to_target")


@dataclass
class SessionReport:
    session_index: int
    acc_base: float
    acc_inc: float
    acc_overall: float
    hm: float
    n_base: int = 0
    n_inc: int = 0
    per_class_acc: dict = field(default_factory=dict)
    confusion_by_group: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = self.diagnostics
        return {
            "session": self.session_index,
            "acc_base": self.acc_base,
            "acc_inc": self.acc_inc,
            "acc_overall": self.acc_overall,
            "hm": self.hm,
            "fp_inc": d.get("fp_inc", math.nan),
            "sim_cls": d.get("sim_cls", math.nan),
            "sim_cls_to_target": d.get("sim_cls_to_target", math.nan),
            "fp_inc_excl_base": d.get("fp_inc_excl_base", math.nan),
        }


@dataclass
class RunSummary:
    reports: list
    ahm: float
    aacc: float
    base_decay: float
    performance_decay: float

    @property
    def final(self) -> SessionReport:
        return self.reports[-1]

    def mean_diagnostic(self, key: str) -> float:
        """Mean of a diagnostic over the sessions where it is defined."""
        vals = [r.diagnostics.get(key, math.nan) for r in self.reports]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


def _features(features) -> np.ndarray:
    return features.features if isinstance(features, FeatureBatch) else np.asarray(features, np.float64)


def nearest_target_classify(features, state: AssignmentState, targets) -> np.ndarray:
    """Label of the most cosine-similar assigned target; ties go to the smaller class id."""
    if not state.assigned:
        raise InvalidStateError("no class has an assigned target")
    f = _features(features)
    classes = np.array(sorted(state.assigned), dtype=np.int64)
    t = targets.vectors[[state.assigned[int(c)] for c in classes]]
    f_norm = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-300)
    return classes[np.argmax(f_norm @ t.T, axis=1)]


def harmonic_mean(acc_base: float, acc_inc: float) -> float:
    """``2ab / (a + b)``; defined as 0 when both accuracies are 0."""
    for v in (acc_base, acc_inc):
        if not 0.0 <= v <= 100.0:
            raise InvalidArgumentError(f"accuracy {v} outside [0, 100]")
    if acc_base + acc_inc == 0:
        return 0.0
    return 2.0 * acc_base * acc_inc / (acc_base + acc_inc)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(labels) == 0:
        return math.nan
    return 100.0 * float(np.mean(predictions == labels))


def fp_inc(predictions, labels, base_class_set, exclude_base_predictions: bool = False) -> float:
    """Share of incremental-class samples predicted as a *different* incremental class.

    The denominator is every incremental-class sample, or with
    ``exclude_base_predictions`` only those predicted as some incremental class.
    """
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    base = np.array(sorted(base_class_set))
    inc = ~np.isin(labels, base)
    if not inc.any():
        raise InvalidArgumentError("no incremental-class samples")
    pred_inc = ~np.isin(predictions[inc], base)
    wrong = pred_inc & (predictions[inc] != labels[inc])
    denom = pred_inc.sum() if exclude_base_predictions else inc.sum()
    if denom == 0:
        return 0.0
    return 100.0 * float(wrong.sum()) / float(denom)


def sim_cls(class_means: ClassMeans) -> float:
    """Mean cosine similarity over all unordered pairs of class means."""
    m = np.asarray(class_means.means)
    if len(m) < 2:
        raise InvalidArgumentError("sim_cls needs at least two classes")
    m = m / np.linalg.norm(m, axis=1, keepdims=True)
    return float((m @ m.T)[np.triu_indices(len(m), k=1)].mean())


def sim_cls_to_target(features, state: AssignmentState, targets) -> float:
    """Mean cosine similarity between every feature and every unassigned target."""
    if not state.unassigned:
        raise InvalidArgumentError("no unassigned targets")
    f = _features(features)
    if len(f) == 0:
        raise InvalidArgumentError("no features")
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    return float((f @ targets.vectors[list(state.unassigned)].T).mean())


def decay_metrics(reports) -> tuple:
    """(base accuracy drop, overall accuracy drop) from the first to the last report."""
    if len(reports) < 2:
        raise InvalidArgumentError("decay needs at least two reports")
    first, last = reports[0], reports[-1]
    return first.acc_base - last.acc_base, first.acc_overall - last.acc_overall


def session_group(class_id: int, plan) -> int:
    if class_id < 0 or class_id >= plan.total_classes:
        raise InvalidArgumentError(f"class {class_id} is outside the plan")
    if class_id < plan.base_classes:
        return 0
    return 1 + (class_id - plan.base_classes) // plan.ways


def confusion_by_group(predictions, labels, plan) -> np.ndarray:
    """Counts with rows = true session group and columns = predicted session group."""
    k = plan.sessions + 1
    mat = np.zeros((k, k), dtype=np.int64)
    for p, y in zip(np.asarray(predictions), np.asarray(labels)):
        mat[session_group(int(y), plan), session_group(int(p), plan)] += 1
    return mat


def summarize(reports) -> RunSummary:
    reports = list(reports)
    inc = [r.hm for r in reports if r.session_index >= 1]
    ahm = float(np.mean(inc)) if inc else math.nan
    aacc = float(np.mean([r.acc_overall for r in reports]))
    if len(reports) >= 2:
        base_decay, perf_decay = decay_metrics(reports)
    else:
        base_decay = perf_decay = math.nan
    return RunSummary(reports, ahm, aacc, base_decay, perf_decay)


def _fmt(v, digits=2) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.{digits}f}"


_SIMILARITY_COLUMNS = ("sim_cls", "sim_cls_to_target")


def write_report_csv(reports, path) -> None:
    """One row per session; percentages with 2 decimals, cosine similarities with 4.

    ``fp_inc`` counts every incremental sample in its denominator; the
    trailing ``fp_inc_excl_base`` column is the variant whose denominator
    drops samples predicted as base classes.
    """
    cols = REPORT_COLUMNS + ("fp_inc_excl_base",)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in reports:
            row = r.row()
            writer.writerow([row["session"]] + [_fmt(row[c], 4 if c in _SIMILARITY_COLUMNS else 2) for c in cols[1:]])


def write_confusion_csv(matrix, path) -> None:
    k = len(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true_group"] + [f"pred_{j}" for j in range(k)])
        for i, row in enumerate(matrix):
            writer.writerow([i] + [int(v) for v in row])


def write_summary_csv(summary: RunSummary, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for key in ("ahm", "aacc", "base_decay", "performance_decay"):
            writer.writerow([key, _fmt(getattr(summary, key))])
