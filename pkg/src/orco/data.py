"""Synthetic Gaussian-cluster features, feature-space views and FSCIL splits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, GenerationFailureError, InvalidArgumentError, ParseError
from .geometry import normalize_rows, rng_from_seed

_HEADER = "orco-features v1"


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 19
    dim: int = 64
    cluster_std: float = 0.15
    samples_per_class_train: int = 100
    samples_per_class_val: int = 50
    separation: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidArgumentError("num_classes must be >= 2")
        if self.dim < 2:
            raise InvalidArgumentError("dim must be >= 2")
        if self.cluster_std < 0:
            raise InvalidArgumentError("cluster_std must be non-negative")
        if self.samples_per_class_train < 1 or self.samples_per_class_val < 1:
            raise InvalidArgumentError("each class needs at least one train and one val sample")
        if not 0 < self.separation <= 180:
            raise InvalidArgumentError("separation must lie in (0, 180] degrees")


@dataclass(frozen=True)
class FeatureDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    centers: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        xt, xv = np.asarray(self.x_train, np.float64), np.asarray(self.x_val, np.float64)
        yt, yv = np.asarray(self.y_train, np.int64), np.asarray(self.y_val, np.int64)
        if xt.ndim != 2 or xv.ndim != 2 or xt.shape[1] != xv.shape[1]:
            raise InvalidArgumentError("train and val features must be matrices of equal width")
        if len(xt) != len(yt) or len(xv) != len(yv):
            raise InvalidArgumentError("feature and label counts differ")
        classes = np.unique(yt)
        if not np.array_equal(classes, np.unique(yv)):
            raise InvalidArgumentError("every class must appear in both splits")
        if not np.array_equal(classes, np.arange(len(classes))):
            raise InvalidArgumentError("class ids must be contiguous from 0")
        for name, val in (("x_train", xt), ("y_train", yt), ("x_val", xv), ("y_val", yv)):
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.y_train)

    def val_for(self, classes):
        keep = np.isin(self.y_val, list(classes))
        return self.x_val[keep], self.y_val[keep]


@dataclass(frozen=True)
class SessionData:
    session: int
    classes: tuple
    x: np.ndarray
    y: np.ndarray


def _sample_centers(rng, n, dim, separation_deg, max_retries=10_000):
    cos_max = math.cos(math.radians(separation_deg))
    centers = []
    retries = 0
    while len(centers) < n:
        c = rng.standard_normal(dim)
        c /= np.linalg.norm(c)
        if not centers or np.max(np.array(centers) @ c) <= cos_max:
            centers.append(c)
        else:
            retries += 1
            if retries > max_retries:
                raise GenerationFailureError(
                    f"could not place {n} centers {separation_deg} degrees apart in {dim} dimensions"
                )
    return np.array(centers)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> FeatureDataset:
    """Gaussian clusters around unit-norm centers with a minimum pairwise angle."""
    rng = rng_from_seed(spec.seed)
    centers = _sample_centers(rng, spec.num_classes, spec.dim, spec.separation)

    def draw(per_class):
        y = np.repeat(np.arange(spec.num_classes), per_class)
        x = centers[y] + spec.cluster_std * rng.standard_normal((len(y), spec.dim))
        return x, y

    x_train, y_train = draw(spec.samples_per_class_train)
    x_val, y_val = draw(spec.samples_per_class_val)
    return FeatureDataset(x_train, y_train, x_val, y_val, centers=centers)


def augment_view(features, jitter_std: float, seed) -> np.ndarray:
    """Per-coordinate Gaussian jitter followed by renormalisation; identity at zero jitter."""
    if jitter_std < 0:
        raise InvalidArgumentError("jitter_std must be non-negative")
    x = np.asarray(features, dtype=np.float64)
    if jitter_std == 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else rng_from_seed(seed)
    return normalize_rows(x + jitter_std * rng.standard_normal(x.shape))


def partition_fscil(dataset: FeatureDataset, plan, seed=0) -> list:
    """Split training data into a base session plus ``plan.sessions`` K-shot sessions.

    Session 0 owns classes ``0..C0-1`` with all their samples; session i owns
    the next ``ways`` classes with ``shots`` samples each drawn without
    replacement.
    """
    total = plan.base_classes + plan.sessions * plan.ways
    if len(dataset.classes) < total:
        raise CapacityError(f"plan needs {total} classes, dataset has {len(dataset.classes)}")
    rng = rng_from_seed(seed)
    base = tuple(range(plan.base_classes))
    keep = np.isin(dataset.y_train, base)
    out = [SessionData(0, base, dataset.x_train[keep], dataset.y_train[keep])]
    for i in range(1, plan.sessions + 1):
        start = plan.base_classes + (i - 1) * plan.ways
        classes = tuple(range(start, start + plan.ways))
        xs, ys = [], []
        for c in classes:
            rows = np.flatnonzero(dataset.y_train == c)
            if len(rows) < plan.shots:
                raise CapacityError(f"class {c} has {len(rows)} training samples, need {plan.shots}")
            pick = np.sort(rng.choice(rows, size=plan.shots, replace=False))
            xs.append(dataset.x_train[pick])
            ys.append(dataset.y_train[pick])
        out.append(SessionData(i, classes, np.vstack(xs), np.concatenate(ys)))
    return out


def save_feature_file(dataset: FeatureDataset, path) -> None:
    lines = [f"{_HEADER} dim={dataset.dim} classes={len(dataset.classes)}"]
    for split, x, y in (("train", dataset.x_train, dataset.y_train), ("val", dataset.x_val, dataset.y_val)):
        for row, label in zip(x, y):
            lines.append(f"{split} {int(label)} " + " ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_feature_file(path) -> FeatureDataset:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise ParseError("empty feature file", line=1)
    header = lines[0].split()
    if " ".join(header[:2]) != _HEADER or len(header) != 4:
        raise ParseError(f"expected header '{_HEADER} dim=<d> classes=<c>'", line=1)
    fields = {}
    for token in header[2:]:
        key, _, value = token.partition("=")
        try:
            fields[key] = int(value)
        except ValueError:
            raise ParseError(f"bad header field {token!r}", line=1) from None
    if set(fields) != {"dim", "classes"}:
        raise ParseError("header needs dim and classes", line=1)
    dim = fields["dim"]
    data = {"train": ([], []), "val": ([], [])}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != dim + 2:
            raise ParseError(f"expected {dim + 2} fields, got {len(parts)}", line=lineno)
        if parts[0] not in data:
            raise ParseError(f"unknown split {parts[0]!r}", line=lineno)
        try:
            label = int(parts[1])
            row = [float(v) for v in parts[2:]]
        except ValueError:
            raise ParseError("malformed label or value", line=lineno) from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError("non-finite value", line=lineno)
        data[parts[0]][0].append(row)
        data[parts[0]][1].append(label)
    if not data["train"][0] or not data["val"][0]:
        raise ParseError("file needs both train and val rows")
    try:
        ds = FeatureDataset(
            np.array(data["train"][0]), np.array(data["train"][1]),
            np.array(data["val"][0]), np.array(data["val"][1]),
        )
    except InvalidArgumentError as exc:
        raise ParseError(str(exc)) from None
    if len(ds.classes) != fields["classes"]:
        raise ParseError(f"header declares {fields['classes']} classes, found {len(ds.classes)}")
    return ds
