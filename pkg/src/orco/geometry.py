"""Pseudo-target generation and auditing on the unit hypersphere.

Targets are fixed unit vectors that later serve as class anchors. They are
drawn from an isotropic Gaussian, pushed apart by minimising a log-sum-exp
repulsion energy, and optionally jittered to build perturbed copies.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError, ParseError

NORM_TOL = 1e-9
_HEADER = "orco-targets v1"


def rng_from_seed(seed) -> np.random.Generator:
    """Generator for any (possibly negative) 64-bit integer seed."""
    return np.random.default_rng(int(seed) % 2**64)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class Distribution(str, enum.Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "Distribution":
        if isinstance(value, cls):
            return value
        aliases = {"u": "uniform", "n": "gaussian", "normal": "gaussian", "w/o": "none"}
        key = str(value).strip().lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InvalidArgumentError(f"unknown perturbation distribution {value!r}") from None


@dataclass(frozen=True)
class TargetSet:
    vectors: np.ndarray
    seed: int = 0

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidArgumentError(f"targets must be a non-empty matrix, got shape {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if not np.all(np.abs(norms - 1.0) <= NORM_TOL):
            raise InvalidArgumentError("every target row must have unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.count


@dataclass(frozen=True)
class PerturbedTargets:
    base_index: np.ndarray
    vectors: np.ndarray
    lam: float
    distribution: Distribution

    def __len__(self):
        return len(self.base_index)

    @classmethod
    def empty(cls, dim: int, distribution=Distribution.NONE) -> "PerturbedTargets":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, dim)), 0.0, Distribution.parse(distribution))


@dataclass(frozen=True)
class AngleStats:
    mean_deg: float
    min_deg: float
    max_deg: float
    mean_abs_cos: float
    max_abs_cos: float
    pair_count: int


@dataclass
class OptimizationTrace:
    losses: list = field(default_factory=list)


def _as_matrix(targets) -> np.ndarray:
    if isinstance(targets, TargetSet):
        return targets.vectors
    return np.asarray(targets, dtype=np.float64)


def generate_random_targets(count: int, dim: int, seed: int = 0) -> TargetSet:
    """Sample ``count`` standard-normal vectors in R^dim and project them to the sphere."""
    if int(count) < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    if int(dim) < 2:
        raise InvalidArgumentError(f"dim must be >= 2, got {dim}")
    raw = rng_from_seed(seed).standard_normal((int(count), int(dim)))
    return TargetSet(normalize_rows(raw), seed=int(seed))


def _softmax_rows(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    return e / s, (m + np.log(s))[:, 0]


def target_generation_loss(targets, tau_o: float = 1.0) -> float:
    """Mean over rows of ``log sum_j exp(t_i . t_j / tau_o)``, self-pair included.

    Accepts a :class:`TargetSet` or any matrix (the orthogonality loss reuses
    this on unnormalised class means).
    """
    if tau_o <= 0:
        raise InvalidArgumentError("tau_o must be positive")
    v = _as_matrix(targets)
    _, lse = _softmax_rows(v @ v.T / tau_o)
    return float(lse.mean())


def target_generation_grad(targets, tau_o: float = 1.0) -> np.ndarray:
    """Euclidean gradient of :func:`target_generation_loss` w.r.t. each row."""
    if tau_o <= 0:
        raise InvalidArgumentError("tau_o must be positive")
    v = _as_matrix(targets)
    p, _ = _softmax_rows(v @ v.T / tau_o)
    return (p + p.T) @ v / (tau_o * v.shape[0])


def optimize_targets(
    targets: TargetSet,
    lr: float = 1e-2,
    epochs: int = 2000,
    tau_o: float = 1.0,
    method: str = "amsgrad",
    trace: OptimizationTrace | None = None,
) -> TargetSet:
    """Minimise the target-generation loss, re-projecting rows to the sphere each step.

    ``method="sgd"`` is plain gradient descent. ``method="amsgrad"`` (default)
    uses AMSGrad moment estimates of the tangential gradient, which makes ``lr``
    an approximately scale-free per-coordinate step; plain descent at
    ``lr=1e-2`` barely moves 100 targets in 128 dimensions because the mean
    reduction shrinks the gradient by ``1/count``.

    If ``trace`` is given, the loss before the first step and after every
    step is appended to ``trace.losses``.
    """
    if lr <= 0:
        raise InvalidArgumentError("lr must be positive")
    if int(epochs) < 1:
        raise InvalidArgumentError("epochs must be >= 1")
    if tau_o <= 0:
        raise InvalidArgumentError("tau_o must be positive")
    if method not in ("sgd", "amsgrad"):
        raise InvalidArgumentError(f"unknown method {method!r}")

    v = targets.vectors.copy()
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(v)
    s = np.zeros_like(v)
    s_max = np.zeros_like(v)

    def record(epoch):
        loss = target_generation_loss(v, tau_o)
        if not math.isfinite(loss):
            raise NumericalFailureError(f"non-finite target loss at epoch {epoch}", epoch=epoch)
        if trace is not None:
            trace.losses.append(loss)

    record(0)
    for epoch in range(1, int(epochs) + 1):
        g = target_generation_grad(v, tau_o)
        if method == "sgd":
            v = v - lr * g
        else:
            g = g - np.sum(g * v, axis=1, keepdims=True) * v
            m = beta1 * m + (1 - beta1) * g
            s = beta2 * s + (1 - beta2) * g * g
            s_max = np.maximum(s_max, s / (1 - beta2**epoch))
            v = v - lr * (m / (1 - beta1**epoch)) / (np.sqrt(s_max) + eps)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if not np.all(np.isfinite(norms)) or np.any(norms == 0):
            raise NumericalFailureError(f"degenerate target row at epoch {epoch}", epoch=epoch)
        v = v / norms
        record(epoch)
    return TargetSet(v, seed=targets.seed)


def pairwise_angle_stats(targets) -> AngleStats:
    v = _as_matrix(targets)
    n = v.shape[0]
    if n < 2:
        raise InvalidArgumentError("angle statistics need at least two vectors")
    iu = np.triu_indices(n, k=1)
    cos = np.clip((v @ v.T)[iu], -1.0, 1.0)
    deg = np.degrees(np.arccos(cos))
    return AngleStats(
        mean_deg=float(deg.mean()),
        min_deg=float(deg.min()),
        max_deg=float(deg.max()),
        mean_abs_cos=float(np.abs(cos).mean()),
        max_abs_cos=float(np.abs(cos).max()),
        pair_count=int(len(cos)),
    )


def perturb_targets(
    targets: TargetSet,
    indices,
    lam: float,
    distribution=Distribution.UNIFORM,
    seed: int = 0,
    samples_per_target: int = 1,
) -> PerturbedTargets:
    """Draw noisy copies ``t + noise`` of the selected targets, renormalised.

    Noise is per coordinate: U(-lam, lam) or N(0, lam^2). Output rows are
    grouped by index, ``samples_per_target`` consecutive rows each.
    """
    distribution = Distribution.parse(distribution)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if lam < 0:
        raise InvalidArgumentError("lambda must be non-negative")
    if int(samples_per_target) < 1:
        raise InvalidArgumentError("samples_per_target must be >= 1")
    if idx.size and (idx.min() < 0 or idx.max() >= targets.count):
        raise InvalidArgumentError(f"target index out of range [0, {targets.count})")
    base = np.repeat(idx, int(samples_per_target))
    vectors = targets.vectors[base].copy()
    if distribution is Distribution.NONE or lam == 0:
        return PerturbedTargets(base, vectors, float(lam), distribution)
    rng = rng_from_seed(seed)
    if distribution is Distribution.UNIFORM:
        noise = rng.uniform(-lam, lam, size=vectors.shape)
    else:
        noise = rng.normal(0.0, lam, size=vectors.shape)
    return PerturbedTargets(base, normalize_rows(vectors + noise), float(lam), distribution)


def save_targets(targets: TargetSet, path) -> None:
    lines = [f"{_HEADER} count={targets.count} dim={targets.dim} seed={targets.seed}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in targets.vectors]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str, magic: str, keys) -> dict:
    if not line.startswith(magic):
        raise ParseError(f"expected header starting with {magic!r}", line=1)
    fields = {}
    for token in line[len(magic):].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseError(f"malformed header token {token!r}", line=1)
        try:
            fields[key] = int(value)
        except ValueError:
            raise ParseError(f"header field {key} is not an integer", line=1) from None
    missing = [k for k in keys if k not in fields]
    if missing:
        raise ParseError(f"header missing {missing}", line=1)
    return fields


def load_targets(path) -> TargetSet:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty targets file", line=1)
    hdr = _parse_header(lines[0], _HEADER, ("count", "dim", "seed"))
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(x) for x in line.split()]
        except ValueError:
            raise ParseError("non-numeric value", line=lineno) from None
        if len(row) != hdr["dim"]:
            raise ParseError(f"expected {hdr['dim']} values, got {len(row)}", line=lineno)
        if not all(math.isfinite(x) for x in row):
            raise ParseError("non-finite value", line=lineno)
        rows.append(row)
    if len(rows) != hdr["count"]:
        raise ParseError(f"expected {hdr['count']} rows, got {len(rows)}")
    return TargetSet(np.array(rows), seed=hdr["seed"])
