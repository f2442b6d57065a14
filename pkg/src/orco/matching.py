"""Class-mean to pseudo-target assignment.

Costs are negative cosine similarities; the optimal one-to-one matching is
found with a Kuhn-Munkres (shortest augmenting path) solver. Among optimal
matchings the lexicographically smallest pair list is returned so that ties
(duplicate means, symmetric targets) never depend on floating-point noise.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .batch import FeatureBatch
from .errors import (
    CapacityError,
    DegenerateMeanError,
    InvalidArgumentError,
    ParseError,
)
from .geometry import TargetSet, rng_from_seed


class Strategy(str, enum.Enum):
    GREEDY = "greedy"
    REASSIGNMENT = "reassignment"
    RANDOM = "random"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown assignment strategy {value!r}") from None


@dataclass(frozen=True)
class ClassMeans:
    class_ids: tuple
    means: np.ndarray
    sample_counts: tuple

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("class ids must be unique")
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2:
            means = means.reshape(len(ids), -1) if len(ids) else means.reshape(0, 0)
        if means.shape[0] != len(ids):
            raise InvalidArgumentError(f"{len(ids)} class ids but {means.shape[0]} mean rows")
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sample_counts", tuple(int(c) for c in self.sample_counts))

    def __len__(self):
        return len(self.class_ids)

    def subset(self, class_ids) -> "ClassMeans":
        pos = {c: i for i, c in enumerate(self.class_ids)}
        keep = [pos[int(c)] for c in class_ids]
        return ClassMeans(
            tuple(self.class_ids[i] for i in keep),
            self.means[keep],
            tuple(self.sample_counts[i] for i in keep),
        )


@dataclass(frozen=True)
class Assignment:
    pairs: tuple = ()
    cost: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.pairs)


@dataclass(frozen=True)
class AssignmentState:
    """The class->target map ``assigned`` plus the pool of free target indices."""

    assigned: dict = field(default_factory=dict)
    unassigned: tuple = ()
    history: tuple = ()

    @classmethod
    def initial(cls, n_targets: int) -> "AssignmentState":
        return cls({}, tuple(range(int(n_targets))), ())

    @property
    def n_targets(self) -> int:
        return len(self.assigned) + len(self.unassigned)

    def check(self):
        used = list(self.assigned.values())
        if len(set(used)) != len(used):
            raise InvalidArgumentError("two classes share a target")
        overlap = set(used) & set(self.unassigned)
        if overlap:
            raise InvalidArgumentError(f"targets both assigned and free: {sorted(overlap)}")
        everything = sorted(used + list(self.unassigned))
        if everything != list(range(len(everything))):
            raise InvalidArgumentError("assigned and unassigned targets must partition 0..|T|-1")
        return self

    def target_of(self, class_id) -> int:
        return self.assigned[int(class_id)]

    def class_ids(self) -> list:
        return sorted(self.assigned)


def class_means(batch, labels=None) -> ClassMeans:
    """Per-label arithmetic means renormalised to the sphere, ascending label order."""
    if isinstance(batch, FeatureBatch):
        features, labels = batch.features, batch.labels
    else:
        features = np.asarray(batch, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) == 0:
        raise InvalidArgumentError("class_means needs a non-empty feature matrix")
    ids = np.unique(labels)
    means, counts = [], []
    for c in ids:
        rows = features[labels == c]
        mu = rows.mean(axis=0)
        norm = np.linalg.norm(mu)
        if norm < 1e-12:
            raise DegenerateMeanError(int(c), norm)
        means.append(mu / norm)
        counts.append(len(rows))
    return ClassMeans(tuple(int(c) for c in ids), np.array(means), tuple(counts))


def assignment_cost(means: ClassMeans, targets: TargetSet, candidate_indices) -> np.ndarray:
    """Matrix of ``-cos(mean, target)``, rows = classes, columns = candidate targets."""
    idx = np.asarray(candidate_indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise CapacityError("no candidate targets")
    if idx.size < len(means):
        raise CapacityError(f"{len(means)} classes but only {idx.size} candidate targets")
    return -(means.means @ targets.vectors[idx].T)


def _solve(cost: np.ndarray):
    """Shortest-augmenting-path Kuhn-Munkres on a square matrix.

    Returns (row -> column matching, row potentials u, column potentials v)
    with ``u[i] + v[j] <= cost[i, j]`` and equality on matched pairs.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_owner = np.zeros(n + 1, dtype=np.int64)  # 1-based row matched to column j, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[col_owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[col_owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_optimum(cost, row_to_col, u, v, n_real):
    """Smallest pair list among all optimal matchings, via the tight-edge graph."""
    n = cost.shape[0]
    scale = max(1.0, float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= 1e-9 * scale
    match = row_to_col.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    fixed_rows = np.zeros(n, dtype=bool)
    fixed_cols = np.zeros(n, dtype=bool)

    def reroute(i, j):
        # force row i onto column j; the displaced row r must reach i's old column
        r, target_col = owner[j], match[i]
        parent = {}
        seen_cols = np.zeros(n, dtype=bool)
        seen_cols[j] = True
        seen_cols |= fixed_cols
        queue = deque([r])
        found = None
        while queue and found is None:
            row = queue.popleft()
            for col in np.flatnonzero(tight[row] & ~seen_cols):
                seen_cols[col] = True
                parent[col] = row
                if col == target_col:
                    found = col
                    break
                nxt = owner[col]
                if not fixed_rows[nxt] and nxt != i:
                    queue.append(nxt)
        if found is None:
            return False
        match[i], owner[j] = j, i
        col = found
        while True:
            row = parent[col]
            prev = match[row]
            match[row], owner[col] = col, row
            if row == r:
                break
            col = prev
        return True

    for i in range(n_real):
        for j in np.flatnonzero(tight[i] & ~fixed_cols):
            if match[i] == j or reroute(i, j):
                break
        fixed_rows[i] = True
        fixed_cols[match[i]] = True
    return match


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every row to a distinct column (rows <= columns)."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise InvalidArgumentError("cost must be a matrix")
    rows, cols = c.shape
    if rows == 0:
        return Assignment((), 0.0)
    if rows > cols:
        raise CapacityError(f"{rows} rows cannot be matched into {cols} columns")
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("cost matrix has non-finite entries")
    square = np.zeros((cols, cols))
    square[:rows] = c
    row_to_col, u, v = _solve(square)
    match = _lexicographic_optimum(square, row_to_col, u, v, rows)
    pairs = tuple((i, int(match[i])) for i in range(rows))
    return Assignment(pairs, float(sum(c[i, j] for i, j in pairs)))


def assign_session(
    state: AssignmentState,
    means: ClassMeans,
    targets: TargetSet,
    strategy=Strategy.GREEDY,
    seed: int = 0,
    new_class_ids=None,
) -> AssignmentState:
    """Extend (or, for reassignment, redo) the class->target map for one session.

    For greedy and random strategies ``means`` lists the classes to place.
    For reassignment ``means`` must cover every class already assigned plus
    the new ones; ``new_class_ids`` may restrict which of them count as new
    (default: those not yet assigned).
    """
    strategy = Strategy.parse(strategy)
    if state.n_targets != targets.count:
        raise InvalidArgumentError("assignment state and target set disagree on |T|")
    if strategy is Strategy.REASSIGNMENT:
        missing = set(state.assigned) - set(means.class_ids)
        if missing:
            raise InvalidArgumentError(f"reassignment needs means for classes {sorted(missing)}")
        if len(means) > targets.count:
            raise CapacityError(f"{len(means)} classes but only {targets.count} targets")
        if len(means) == 0:
            return replace(state, history=state.history + (Assignment(),))
        result = hungarian(assignment_cost(means, targets, np.arange(targets.count)))
        pairs = tuple((means.class_ids[r], int(c)) for r, c in result.pairs)
        assigned = dict(pairs)
    else:
        clash = set(means.class_ids) & set(state.assigned)
        if clash:
            raise InvalidArgumentError(f"classes already assigned: {sorted(clash)}")
        pool = np.array(state.unassigned, dtype=np.int64)
        if len(means) > len(pool):
            raise CapacityError(f"{len(means)} new classes but only {len(pool)} unassigned targets")
        if len(means) == 0:
            return replace(state, history=state.history + (Assignment(),))
        if strategy is Strategy.GREEDY:
            result = hungarian(assignment_cost(means, targets, pool))
            pairs = tuple((means.class_ids[r], int(pool[c])) for r, c in result.pairs)
        else:
            picks = rng_from_seed(seed).permutation(pool)[: len(means)]
            pairs = tuple((cid, int(t)) for cid, t in zip(means.class_ids, picks))
        assigned = dict(state.assigned)
        assigned.update(pairs)
    cost = float(sum(-(means.means[means.class_ids.index(c)] @ targets.vectors[t]) for c, t in pairs))
    used = set(assigned.values())
    unassigned = tuple(i for i in range(targets.count) if i not in used)
    return AssignmentState(assigned, unassigned, state.history + (Assignment(pairs, cost),)).check()


def save_assignment(state: AssignmentState, path) -> None:
    lines = [f"class {c} -> target {t}" for c, t in sorted(state.assigned.items())]
    lines.append("unassigned: " + " ".join(str(i) for i in state.unassigned))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_assignment(path) -> AssignmentState:
    assigned, unassigned = {}, None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "unassigned:":
            try:
                unassigned = tuple(int(x) for x in parts[1:])
            except ValueError:
                raise ParseError("bad unassigned index", line=lineno) from None
        elif len(parts) == 5 and parts[0] == "class" and parts[2] == "->" and parts[3] == "target":
            try:
                assigned[int(parts[1])] = int(parts[4])
            except ValueError:
                raise ParseError("bad class or target index", line=lineno) from None
        else:
            raise ParseError(f"unrecognised line {line!r}", line=lineno)
    if unassigned is None:
        raise ParseError("missing 'unassigned:' line")
    try:
        return AssignmentState(assigned, unassigned, ()).check()
    except InvalidArgumentError as exc:
        raise ParseError(str(exc)) from None
