"""Comparison outlier factors for transaction databases: FPOF, kappa-LOF, CNB.

All three operate on the same role-pooled process-cluster databases as
Krimp.  Direction differs: FPOF is low for outliers, the other two high.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import UsageError

log = logging.getLogger(__name__)

Items = tuple[str, ...]

# kappa-LOF score when t shares no closed-walk mass with any other vertex
UNDEFINED_SCORE = math.inf


@dataclass(frozen=True)
class FpofParams:
    s0: int = 3

    def __post_init__(self):
        if self.s0 < 1:
            raise UsageError(f"s0 must be >= 1, got {self.s0}")


@dataclass(frozen=True)
class KappaLofParams:
    kappa: int = 2

    def __post_init__(self):
        if self.kappa < 1:
            raise UsageError(f"kappa must be >= 1, got {self.kappa}")


@dataclass(frozen=True)
class CnbParams:
    theta: float = 0.25
    k: int = 2

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise UsageError(f"theta must lie in (0, 1], got {self.theta}")
        if self.k < 1:
            raise UsageError(f"k must be >= 1, got {self.k}")


def _substrings(t: Items) -> set[Items]:
    n = len(t)
    return {t[i:j] for i in range(n) for j in range(i + 1, n + 1)}


def _counter(database: Iterable[Sequence[str]]) -> Counter:
    db = Counter(tuple(t) for t in database)
    if not db:
        raise UsageError("database is empty")
    return db


# ----------------------------------------------------------------------- FPOF


class FpofModel:
    """Frequent contiguous patterns of a database, ready to score transactions."""

    def __init__(self, database: Iterable[Sequence[str]], params: FpofParams = FpofParams()):
        db = _counter(database)
        self.n = sum(db.values())
        counts: Counter = Counter()
        for t, mult in db.items():
            for x in _substrings(t):
                counts[x] += mult
        self.support = {x: c / self.n for x, c in counts.items() if c >= params.s0}
        if not self.support:
            log.warning("no pattern reaches support %d; FPOF is 0 everywhere", params.s0)

    @property
    def empty(self) -> bool:
        return not self.support

    def score(self, t: Sequence[str]) -> float:
        if not self.support:
            return 0.0
        hits = sum(self.support.get(x, 0.0) for x in sorted(_substrings(tuple(t))))
        return hits / len(self.support)


def fpof(t: Sequence[str], database: Iterable[Sequence[str]], params: FpofParams = FpofParams()) -> float:
    """Share of frequent-pattern support carried by ``t``; small means outlying."""
    return FpofModel(database, params).score(t)


# ------------------------------------------------------------------ kappa-LOF


def positional_weight(a: Sequence[str], b: Sequence[str]) -> float:
    """Positionwise equal items over the shorter length, relative to the longer."""
    longer = max(len(a), len(b))
    if longer == 0:
        return 0.0
    return sum(x == y for x, y in zip(a, b)) / longer


class KappaLofModel:
    """Closed-walk similarity over the database graph with ``t`` added as a vertex.

    The graph is complete with self-loops.  Identical transactions are
    folded into one type with a multiplicity, so the walk sums only need the
    type-level weight matrix, which is built once per database.
    """

    def __init__(self, database: Iterable[Sequence[str]], params: KappaLofParams = KappaLofParams()):
        db = _counter(database)
        self.kappa = params.kappa
        self.types = sorted(db)
        self.mult = np.array([db[t] for t in self.types], dtype=float)
        n = len(self.types)
        w = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                w[i, j] = w[j, i] = positional_weight(self.types[i], self.types[j])
        self.weights = w

    def walk_sums(self, t: Sequence[str]) -> tuple[np.ndarray, float]:
        """S(t, v) for one vertex v of each database type, and S(t, t)."""
        t = tuple(t)
        n = len(self.types)
        w = np.empty((n + 1, n + 1))
        w[:n, :n] = self.weights
        row = np.array([positional_weight(t, u) for u in self.types] + [positional_weight(t, t)])
        w[n, :] = row
        w[:, n] = row
        mult = np.append(self.mult, 1.0)
        # walk counts from t of length i: s_i = s_{i-1} diag(mult) W, s_1 = W[t]
        s = row.copy()
        total = s.copy()
        for _ in range(1, self.kappa):
            s = (s * mult) @ w
            total += s
        return total[:n], float(total[n])

    def score(self, t: Sequence[str]) -> float:
        to_others, to_self = self.walk_sums(t)
        positive = to_others > 0
        if to_self <= 0 or not positive.any():
            log.info("kappa-LOF undefined for %r: no closed-walk neighbors", tuple(t))
            return UNDEFINED_SCORE
        m = self.mult[positive]
        return float(np.dot(to_others[positive], m) / m.sum() / to_self)


def kappa_lof(t: Sequence[str], database: Iterable[Sequence[str]],
              params: KappaLofParams = KappaLofParams()) -> float:
    """Mean walk similarity of ``t`` to its walk-reachable vertices over its self-similarity.

    Returns :data:`UNDEFINED_SCORE` when ``t`` reaches nothing.
    """
    return KappaLofModel(database, params).score(t)


# ------------------------------------------------------------------------ CNB


def longest_common_substrings(a: Sequence[str], b: Sequence[str]) -> list[Items]:
    """All distinct maximal-length common contiguous subsequences."""
    a, b = tuple(a), tuple(b)
    best = 0
    found: set[Items] = set()
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
                if cur[j] > best:
                    best, found = cur[j], set()
                if cur[j] == best:
                    found.add(a[i - best:i])
        prev = cur
    return sorted(found) if best else []


def cnb_similarity(a: Sequence[str], b: Sequence[str]) -> float:
    longer = max(len(a), len(b))
    common = longest_common_substrings(a, b)
    if not common or longer == 0:
        return 0.0
    return sum(map(len, common)) / len(common) / longer


class CnbModel:
    """Common-neighbor distances of new transactions to a fixed database."""

    def __init__(self, database: Iterable[Sequence[str]], params: CnbParams = CnbParams()):
        db = _counter(database)
        self.size = sum(db.values())
        if self.size < 2:
            raise UsageError("CNB needs at least two transactions")
        self.params = params
        self.types = sorted(db)
        self.mult = np.array([db[t] for t in self.types], dtype=float)
        n = len(self.types)
        near = np.zeros((n, n), dtype=bool)
        for i in range(n):
            for j in range(i, n):
                near[i, j] = near[j, i] = cnb_similarity(self.types[i], self.types[j]) > params.theta
        self.near = near

    def distances(self, t: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Distance from ``t`` to each database type, with the type multiplicities."""
        t = tuple(t)
        mine = np.array([cnb_similarity(t, u) > self.params.theta for u in self.types])
        shared = (self.near & mine) @ self.mult
        with np.errstate(divide="ignore"):
            d = 1.0 - np.log2(shared) / math.log2(self.size)
        d[shared == 0] = 1.0
        return d, self.mult

    def score(self, t: Sequence[str]) -> float:
        d, mult = self.distances(t)
        order = np.argsort(d, kind="stable")
        remaining = self.params.k
        total = 0.0
        for i in order:
            take = min(remaining, int(mult[i]))
            total += take * d[i]
            remaining -= take
            if remaining == 0:
                break
        return float(total)


def cnb_score(t: Sequence[str], database: Iterable[Sequence[str]], params: CnbParams = CnbParams()) -> float:
    """Sum of the ``k`` smallest common-neighbor distances from ``t``; large is outlying."""
    return CnbModel(database, params).score(t)


# ---------------------------------------------------------------- grid search


@dataclass(frozen=True)
class EvalCase:
    """One role's reference database and its labeled test transactions."""

    database: tuple[Items, ...]
    transactions: tuple[Items, ...]
    labels: tuple[bool, ...]  # True = anomalous


@dataclass
class GridResult:
    best: object
    best_auc: float
    table: list[tuple[object, float]] = field(default_factory=list)


_MODELS = {
    "fpof": (FpofModel, -1),
    "kappa-lof": (KappaLofModel, 1),
    "cnb": (CnbModel, 1),
}


def baseline_direction(method: str) -> int:
    return _MODELS[method][1]


def score_cases(method: str, cases: Sequence[EvalCase], params) -> tuple[list[float], list[bool]]:
    if method not in _MODELS:
        raise UsageError(f"unknown baseline {method!r}")
    factory = _MODELS[method][0]
    scores, labels = [], []
    for case in cases:
        model = factory(case.database, params)
        scores.extend(model.score(t) for t in case.transactions)
        labels.extend(case.labels)
    return scores, labels


def grid_search(method: str, cases: Sequence[EvalCase], param_grid: Sequence) -> GridResult:
    """Score every case under each parameter set; keep the first set with the best AUC."""
    from .evaluation import roc_auc

    if not param_grid:
        raise UsageError("empty parameter grid")
    direction = baseline_direction(method)
    table = []
    for params in param_grid:
        scores, labels = score_cases(method, cases, params)
        table.append((params, roc_auc(scores, labels, direction).auc))
    best, best_auc = max(table, key=lambda pa: pa[1])
    return GridResult(best, best_auc, table)


def default_grid(method: str) -> list:
    if method == "fpof":
        return [FpofParams(s) for s in (1, 2, 3, 4, 5)]
    if method == "kappa-lof":
        return [KappaLofParams(k) for k in (1, 2, 3)]
    if method == "cnb":
        return [CnbParams(th, k) for th, k in itertools.product((0.1, 0.25, 0.5, 0.75), (1, 2, 3))]
    raise UsageError(f"unknown baseline {method!r}")


def format_params(params) -> str:
    return ";".join(f"{k}={v}" for k, v in vars(params).items())


def write_scores(rows: Iterable[tuple[str, str, float]], stream: TextIO) -> None:
    stream.write("method,transaction_id,score\n")
    for method, tid, score in rows:
        stream.write(f"{method},{tid},{score!r}\n")


def write_grid(method: str, result: GridResult, stream: TextIO) -> None:
    stream.write("method,params,auc\n")
    for params, auc in result.table:
        stream.write(f"{method},{format_params(params)},{auc!r}\n")
