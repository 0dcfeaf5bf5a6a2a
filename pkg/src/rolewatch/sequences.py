"""Process time series between a subject and its peers.

Two segmentations are provided: fixed-length stide windows (the baseline)
and temporally dense process clusters found by one-dimensional DBSCAN.
Samples are scored by how often they occur in a role-pooled database.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence, TextIO

import numpy as np

from .errors import UndefinedScoreError
from .ingest import ConnectionRecord

log = logging.getLogger(__name__)

DEFAULT_STIDE_K = 6
DEFAULT_MIN_PTS = 2
DEFAULT_FALLBACK_EPSILON = 2.0


@dataclass(frozen=True, order=True)
class ProcessEvent:
    timestamp: float
    port: int
    process: str
    peer: str = ""


@dataclass(frozen=True)
class ProcessCluster:
    processes: tuple[str, ...]
    start: float
    end: float
    peer: str = ""
    role: int | None = None

    def __post_init__(self):
        if not self.processes:
            raise ValueError("a process cluster needs at least one process")
        if self.end < self.start:
            raise ValueError("cluster end precedes start")

    def __len__(self):
        return len(self.processes)


@dataclass(frozen=True)
class StideParams:
    k: int = DEFAULT_STIDE_K

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("stide window length must be at least 1")


@dataclass(frozen=True)
class DbscanParams:
    min_pts: int = DEFAULT_MIN_PTS
    # None selects epsilon from the nearest-neighbor elbow
    epsilon: float | None = None
    fallback_epsilon: float = DEFAULT_FALLBACK_EPSILON
    # count a point toward its own neighborhood, so min_pts=2 admits pairs
    count_self: bool = True

    def __post_init__(self):
        if self.min_pts < 2:
            raise ValueError("min_pts must be at least 2")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("explicit epsilon must be positive")


@dataclass(frozen=True)
class ZScore:
    """A standardized score.

    ``direction`` is +1 when larger raw values are more anomalous (encoded
    lengths) and -1 when smaller raw values are (match counts), so that a
    high ``z`` always means "unusual".
    """

    raw: float
    mu: float
    sigma: float
    z: float
    direction: int = 1

    @classmethod
    def compute(cls, raw: float, mu: float, sigma: float, direction: int = 1) -> "ZScore":
        diff = direction * (raw - mu)
        if sigma > 0:
            z = diff / sigma
        elif diff == 0:
            z = 0.0
        else:
            z = math.copysign(math.inf, diff)
        return cls(float(raw), float(mu), float(sigma), float(z), direction)


def series_key(event: ProcessEvent):
    return (event.timestamp, event.port, event.process)


def build_series(records: Iterable[ConnectionRecord], subject: str, peer: str) -> list[ProcessEvent]:
    """Events between ``subject`` and ``peer``; simultaneous ones ordered by destination port."""
    events = [
        ProcessEvent(r.timestamp, r.remote_port, r.process, peer)
        for r in records
        if (r.local_ip == subject and r.remote_ip == peer)
        or (r.local_ip == peer and r.remote_ip == subject)
    ]
    events.sort(key=series_key)
    return events


def build_all_series(records: Iterable[ConnectionRecord], subject: str) -> dict[str, list[ProcessEvent]]:
    """:func:`build_series` for every peer of ``subject`` in one pass."""
    out: dict[str, list[ProcessEvent]] = {}
    for r in records:
        peer = r.peer_of(subject)
        if peer is None:
            continue
        out.setdefault(peer, []).append(ProcessEvent(r.timestamp, r.remote_port, r.process, peer))
    for events in out.values():
        events.sort(key=series_key)
    return dict(sorted(out.items()))


def stide_segments(series: Sequence, params: StideParams = StideParams()) -> list[tuple[str, ...]]:
    """Sliding windows of ``k`` consecutive processes, stride one.

    A series shorter than ``k`` yields a single shorter segment; callers
    recognize it by its length and leave it out of matching.
    """
    procs = [e.process if isinstance(e, ProcessEvent) else e for e in series]
    k = params.k
    if not procs:
        return []
    if len(procs) < k:
        return [tuple(procs)]
    return [tuple(procs[i:i + k]) for i in range(len(procs) - k + 1)]


# --------------------------------------------------------------------------
# temporal DBSCAN


def _times(series: Sequence) -> np.ndarray:
    return np.array([e.timestamp if isinstance(e, ProcessEvent) else float(e) for e in series])


def knn_distances(times: Sequence[float], k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point (1-D)."""
    t = np.sort(np.asarray(times, dtype=float))
    n = len(t)
    if n <= k:
        raise ValueError(f"need more than {k} points")
    # the k nearest neighbors in 1-D lie among the k points on either side
    cand = np.full((n, 2 * k), np.inf)
    for j in range(1, k + 1):
        cand[j:, j - 1] = t[j:] - t[:-j]
        cand[:-j, k + j - 1] = t[j:] - t[:-j]
    return np.partition(cand, k - 1, axis=1)[:, k - 1]


def elbow_value(values: Sequence[float]) -> float:
    """Value at the knee of an ascending curve of positive distances.

    The curve is taken on a log scale, since inter-event gaps span seconds
    to hours; both axes are then rescaled to [0, 1] and the knee is the
    point lying furthest below the chord joining the endpoints.  Zero
    distances are floored at half the smallest positive one.
    """
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    if n == 0:
        raise ValueError("elbow of an empty curve")
    positive = v[v > 0]
    if len(positive) == 0:
        return 0.0
    y = np.log(np.maximum(v, positive[0] / 2))
    span = y[-1] - y[0]
    if span == 0:
        return float(v[0])
    if n < 3:
        return float(v[-1])
    x = np.arange(n) / (n - 1)
    below = x - (y - y[0]) / span
    return float(v[int(np.argmax(below))])


def neighbor_rank(min_pts: int, count_self: bool = True) -> int:
    """Which nearest *other* point sets the core radius."""
    return min_pts - 1 if count_self else min_pts


def auto_epsilon(
    series: Sequence,
    min_pts: int = DEFAULT_MIN_PTS,
    fallback: float = DEFAULT_FALLBACK_EPSILON,
    count_self: bool = True,
) -> float:
    """Epsilon at the elbow of the sorted nearest-neighbor distance curve.

    The neighbor used is the one a point needs within reach to be core.
    """
    times = _times(series)
    rank = neighbor_rank(min_pts, count_self)
    if len(times) <= max(rank, 2):
        return fallback
    eps = elbow_value(knn_distances(times, rank))
    return eps if eps > 0 else fallback


def dbscan_labels(
    times: Sequence[float], epsilon: float, min_pts: int, count_self: bool = True
) -> np.ndarray:
    """DBSCAN on sorted 1-D points; -1 marks noise.

    A core point has at least ``min_pts`` points within ``epsilon``, itself
    included when ``count_self``.  Points are visited in order and border
    points join the first cluster that reaches them.
    """
    t = np.asarray(times, dtype=float)
    n = len(t)
    lo = np.searchsorted(t, t - epsilon, side="left")
    hi = np.searchsorted(t, t + epsilon, side="right")
    core = (hi - lo - (0 if count_self else 1)) >= min_pts
    labels = np.full(n, -1)
    visited = np.zeros(n, dtype=bool)
    cluster = -1
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        if not core[i]:
            continue
        cluster += 1
        labels[i] = cluster
        queue = deque(range(lo[i], hi[i]))
        while queue:
            q = queue.popleft()
            if not visited[q]:
                visited[q] = True
                if core[q]:
                    queue.extend(range(lo[q], hi[q]))
            if labels[q] == -1:
                labels[q] = cluster
    return labels


def dbscan_temporal(
    series: Sequence[ProcessEvent],
    params: DbscanParams = DbscanParams(),
    epsilon: float | None = None,
    role: int | None = None,
) -> list[ProcessCluster]:
    """Partition a chronological series into process clusters.

    Noise points become singleton clusters.  ``epsilon`` overrides both the
    params value and the automatic choice.
    """
    if not series:
        return []
    events = sorted(series, key=series_key)
    eps = epsilon if epsilon is not None else params.epsilon
    if eps is None:
        eps = auto_epsilon(events, params.min_pts, params.fallback_epsilon, params.count_self)
    times = np.array([e.timestamp for e in events])
    labels = dbscan_labels(times, eps, params.min_pts, params.count_self)
    groups: dict[int, list[int]] = {}
    singletons = []
    for i, lab in enumerate(labels):
        if lab < 0:
            singletons.append([i])
        else:
            groups.setdefault(int(lab), []).append(i)
    clusters = []
    for members in list(groups.values()) + singletons:
        members.sort()
        clusters.append(ProcessCluster(
            tuple(events[i].process for i in members),
            float(times[members[0]]),
            float(times[members[-1]]),
            events[members[0]].peer,
            role,
        ))
    clusters.sort(key=lambda c: (c.start, c.end))
    return clusters


# --------------------------------------------------------------------------
# frequency scoring


@dataclass
class MatchDatabase:
    """Frozen multiset of samples with precomputed match-count statistics.

    ``mu`` and ``sigma`` are the mean and population standard deviation of
    the match counts of all database entries, each entry counting itself.
    """

    counts: Counter
    mu: float = field(init=False)
    sigma: float = field(init=False)

    def __post_init__(self):
        total = sum(self.counts.values())
        if total == 0:
            raise UndefinedScoreError("cannot score against an empty database")
        c = np.array(list(self.counts.values()), dtype=float)
        self.mu = float((c * c).sum() / total)
        self.sigma = float(math.sqrt(max((c ** 3).sum() / total - self.mu ** 2, 0.0)))

    @classmethod
    def from_samples(cls, samples: Iterable[Hashable]) -> "MatchDatabase":
        return cls(Counter(samples))

    def __len__(self):
        return sum(self.counts.values())

    def score(self, sample: Hashable) -> ZScore:
        return ZScore.compute(self.counts.get(sample, 0), self.mu, self.sigma, direction=-1)


def match_zscore(sample: Hashable, database: Sequence[Hashable]) -> ZScore:
    """Exact-match count of ``sample`` in ``database``, standardized.

    Fewer matches than typical gives a positive ``z``.
    """
    if len(database) == 0:
        raise UndefinedScoreError("cannot score against an empty database")
    return MatchDatabase.from_samples(database).score(sample)


def zscore_cdf(scores: Iterable[ZScore | float]) -> list[tuple[float, float]]:
    """Empirical CDF as ``(z, P(Z <= z))`` at each distinct z, ascending."""
    zs = sorted(s.z if isinstance(s, ZScore) else float(s) for s in scores)
    n = len(zs)
    out: list[tuple[float, float]] = []
    for i, z in enumerate(zs):
        if out and out[-1][0] == z:
            out[-1] = (z, (i + 1) / n)
        else:
            out.append((z, (i + 1) / n))
    return out


def fraction_beyond(scores: Iterable[ZScore | float], threshold: float) -> float:
    zs = [s.z if isinstance(s, ZScore) else float(s) for s in scores]
    if not zs:
        return math.nan
    return sum(z > threshold for z in zs) / len(zs)


# --------------------------------------------------------------------------
# persistence

CLUSTER_HEADER = "peer,role,start,end,processes"


def write_clusters(clusters: Iterable[ProcessCluster], stream: TextIO) -> None:
    stream.write(CLUSTER_HEADER + "\n")
    for c in clusters:
        role = "" if c.role is None else str(c.role)
        stream.write(f"{c.peer},{role},{c.start!r},{c.end!r},{';'.join(c.processes)}\n")


def read_clusters(stream: TextIO) -> list[ProcessCluster]:
    header = stream.readline().strip()
    if header != CLUSTER_HEADER:
        raise ValueError(f"expected header {CLUSTER_HEADER!r}")
    out = []
    for line in stream:
        line = line.rstrip("\n")
        if not line:
            continue
        peer, role, start, end, procs = line.split(",", 4)
        out.append(ProcessCluster(
            tuple(procs.split(";")), float(start), float(end), peer,
            int(role) if role else None,
        ))
    return out


def write_cdf(cdf: Iterable[tuple[float, float]], stream: TextIO) -> None:
    stream.write("z,p\n")
    for z, p in cdf:
        stream.write(f"{z!r},{p!r}\n")
