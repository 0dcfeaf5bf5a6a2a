"""Role identification: cluster a neighborhood's port profiles.

Five pipelines are shipped, each pairing a profile representation with a
clustering method; the number of clusters is picked by silhouette score.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import UndefinedScoreError, UsageError
from .ingest import TimeWindow
from .profiler import PortProfile, Representation, align_profiles

log = logging.getLogger(__name__)

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6
DEFAULT_MAX_CLUSTERS = 50


class Measure(str, enum.Enum):
    COSINE = "cosine"
    JACCARD = "jaccard"


class Pipeline(str, enum.Enum):
    SPHERICAL_KMEANS_PROPORTIONED = "spherical-kmeans-proportioned"
    KMEANS_PROPORTIONED = "kmeans-proportioned"
    KMEANS_BINARY = "kmeans-binary"
    AGGLOMERATIVE_BINARY_JACCARD = "agglomerative-binary-jaccard"
    SPECTRAL_BINARY_JACCARD = "spectral-binary-jaccard"


PIPELINES = tuple(Pipeline)


# --------------------------------------------------------------------------
# similarities


def cosine_similarity(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise UndefinedScoreError("cosine similarity of a zero vector is undefined")
    value = float(x @ y / (nx * ny))
    if (x >= 0).all() and (y >= 0).all():
        value = min(max(value, 0.0), 1.0)
    return value


def jaccard_similarity(px: Iterable[int], py: Iterable[int]) -> float:
    px, py = set(px), set(py)
    union = px | py
    if not union:
        raise UndefinedScoreError("Jaccard index of two empty sets is undefined")
    return len(px & py) / len(union)


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    measure: Measure

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise UsageError("similarity matrix must be square")
        if not np.allclose(v, v.T, atol=1e-9, rtol=0):
            raise UsageError("similarity matrix must be symmetric")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def distances(self) -> np.ndarray:
        d = 1.0 - self.values
        np.fill_diagonal(d, 0.0)
        return np.clip(d, 0.0, None)


def _cosine_matrix(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    if (norms == 0).any():
        raise UndefinedScoreError("cosine similarity of a zero vector is undefined")
    unit = matrix / norms[:, None]
    s = np.clip(unit @ unit.T, 0.0, 1.0)
    s = (s + s.T) / 2
    np.fill_diagonal(s, 1.0)
    return s


def _jaccard_matrix(port_sets: Sequence[frozenset[int]]) -> np.ndarray:
    n = len(port_sets)
    s = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            s[i, j] = s[j, i] = jaccard_similarity(port_sets[i], port_sets[j])
    return s


def similarity_matrix(profiles: Sequence[PortProfile], measure: Measure | str) -> SimilarityMatrix:
    """Pairwise similarities among non-empty profiles."""
    measure = Measure(measure)
    if any(p.empty for p in profiles):
        raise UsageError("empty profiles cannot be compared; drop them first")
    reps = {p.representation for p in profiles}
    if measure is Measure.JACCARD and Representation.PROPORTIONED in reps:
        raise UsageError("proportioned profiles only support cosine similarity")
    if measure is Measure.JACCARD:
        return SimilarityMatrix(_jaccard_matrix([p.ports for p in profiles]), measure)
    matrix, _ = align_profiles(profiles)
    return SimilarityMatrix(_cosine_matrix(matrix), measure)


# --------------------------------------------------------------------------
# partitional clustering


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters 0..k-1 in order of first appearance."""
    mapping: dict[int, int] = {}
    out = np.empty(len(labels), dtype=int)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(int(lab), len(mapping))
    return out


def _check_k(n: int, n_clusters: int) -> None:
    if not 1 <= n_clusters <= n:
        raise UsageError(f"n_clusters must lie in [1, {n}], got {n_clusters}")


def _plusplus(points: np.ndarray, k: int, rng: np.random.Generator, dist_fn) -> np.ndarray:
    n = len(points)
    centers = [int(rng.integers(n))]
    d2 = dist_fn(points, points[centers[0]])
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k
            break
        idx = int(rng.choice(n, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, dist_fn(points, points[idx]))
    return points[centers].copy()


def _sq_euclid(points: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((points - c) ** 2).sum(axis=1)


def _lloyd(points, centers, max_iter, tol):
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)  # lowest index wins ties
        new = centers.copy()
        for c in range(len(centers)):
            members = points[labels == c]
            if len(members):
                new[c] = members.mean(axis=0)
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift <= tol:
            break
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return labels, inertia


def kmeans(
    matrix: np.ndarray,
    n_clusters: int,
    seed: int = 0,
    n_init: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; best of ``n_init`` restarts by inertia."""
    points = np.asarray(matrix, dtype=float)
    _check_k(len(points), n_clusters)
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, math.inf
    for _ in range(n_init):
        centers = _plusplus(points, n_clusters, rng, _sq_euclid)
        labels, inertia = _lloyd(points, centers, max_iter, tol)
        if inertia < best_inertia - 1e-12:
            best_labels, best_inertia = labels, inertia
    return _canonical(best_labels)


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    points = np.asarray(matrix, dtype=float)
    norms = np.linalg.norm(points, axis=1)
    if (norms == 0).any():
        raise UsageError("spherical k-means cannot place zero rows on the sphere")
    return points / norms[:, None]


def spherical_kmeans(
    matrix: np.ndarray,
    n_clusters: int,
    seed: int = 0,
    n_init: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
) -> np.ndarray:
    """k-means on the unit sphere: assign by cosine, renormalize centroids."""
    points = _normalize_rows(matrix)
    _check_k(len(points), n_clusters)
    rng = np.random.default_rng(seed)

    def cos_dist(p, c):
        return np.clip(1.0 - p @ c, 0.0, None)

    best_labels, best_obj = None, -math.inf
    for _ in range(n_init):
        centers = _plusplus(points, n_clusters, rng, cos_dist)
        for _ in range(max_iter):
            labels = np.argmax(points @ centers.T, axis=1)
            new = centers.copy()
            for c in range(len(centers)):
                members = points[labels == c]
                if len(members):
                    m = members.sum(axis=0)
                    norm = np.linalg.norm(m)
                    if norm > 0:
                        new[c] = m / norm
            shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
            centers = new
            if shift <= tol:
                break
        sims = points @ centers.T
        labels = np.argmax(sims, axis=1)
        obj = float(sims[np.arange(len(points)), labels].sum())
        if obj > best_obj + 1e-12:
            best_labels, best_obj = labels, obj
    return _canonical(best_labels)


# --------------------------------------------------------------------------
# similarity-matrix clustering


def laplacian(similarity: SimilarityMatrix | np.ndarray) -> np.ndarray:
    s = similarity.values if isinstance(similarity, SimilarityMatrix) else np.asarray(similarity)
    return np.diag(s.sum(axis=1)) - s


def spectral_embedding(similarity: SimilarityMatrix, n_vectors: int) -> np.ndarray:
    """Rows of the ``n_vectors`` eigenvectors of L = D - S with smallest eigenvalues."""
    if not 1 <= n_vectors <= similarity.n:
        raise UsageError(f"eigenvector count must lie in [1, {similarity.n}]")
    _, vecs = np.linalg.eigh(laplacian(similarity))
    return vecs[:, :n_vectors]


def spectral_cluster(
    similarity: SimilarityMatrix,
    n_clusters: int,
    n_vectors: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    _check_k(similarity.n, n_clusters)
    embedding = spectral_embedding(similarity, n_vectors or n_clusters)
    return kmeans(embedding, n_clusters, seed=seed)


def agglomerative_merges(similarity: SimilarityMatrix) -> list[tuple[int, int, float]]:
    """Average-linkage merge sequence as ``(keep, absorbed, similarity)``.

    Clusters are named by their smallest member index; the pair with the
    highest average similarity merges first, ties going to the
    lexicographically smallest ``(i, j)``.
    """
    n = similarity.n
    sim = similarity.values.astype(float).copy()
    active = np.ones(n, dtype=bool)
    sizes = np.ones(n)
    np.fill_diagonal(sim, -np.inf)
    merges = []
    for _ in range(n - 1):
        masked = np.where(active[:, None] & active[None, :], sim, -np.inf)
        masked = np.triu(masked, k=1) + np.tril(np.full((n, n), -np.inf))
        flat = int(np.argmax(masked))  # row-major: first (i, j) among ties
        i, j = divmod(flat, n)
        best = float(masked[i, j])
        merges.append((i, j, best))
        row = (sizes[i] * sim[i] + sizes[j] * sim[j]) / (sizes[i] + sizes[j])
        sim[i, :] = row
        sim[:, i] = row
        sim[i, i] = -np.inf
        sizes[i] += sizes[j]
        active[j] = False
        sim[j, :] = -np.inf
        sim[:, j] = -np.inf
    return merges


def cut_merges(n: int, merges: Sequence[tuple[int, int, float]], n_clusters: int) -> np.ndarray:
    _check_k(n, n_clusters)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for keep, absorbed, _ in merges[: n - n_clusters]:
        parent[find(absorbed)] = find(keep)
    return _canonical(np.array([find(i) for i in range(n)]))


def agglomerative_cluster(similarity: SimilarityMatrix, n_clusters: int) -> np.ndarray:
    _check_k(similarity.n, n_clusters)
    return cut_merges(similarity.n, agglomerative_merges(similarity), n_clusters)


# --------------------------------------------------------------------------
# quality


def euclidean_distances(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    sq = (m * m).sum(axis=1)
    d2 = np.clip(sq[:, None] + sq[None, :] - 2 * m @ m.T, 0.0, None)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    return d


def cosine_distances(matrix: np.ndarray) -> np.ndarray:
    d = 1.0 - _cosine_matrix(np.asarray(matrix, dtype=float))
    np.fill_diagonal(d, 0.0)
    return d


def silhouette_samples(labels: Sequence[int], distances: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    d = np.asarray(distances, dtype=float)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise UndefinedScoreError("silhouette needs at least two clusters")
    onehot = (labels[:, None] == clusters[None, :]).astype(float)
    sizes = onehot.sum(axis=0)
    sums = d @ onehot  # n x k: total distance from each point to each cluster
    own = np.searchsorted(clusters, labels)
    n = len(labels)
    own_size = sizes[own]
    a = np.zeros(n)
    multi = own_size > 1
    a[multi] = sums[np.arange(n), own][multi] / (own_size[multi] - 1)
    means = sums / sizes[None, :]
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[~multi] = 0.0
    return s


def silhouette_score(labels: Sequence[int], distances: np.ndarray) -> float:
    """Mean silhouette coefficient; singleton clusters contribute 0."""
    return float(silhouette_samples(labels, distances).mean())


# --------------------------------------------------------------------------
# selection


@dataclass
class RoleAssignment:
    labels: dict[str, int]
    n_clusters: int
    method: str
    silhouette: float
    window: TimeWindow | None = None
    # neighborhood too small to cluster, or profiles too sparse
    flagged: bool = False

    def members(self, role: int) -> list[str]:
        return sorted(s for s, r in self.labels.items() if r == role)

    def roles(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for system in sorted(self.labels):
            out.setdefault(self.labels[system], []).append(system)
        return out


@dataclass
class ClusterSelection:
    scores: dict[int, float] = field(default_factory=dict)
    chosen_n_clusters: int = 1


@dataclass
class _Prepared:
    systems: list[str]
    points: np.ndarray | None
    similarity: SimilarityMatrix | None
    distances: np.ndarray
    spectral_vectors: np.ndarray | None = None
    merges: list | None = None


def _prepare(pipeline: Pipeline, profiles: Sequence[PortProfile]) -> _Prepared:
    systems = [p.system for p in profiles]
    if pipeline in (Pipeline.SPHERICAL_KMEANS_PROPORTIONED, Pipeline.KMEANS_PROPORTIONED):
        if any(p.representation is not Representation.PROPORTIONED for p in profiles):
            raise UsageError(f"{pipeline.value} needs proportioned profiles")
        points, _ = align_profiles(profiles)
        if pipeline is Pipeline.SPHERICAL_KMEANS_PROPORTIONED:
            return _Prepared(systems, points, None, cosine_distances(points))
        return _Prepared(systems, points, None, euclidean_distances(points))
    binary = [p.as_binary() for p in profiles]
    if pipeline is Pipeline.KMEANS_BINARY:
        points, _ = align_profiles(binary)
        return _Prepared(systems, points, None, euclidean_distances(points))
    sim = similarity_matrix(binary, Measure.JACCARD)
    prepared = _Prepared(systems, None, sim, sim.distances())
    if pipeline is Pipeline.AGGLOMERATIVE_BINARY_JACCARD:
        prepared.merges = agglomerative_merges(sim)
    else:
        _, vecs = np.linalg.eigh(laplacian(sim))
        prepared.spectral_vectors = vecs
    return prepared


def _run(pipeline: Pipeline, prepared: _Prepared, n_clusters: int, seed: int,
         n_vectors: int | None) -> np.ndarray:
    if pipeline is Pipeline.SPHERICAL_KMEANS_PROPORTIONED:
        return spherical_kmeans(prepared.points, n_clusters, seed=seed)
    if pipeline in (Pipeline.KMEANS_PROPORTIONED, Pipeline.KMEANS_BINARY):
        return kmeans(prepared.points, n_clusters, seed=seed)
    if pipeline is Pipeline.AGGLOMERATIVE_BINARY_JACCARD:
        return cut_merges(len(prepared.systems), prepared.merges, n_clusters)
    ell = min(n_vectors or n_clusters, len(prepared.systems))
    return kmeans(prepared.spectral_vectors[:, :ell], n_clusters, seed=seed)


def cluster_profiles(
    pipeline: Pipeline | str,
    profiles: Sequence[PortProfile],
    n_clusters: int,
    seed: int = 0,
    n_vectors: int | None = None,
) -> np.ndarray:
    """Labels from one pipeline at a fixed cluster count."""
    pipeline = Pipeline(pipeline)
    return _run(pipeline, _prepare(pipeline, profiles), n_clusters, seed, n_vectors)


def select_clusters(
    pipeline: Pipeline | str,
    profiles: Sequence[PortProfile],
    n_clusters_range: Iterable[int] | None = None,
    seed: int = 0,
    n_vectors: int | None = None,
    window: TimeWindow | None = None,
) -> tuple[ClusterSelection, RoleAssignment]:
    """Sweep the cluster count and keep the labeling with the best silhouette.

    Empty profiles are dropped.  Ties in score go to the smaller count.  A
    neighborhood of fewer than two systems is a single flagged role.
    """
    pipeline = Pipeline(pipeline)
    usable = [p for p in profiles if not p.empty]
    dropped = len(profiles) - len(usable)
    if dropped:
        log.info("dropping %d empty profiles before clustering", dropped)
    n = len(usable)
    if n < 2:
        labels = {p.system: 0 for p in usable}
        return (
            ClusterSelection({1: 0.0}, 1),
            RoleAssignment(labels, len(labels), pipeline.value, 0.0, window, flagged=True),
        )
    if n_clusters_range is None:
        n_clusters_range = range(2, min(n, DEFAULT_MAX_CLUSTERS) + 1)
    ks = sorted(set(n_clusters_range))
    if not ks or ks[0] < 2 or ks[-1] > n:
        raise UsageError(f"cluster counts must lie in [2, {n}], got {ks}")

    prepared = _prepare(pipeline, usable)
    selection = ClusterSelection()
    best: tuple[float, int, np.ndarray] | None = None
    for k in ks:
        labels = _run(pipeline, prepared, k, seed, n_vectors)
        if len(np.unique(labels)) < 2:
            selection.scores[k] = math.nan
            continue
        score = silhouette_score(labels, prepared.distances)
        selection.scores[k] = score
        if best is None or score > best[0]:
            best = (score, k, labels)
    if best is None:
        labels = np.zeros(n, dtype=int)
        selection.chosen_n_clusters = 1
        return selection, RoleAssignment(
            {s: 0 for s in prepared.systems}, 1, pipeline.value, 0.0, window, flagged=True
        )
    score, k, labels = best
    selection.chosen_n_clusters = k
    assignment = RoleAssignment(
        {s: int(l) for s, l in zip(prepared.systems, labels)},
        int(len(np.unique(labels))),
        pipeline.value,
        score,
        window,
    )
    return selection, assignment


ASSIGNMENT_HEADER = "system,role,method,n_C,silhouette"


def write_assignment(assignment: RoleAssignment, stream: TextIO) -> None:
    stream.write(ASSIGNMENT_HEADER + "\n")
    for system in sorted(assignment.labels):
        stream.write(
            f"{system},{assignment.labels[system]},{assignment.method},"
            f"{assignment.n_clusters},{assignment.silhouette!r}\n"
        )


def read_assignment(stream: TextIO) -> RoleAssignment:
    header = stream.readline().strip()
    if header != ASSIGNMENT_HEADER:
        raise ValueError(f"expected header {ASSIGNMENT_HEADER!r}")
    labels: dict[str, int] = {}
    method, n_c, sil = "", 0, 0.0
    for line in stream:
        line = line.strip()
        if not line:
            continue
        system, role, method, n_c_s, sil_s = line.split(",")
        labels[system] = int(role)
        n_c, sil = int(n_c_s), float(sil_s)
    return RoleAssignment(labels, n_c, method, sil)


def write_sweep(selection: ClusterSelection, stream: TextIO) -> None:
    stream.write("n_C,score\n")
    for k in sorted(selection.scores):
        stream.write(f"{k},{selection.scores[k]!r}\n")
