import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from sklearn.metrics import adjusted_rand_score

from rolewatch.errors import UndefinedScoreError, UsageError
from rolewatch.profiler import PortProfile, Kind, Representation
from rolewatch.roles import (
    Measure, PIPELINES, Pipeline, RoleAssignment, SimilarityMatrix, agglomerative_cluster,
    cluster_profiles, cosine_distances, cosine_similarity, euclidean_distances,
    jaccard_similarity, kmeans, laplacian, read_assignment, select_clusters, silhouette_samples,
    silhouette_score, similarity_matrix, spectral_cluster, spherical_kmeans, write_assignment,
    write_sweep,
)


def brute_silhouette(labels, d):
    n = len(labels)
    out = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            out.append(0.0)
            continue
        a = sum(d[i][j] for j in own) / len(own)
        b = min(
            sum(d[i][j] for j in range(n) if labels[j] == c) / sum(1 for j in range(n) if labels[j] == c)
            for c in set(labels) if c != labels[i]
        )
        m = max(a, b)
        out.append(0.0 if m == 0 else (b - a) / m)
    return out


def test_silhouette_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(3, 21))
        pts = rng.random((n, 3))
        k = int(rng.integers(2, min(n, 6) + 1))
        labels = rng.integers(0, k, size=n)
        if len(set(labels)) < 2:
            labels[0], labels[1] = 0, 1
        d = euclidean_distances(pts)
        np.testing.assert_allclose(silhouette_samples(labels, d), brute_silhouette(list(labels), d),
                                   rtol=1e-9, atol=1e-12)


def test_silhouette_needs_two_clusters():
    with pytest.raises(UndefinedScoreError):
        silhouette_score([0, 0, 0], np.zeros((3, 3)))


def test_similarities():
    assert cosine_similarity([1, 0], [1, 0]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 2]) == 0.0
    assert jaccard_similarity({80, 443}, {443, 22}) == pytest.approx(1 / 3)
    with pytest.raises(UndefinedScoreError):
        cosine_similarity([0, 0], [1, 0])


def _prof(system, entries, rep=Representation.PROPORTIONED):
    return PortProfile(system, rep, Kind.SERVER, entries)


def test_jaccard_requires_binary():
    profs = [_prof("a", {80: 100.0}), _prof("b", {80: 50.0, 22: 50.0})]
    with pytest.raises(UsageError):
        similarity_matrix(profs, Measure.JACCARD)
    s = similarity_matrix([p.as_binary() for p in profs], "jaccard")
    assert s.values[0, 1] == pytest.approx(0.5)


def test_similarity_matrix_symmetry_check():
    with pytest.raises(UsageError):
        SimilarityMatrix(np.array([[1.0, 0.2], [0.3, 1.0]]), Measure.COSINE)


def blobs(rng, k=3, per=8, dim=4, spread=0.05):
    centers = np.eye(dim)[:k] * 10
    pts = np.vstack([c + rng.normal(0, spread, size=(per, dim)) for c in centers])
    return pts, np.repeat(np.arange(k), per)


def test_kmeans_recovers_blobs_and_is_deterministic():
    rng = np.random.default_rng(1)
    pts, truth = blobs(rng)
    a = kmeans(pts, 3, seed=4)
    assert adjusted_rand_score(truth, a) == 1.0
    assert (kmeans(pts, 3, seed=4) == a).all()
    assert list(a[:1]) == [0]  # canonical labels start at 0


def test_spherical_kmeans_uses_direction_only():
    pts = np.array([[1, 0], [5, 0.1], [0, 1], [0.1, 7]], dtype=float)
    labels = spherical_kmeans(pts, 2, seed=0)
    assert labels[0] == labels[1] and labels[2] == labels[3] and labels[0] != labels[2]


def test_laplacian_rows_sum_to_zero():
    s = np.array([[1, .5, 0], [.5, 1, .2], [0, .2, 1]])
    np.testing.assert_allclose(laplacian(s).sum(axis=1), 0, atol=1e-12)


def test_spectral_separates_components():
    s = np.zeros((6, 6))
    s[:3, :3] = 1
    s[3:, 3:] = 1
    labels = spectral_cluster(SimilarityMatrix(s, Measure.JACCARD), 2, seed=0)
    assert adjusted_rand_score([0, 0, 0, 1, 1, 1], labels) == 1.0


@given(st.integers(4, 12), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_agglomerative_matches_scipy_average_linkage(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3))
    s = 1.0 - euclidean_distances(x) / (np.sqrt(3) + 1e-9)
    np.fill_diagonal(s, 1.0)
    sim = SimilarityMatrix(s, Measure.COSINE)
    for k in (2, 3):
        ours = agglomerative_cluster(sim, k)
        ref = fcluster(linkage(squareform(1.0 - s, checks=False), "average"), k, "maxclust")
        assert adjusted_rand_score(ref, ours) == pytest.approx(1.0)


def _template_profiles(n_roles=3, per=5, seed=0):
    rng = np.random.default_rng(seed)
    profs, truth = [], {}
    for r in range(n_roles):
        ports = [1000 + 10 * r + i for i in range(3)]
        for j in range(per):
            w = rng.uniform(1, 2, size=3)
            name = f"s{r}_{j}"
            profs.append(_prof(name, {p: 100 * v / w.sum() for p, v in zip(ports, w)}))
            truth[name] = r
    return profs, truth


@pytest.mark.parametrize("pipeline", PIPELINES)
def test_every_pipeline_recovers_disjoint_templates(pipeline):
    profs, truth = _template_profiles()
    selection, assignment = select_clusters(pipeline, profs, range(2, 8), seed=0)
    assert selection.chosen_n_clusters == 3
    systems = sorted(truth)
    assert adjusted_rand_score([truth[s] for s in systems], [assignment.labels[s] for s in systems]) == 1.0


def test_selection_ties_go_to_fewer_clusters_and_small_inputs_flag():
    profs, _ = _template_profiles(n_roles=1, per=1)
    _, single = select_clusters(Pipeline.KMEANS_PROPORTIONED, profs)
    assert single.flagged and single.n_clusters == 1
    _, with_empty = select_clusters(Pipeline.KMEANS_BINARY, _template_profiles()[0] + [_prof("e", {})], range(2, 5))
    assert "e" not in with_empty.labels


def test_cluster_profiles_fixed_count():
    profs, _ = _template_profiles()
    labels = cluster_profiles(Pipeline.SPECTRAL_BINARY_JACCARD, profs, 3, seed=1)
    assert len(set(labels)) == 3


def test_assignment_round_trip():
    a = RoleAssignment({"b": 1, "a": 0}, 2, "kmeans-binary", 0.75)
    buf = io.StringIO()
    write_assignment(a, buf)
    back = read_assignment(io.StringIO(buf.getvalue()))
    assert back.labels == a.labels and back.n_clusters == 2 and back.silhouette == 0.75
    profs, _ = _template_profiles()
    sel, _ = select_clusters(Pipeline.KMEANS_PROPORTIONED, profs, range(2, 5))
    out = io.StringIO()
    write_sweep(sel, out)
    assert out.getvalue().splitlines()[0] == "n_C,score"


def test_cosine_distance_zero_on_diagonal():
    d = cosine_distances(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 1.0]]))
    assert d[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.diag(d) == 0)
