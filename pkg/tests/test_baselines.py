import io
import itertools
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from rolewatch.baselines import (
    UNDEFINED_SCORE, CnbModel, CnbParams, EvalCase, FpofModel, FpofParams,
    KappaLofParams, cnb_score, cnb_similarity, default_grid, fpof, grid_search, kappa_lof,
    longest_common_substrings, positional_weight, score_cases, write_grid, write_scores,
)
from rolewatch.errors import UsageError
from rolewatch.evaluation import roc_auc


def rand_db(rng, n_max, len_max, alphabet="abc"):
    return [tuple(rng.choice(alphabet) for _ in range(rng.randint(1, len_max)))
            for _ in range(rng.randint(1, n_max))]


# ---------------------------------------------------------------- FPOF


def brute_fpof(t, db, s0):
    subs = lambda x: {x[i:j] for i in range(len(x)) for j in range(i + 1, len(x) + 1)}
    count = {}
    for u in db:
        for x in subs(u):
            count[x] = count.get(x, 0) + 1
    fps = {x: c / len(db) for x, c in count.items() if c >= s0}
    if not fps:
        return 0.0
    return sum(fps[x] for x in subs(t) if x in fps) / len(fps)


def test_fpof_matches_brute_force():
    rng = random.Random(1)
    for _ in range(200):
        db = rand_db(rng, 8, 5)
        t = rand_db(rng, 1, 5)[0]
        s0 = rng.randint(1, 4)
        assert fpof(t, db, FpofParams(s0)) == pytest.approx(brute_fpof(t, db, s0), abs=1e-12)


def test_fpof_counts_each_transaction_once():
    model = FpofModel([("a", "a", "a")], FpofParams(1))
    # patterns a, aa, aaa, each in one transaction out of one
    assert model.support == {("a",): 1.0, ("a", "a"): 1.0, ("a", "a", "a"): 1.0}
    assert model.score(("a",)) == pytest.approx(1 / 3)


def test_fpof_without_frequent_patterns_is_zero(caplog):
    model = FpofModel([("a",), ("b",)], FpofParams(3))
    assert model.empty and model.score(("a",)) == 0.0


def test_baseline_params_validate():
    with pytest.raises(UsageError):
        FpofParams(0)
    with pytest.raises(UsageError):
        KappaLofParams(0)
    with pytest.raises(UsageError):
        CnbParams(theta=1.5)
    with pytest.raises(UsageError):
        CnbParams(k=0)


# ------------------------------------------------------------- kappa-LOF


def brute_kappa_lof(t, db, kappa):
    verts = list(db) + [t]
    n = len(verts)
    ti = n - 1
    w = [[positional_weight(verts[i], verts[j]) for j in range(n)] for i in range(n)]
    s = [0.0] * n
    for length in range(1, kappa + 1):
        for path in itertools.product(range(n), repeat=length):
            prod, prev = 1.0, ti
            for v in path:
                prod *= w[prev][v]
                prev = v
            s[path[-1]] += prod
    others = [s[v] for v in range(n - 1) if s[v] > 0]
    if s[ti] <= 0 or not others:
        return UNDEFINED_SCORE
    return sum(others) / len(others) / s[ti]


def test_kappa_lof_matches_walk_enumeration():
    rng = random.Random(2)
    for _ in range(150):
        db = rand_db(rng, 6, 4)
        t = rand_db(rng, 1, 4)[0]
        kappa = rng.randint(1, 2)
        got = kappa_lof(t, db, KappaLofParams(kappa))
        want = brute_kappa_lof(t, db, kappa)
        if want == UNDEFINED_SCORE:
            assert got == UNDEFINED_SCORE
        else:
            assert got == pytest.approx(want, rel=1e-9)


def test_kappa_lof_hand_cases():
    assert positional_weight(("a", "b"), ("a", "c", "d")) == pytest.approx(1 / 3)
    # kappa=1: S(t,v) is the edge weight and S(t,t) the self-loop, which is 1
    assert kappa_lof(("a", "b"), [("a", "c"), ("x", "b")], KappaLofParams(1)) == pytest.approx(0.5)
    db = [("p", "q")] * 4
    assert kappa_lof(("p", "q"), db, KappaLofParams(3)) == pytest.approx(1.0)
    assert kappa_lof(("z",), [("a",), ("b",)], KappaLofParams(2)) == UNDEFINED_SCORE


# -------------------------------------------------------------------- CNB


def test_longest_common_substrings():
    assert longest_common_substrings("abcd", "xbcy") == [("b", "c")]
    assert longest_common_substrings("ab", "ba") == [("a",), ("b",)]
    assert longest_common_substrings("ab", "cd") == []


def test_cnb_similarity_examples():
    assert cnb_similarity(("3", "4", "1", "2"), ("1", "2", "3", "4")) == pytest.approx(0.5)
    assert cnb_similarity(("a", "b"), ("a", "b")) == 1.0
    assert cnb_similarity(("a",), ("b", "c")) == 0.0


def brute_cnb(t, db, theta, k):
    near = lambda a, b: cnb_similarity(a, b) > theta
    ds = []
    for v in db:
        shared = sum(1 for u in db if near(t, u) and near(u, v))
        ds.append(1.0 if shared == 0 else 1.0 - math.log2(shared) / math.log2(len(db)))
    return sum(sorted(ds)[:k])


def test_cnb_matches_brute_force():
    rng = random.Random(3)
    for _ in range(200):
        db = rand_db(rng, 7, 4)
        if len(db) < 2:
            db.append(("a",))
        t = rand_db(rng, 1, 4)[0]
        theta = rng.choice([0.1, 0.25, 0.5, 0.75])
        k = rng.randint(1, 3)
        assert cnb_score(t, db, CnbParams(theta, k)) == pytest.approx(brute_cnb(t, db, theta, k), abs=1e-12)


def test_cnb_clique_and_dissimilar():
    db = [("a", "b", "c")] * 5
    # t is near all five, which are all mutually near: |CNS| = |D|, distance 0
    assert cnb_score(("a", "b", "c"), db, CnbParams(0.25, 2)) == pytest.approx(0.0)
    assert cnb_score(("x", "y"), db, CnbParams(0.25, 2)) == pytest.approx(2.0)
    with pytest.raises(UsageError):
        CnbModel([("a",)])


@given(st.lists(st.lists(st.sampled_from("abc"), min_size=1, max_size=4).map(tuple), min_size=2, max_size=6),
       st.lists(st.sampled_from("abc"), min_size=1, max_size=4).map(tuple), st.randoms())
@settings(max_examples=60, deadline=None)
def test_scores_ignore_database_order(db, t, rnd):
    shuffled = list(db)
    rnd.shuffle(shuffled)
    assert cnb_score(t, db) == cnb_score(t, shuffled)
    assert fpof(t, db) == fpof(t, shuffled)
    assert kappa_lof(t, db) == kappa_lof(t, shuffled)


# ------------------------------------------------------------ grid search


def planted_cases():
    normal = [("a", "b", "c")] * 6 + [("a", "b")] * 4
    return [EvalCase(tuple(normal), (("a", "b", "c"), ("a", "b"), ("x", "y", "z")), (False, False, True))]


def test_grid_search_single_point_and_consistency():
    cases = planted_cases()
    for method in ("fpof", "kappa-lof", "cnb"):
        grid = default_grid(method)[:1]
        res = grid_search(method, cases, grid)
        scores, labels = score_cases(method, cases, grid[0])
        direction = -1 if method == "fpof" else 1
        assert res.best == grid[0]
        assert res.best_auc == roc_auc(scores, labels, direction).auc
        assert res.table == [(grid[0], res.best_auc)]


def test_grid_search_finds_planted_optimum():
    # at s0=20 nothing is frequent, every score is 0 and the AUC falls to chance
    cases = planted_cases()
    res = grid_search("fpof", cases, [FpofParams(20), FpofParams(2)])
    assert res.best == FpofParams(2) and res.best_auc == 1.0
    assert res.table[0][1] == 0.5


def test_grid_search_errors():
    with pytest.raises(UsageError):
        grid_search("fpof", planted_cases(), [])
    with pytest.raises(UsageError):
        default_grid("nope")


def test_output_formats():
    buf = io.StringIO()
    write_scores([("cnb", "t1", 0.5)], buf)
    assert buf.getvalue() == "method,transaction_id,score\ncnb,t1,0.5\n"
    buf = io.StringIO()
    write_grid("cnb", grid_search("cnb", planted_cases(), [CnbParams(0.25, 2)]), buf)
    assert buf.getvalue().splitlines() == ["method,params,auc", "cnb,theta=0.25;k=2,1.0"]
