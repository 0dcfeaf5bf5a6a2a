import io
import itertools
import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from rolewatch.errors import UsageError
from rolewatch.krimp import (
    CodeEntry, CodeTable, KrimpModel, MiningTrace, cover, cover_order_key, database_length,
    encode, encoded_length, krimp_mine, krimp_score, mine_candidates, model_cost,
    read_code_tables, standard_code_table, total_length, write_code_tables,
)


def test_standard_table_example():
    db = [("a",), ("a",), ("a", "b")]
    ct = standard_code_table(db)
    assert ct.usage(("a",)) == 3 and ct.usage(("b",)) == 1
    lengths = ct.code_lengths()
    assert lengths[("a",)] == pytest.approx(-math.log2(3 / 4))
    assert lengths[("b",)] == pytest.approx(2.0)
    assert encoded_length(("a", "b"), ct) == pytest.approx(2.415, abs=1e-3)
    assert encoded_length(("a", "b"), ct) == pytest.approx(lengths[("a",)] + 2.0)
    assert database_length(db, ct) == pytest.approx(3.245, abs=1e-3)
    assert ct.alphabet == {"a", "b"}


def test_single_item_database_costs_nothing():
    ct = standard_code_table([("x",)] * 4)
    assert ct.code_lengths()[("x",)] == 0.0


def test_empty_database_rejected():
    with pytest.raises(UsageError):
        standard_code_table([])
    with pytest.raises(UsageError):
        krimp_mine([("a",)], min_support=1)


def table(entries):
    """Code table from (items, usage, support) triples, put in cover order."""
    es = [CodeEntry(tuple(i), u, s) for i, u, s in entries]
    es.sort(key=cover_order_key)
    return CodeTable(es)


def test_cover_example():
    ct = table([(("a", "b"), 1, 2), (("a",), 1, 3), (("b",), 1, 3)])
    assert cover(("a", "b", "a"), ct) == [("a", "b"), ("a",)]
    assert cover(("a",), ct) == [("a",)]
    with pytest.raises(UsageError):
        cover(("z",), ct)


def test_identical_transactions_have_equal_length():
    db = [("p", "q", "p")] * 5
    ct = standard_code_table(db)
    assert len({encoded_length(t, ct) for t in db}) == 1


def test_repeated_motif_is_accepted():
    db = [("a", "b", "c")] * 50 + [("n1",), ("n2",), ("n3",), ("n4",), ("n5",)]
    st_ = standard_code_table(db)
    ct = krimp_mine(db)
    assert ("a", "b", "c") in [e.items for e in ct.composites()]
    assert database_length(db, ct) < database_length(db, st_)


def test_distinct_singletons_keep_standard_table():
    db = [("a",), ("b",), ("c",)]
    ct = krimp_mine(db)
    assert [e.items for e in ct.entries] == [e.items for e in standard_code_table(db).entries]


def test_exact_match_entry_never_lengthens_its_transaction():
    db = [("a", "b", "a"), ("a", "b"), ("b", "a"), ("a",)]
    t = ("a", "b", "a")
    base = standard_code_table(db)
    before = encoded_length(t, base)
    with_t = base.copy()
    with_t.entries.append(CodeEntry(t, 0, 1))
    with_t.entries.sort(key=cover_order_key)
    from rolewatch.krimp import _as_counter, _recount
    _recount(_as_counter(db), with_t)
    assert with_t.usage(t) > 0
    assert encoded_length(t, with_t) <= before


small_db = st.lists(
    st.lists(st.sampled_from("abc"), min_size=1, max_size=4).map(tuple), min_size=1, max_size=5,
)


@given(small_db)
@settings(max_examples=100, deadline=None)
def test_mining_invariants(db):
    trace = MiningTrace()
    ct = krimp_mine(db, trace=trace)
    for t in db:
        segs = cover(t, ct)
        assert tuple(x for s in segs for x in s) == t
    lengths = ct.code_lengths()
    data = sum(e.usage * lengths[e.items] for e in ct.entries if e.usage > 0)
    assert data == pytest.approx(database_length(db, ct), rel=1e-9, abs=1e-9)
    assert all(a >= b - 1e-9 for a, b in zip(trace.totals, trace.totals[1:]))
    assert all(v >= 0 for v in lengths.values())
    top = max(ct.entries, key=lambda e: e.usage)
    assert lengths[top.items] == min(lengths.values())
    again = krimp_mine(list(db))
    assert [(e.items, e.usage) for e in again.entries] == [(e.items, e.usage) for e in ct.entries]


def exhaustive_best(db):
    """Smallest total length over every code table built from the candidate set."""
    st_ = standard_code_table(db)
    cands = mine_candidates(db)
    best = math.inf
    counts = Counter(tuple(t) for t in db)
    from rolewatch.krimp import _recount
    for r in range(len(cands) + 1):
        for subset in itertools.combinations(cands, r):
            ct = st_.copy()
            ct.entries += [CodeEntry(x, 0, s) for x, s in subset]
            ct.entries.sort(key=cover_order_key)
            _recount(counts, ct)
            best = min(best, total_length(ct))
    return best, total_length(st_)


def test_greedy_between_exhaustive_optimum_and_standard():
    rng = random.Random(7)
    for _ in range(100):
        db = [tuple(rng.choice("abc") for _ in range(rng.randint(1, 4))) for _ in range(rng.randint(1, 5))]
        ct = krimp_mine(db)
        greedy = total_length(ct)
        optimum, standard = exhaustive_best(db)
        assert optimum - 1e-9 <= greedy <= standard + 1e-9


def test_model_cost_counts_only_used_entries():
    db = [("a", "b")] * 4
    ct = krimp_mine(db)
    assert ct.usage(("a",)) == 0
    # only the composite is in use; its items are spelled in standard codes
    assert model_cost(ct) == pytest.approx(0.0 + 1.0 + 1.0)


def test_frequent_transaction_scores_below_mean():
    db = [("a", "b")] * 20 + [("c",)] * 3 + [("a", "c", "b")] * 2
    model = KrimpModel.fit(db)
    assert model.score(("a", "b")).z < 0
    assert krimp_score(("a", "b"), model.ct, db).z == model.score(("a", "b")).z


def test_unknown_items_use_escape_code():
    db = [("a", "b")] * 5 + [("a",)] * 3 + [("b",)]
    ct = krimp_mine(db)
    enc = encode(("a", "zzz"), ct)
    assert enc.escaped == 1
    assert math.isfinite(enc.length_bits)
    assert krimp_score(("zzz",), ct, db).z > 0
    with pytest.raises(UsageError):
        encoded_length(("zzz",), ct)


def web_server_db():
    """One dominant singleton, a few rare items, and a composite-rich item."""
    db = [("x",)] * 60
    db += [("x", "x")] * 1
    db += [("r1", "r2")] * 1
    db += [("s", "t")] * 6
    return db


def test_doublet_of_dominant_item_is_cheap():
    model = KrimpModel.fit(web_server_db())
    assert model.score(("x", "x")).raw < model.score(("r1", "r2")).raw


def test_long_cluster_of_dominant_item_beats_short_rare_cluster():
    db = [("x",)] * 50 + [("x",) * 5] + [("r1",), ("r2",), ("r1", "r2", "q")]
    model = KrimpModel.fit(db)
    assert model.score(("x",) * 5).raw < model.score(("r1", "r2")).raw


def test_item_common_inside_clusters_encodes_short_alone():
    db = [("f",)] * 40
    db += [("y", f"q{i}") for i in range(12)]  # y is everywhere, but never twice the same way
    db += [("y",), ("z",)]
    model = KrimpModel.fit(db)
    assert model.score(("y",)).raw < model.score(("z",)).raw


def test_novel_doublet_can_cost_more_than_a_novel_singleton():
    db = [("f",)] * 60 + [("x",)] * 2 + [("x", "x")] + [("w",)]
    model = KrimpModel.fit(db)
    assert model.score(("x", "x")).raw > model.score(("w",)).raw


def test_krimp_flags_fewer_once_seen_clusters_than_frequency():
    from rolewatch.evaluation import build_role_sequences
    from rolewatch.ingest import make_synth_config, synth_generate
    from rolewatch.sequences import MatchDatabase

    cfg = make_synth_config(n_roles=2, n_systems=4, history_days=3, noise_rate=0.05, seed=11)
    data = synth_generate(cfg)
    seqs = build_role_sequences(data.records, cfg.subject, data.system_roles,
                                cfg.history_window, cfg.test_window)
    for role, db in seqs.history.items():
        freq = MatchDatabase.from_samples(db)
        once = [t for t, c in Counter(db).items() if c == 1]
        threshold = freq.score(once[0]).z
        model = KrimpModel.fit(db)
        flagged = [t for t in once if model.score(t).z >= threshold]
        assert len(flagged) < len(once)


def test_code_table_round_trip():
    db = [("a", "b", "c")] * 6 + [("a", "b")] * 3 + [("c",)] * 2 + [("d",)]
    tables = {"0": krimp_mine(db), "1": krimp_mine([("q", "r")] * 3 + [("q",)])}
    buf = io.StringIO()
    write_code_tables(tables, buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == "role,items,usage,code_length_bits"
    back = read_code_tables(io.StringIO(text))
    assert set(back) == {"0", "1"}
    for role, ct in tables.items():
        assert [(e.items, e.usage) for e in back[role].entries] == [(e.items, e.usage) for e in ct.entries]
        assert back[role].code_lengths() == ct.code_lengths()
        out = io.StringIO()
        write_code_tables({role: back[role]}, out)
        assert out.getvalue().splitlines()[1:] == [l for l in text.splitlines()[1:] if l.startswith(role + ",")]
