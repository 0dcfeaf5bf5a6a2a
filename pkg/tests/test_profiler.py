import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rolewatch.errors import UsageError
from rolewatch.ingest import ConnectionRecord
from rolewatch.profiler import (
    Kind, Representation, align_profiles, build_profile, rank_client_ports, rank_server_ports,
    read_profiles, select_ports, write_profiles,
)


def conns(system, counts, other="peer"):
    out = []
    t = 0.0
    for port, n in counts.items():
        for _ in range(n):
            out.append(ConnectionRecord(t, other, 55000, system, port, "p"))
            t += 1
    return out


def test_worked_cutoff_example():
    # 636 dominates; 139 falls below a third of it
    assert select_ports([(636, 8289), (139, 2282)], 3.0) == [636]
    assert 8289 / 3 == pytest.approx(2763, abs=0.5)
    assert select_ports([(636, 8289), (139, 2763)], 3.0) == [636, 139]


def test_select_stops_at_first_break():
    assert select_ports([(1, 90), (2, 40), (3, 10), (4, 9)], 3.0) == [1, 2]
    assert select_ports([], 3.0) == []
    with pytest.raises(UsageError):
        select_ports([(1, 1)], 1.0)


def test_rank_ties_prefer_lower_port():
    recs = conns("s", {445: 5, 80: 5, 22: 7})
    assert rank_server_ports(recs, "s") == [(22, 7), (80, 5), (445, 5)]
    # the same records seen from the dialing side
    assert rank_client_ports(recs, "peer") == [(22, 7), (80, 5), (445, 5)]


@given(st.dictionaries(st.integers(1, 65535), st.integers(1, 500), min_size=1, max_size=8))
def test_proportioned_sums_to_100(counts):
    prof = build_profile(conns("s", counts), "s")
    assert sum(prof.entries.values()) == pytest.approx(100.0)
    assert prof.ports <= set(counts)
    top = max(counts.values())
    assert any(counts[p] == top for p in prof.ports)


def test_binary_and_empty():
    prof = build_profile(conns("s", {80: 10, 443: 8}), "s", representation="binary")
    assert prof.entries == {80: 1.0, 443: 1.0}
    empty = build_profile([], "s")
    assert empty.empty and empty.low_confidence


def test_align_profiles():
    a = build_profile(conns("a", {80: 10}), "a")
    b = build_profile(conns("b", {443: 5, 80: 5}), "b")
    m, ports = align_profiles([a, b])
    assert ports == [80, 443]
    np.testing.assert_allclose(m, [[100, 0], [50, 50]])
    with pytest.raises(UsageError):
        align_profiles([a, b.as_binary()])


def test_profile_file_round_trip():
    profs = [build_profile(conns("a", {80: 7, 22: 3}), "a"),
             build_profile(conns("b", {443: 1}), "b", kind=Kind.SERVER,
                           representation=Representation.BINARY)]
    buf = io.StringIO()
    write_profiles(profs, buf)
    back = {p.system: p for p in read_profiles(io.StringIO(buf.getvalue()))}
    assert back["a"].entries == profs[0].entries
    assert back["b"].representation is Representation.BINARY
