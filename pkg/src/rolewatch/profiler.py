"""Server and client port profiles.

A system's candidate ports are ranked by connection count and truncated
where the count falls below ``1/factor`` of the next-higher port, which
drops ephemeral client ports.  The surviving ports become a profile in
either the proportioned (percent of connections) or binary representation.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import UsageError
from .ingest import ConnectionRecord, TimeWindow

DEFAULT_FACTOR = 3.0
LOW_CONFIDENCE_RECORDS = 10
PROFILE_HEADER = "system,kind,representation,port,value"


class Representation(str, enum.Enum):
    PROPORTIONED = "proportioned"
    BINARY = "binary"


class Kind(str, enum.Enum):
    SERVER = "server"
    CLIENT = "client"


RankedPorts = list[tuple[int, int]]


def _rank(counter: Counter) -> RankedPorts:
    return sorted(counter.items(), key=lambda pc: (-pc[1], pc[0]))


def rank_server_ports(records: Iterable[ConnectionRecord], subject: str) -> RankedPorts:
    """Ports local to ``subject`` ranked by connection count, descending.

    Ties go to the lower port number.
    """
    counts: Counter = Counter()
    for r in records:
        if r.local_ip == subject:
            counts[r.local_port] += 1
        elif r.remote_ip == subject:
            counts[r.remote_port] += 1
    return _rank(counts)


def rank_client_ports(records: Iterable[ConnectionRecord], subject: str) -> RankedPorts:
    """Remote ports ``subject`` talks to, ranked like :func:`rank_server_ports`."""
    counts: Counter = Counter()
    for r in records:
        if r.local_ip == subject:
            counts[r.remote_port] += 1
        elif r.remote_ip == subject:
            counts[r.local_port] += 1
    return _rank(counts)


def select_ports(ranked: RankedPorts, factor: float = DEFAULT_FACTOR) -> list[int]:
    """Keep the ranking's head while each count stays within ``factor`` of the previous."""
    if factor <= 1:
        raise UsageError(f"factor must exceed 1, got {factor}")
    if not ranked:
        return []
    kept = [ranked[0][0]]
    for (_, prev), (port, count) in zip(ranked, ranked[1:]):
        if count < prev / factor:
            break
        kept.append(port)
    return kept


@dataclass(frozen=True)
class PortProfile:
    system: str
    representation: Representation
    kind: Kind
    entries: dict[int, float]
    window: TimeWindow | None = None
    n_records: int = 0

    @property
    def empty(self) -> bool:
        return not self.entries

    @property
    def low_confidence(self) -> bool:
        return self.n_records < LOW_CONFIDENCE_RECORDS

    @property
    def ports(self) -> frozenset[int]:
        return frozenset(self.entries)

    def as_binary(self) -> "PortProfile":
        return PortProfile(
            self.system, Representation.BINARY, self.kind,
            {p: 1.0 for p in sorted(self.entries)}, self.window, self.n_records,
        )


def build_profile(
    records: Sequence[ConnectionRecord],
    subject: str,
    kind: Kind | str = Kind.SERVER,
    representation: Representation | str = Representation.PROPORTIONED,
    factor: float = DEFAULT_FACTOR,
    window: TimeWindow | None = None,
) -> PortProfile:
    """Profile ``subject`` from ``records``.

    Proportioned values are each selected port's share of the connections on
    selected ports, in percent, so they sum to 100.  A system with no
    connections yields an empty profile (``profile.empty``), which callers
    leave out of clustering.
    """
    kind = Kind(kind)
    representation = Representation(representation)
    if window is not None:
        records = [r for r in records if r.timestamp in window]
    touching = [r for r in records if r.touches(subject)]
    ranker = rank_server_ports if kind is Kind.SERVER else rank_client_ports
    ranked = ranker(touching, subject)
    selected = select_ports(ranked, factor)
    counts = dict(ranked)
    if representation is Representation.BINARY:
        entries = {p: 1.0 for p in sorted(selected)}
    else:
        total = sum(counts[p] for p in selected)
        entries = {p: 100.0 * counts[p] / total for p in sorted(selected)}
    return PortProfile(subject, representation, kind, entries, window, len(touching))


def build_profiles(
    records: Sequence[ConnectionRecord],
    systems: Iterable[str],
    kind: Kind | str = Kind.SERVER,
    representation: Representation | str = Representation.PROPORTIONED,
    factor: float = DEFAULT_FACTOR,
    window: TimeWindow | None = None,
) -> list[PortProfile]:
    """Profiles for many systems with a single pass over ``records``."""
    systems = list(systems)
    wanted = set(systems)
    by_system: dict[str, list[ConnectionRecord]] = {s: [] for s in systems}
    for r in records:
        if window is not None and r.timestamp not in window:
            continue
        if r.local_ip in wanted:
            by_system[r.local_ip].append(r)
        if r.remote_ip in wanted:
            by_system[r.remote_ip].append(r)
    return [build_profile(by_system[s], s, kind, representation, factor) for s in systems]


def align_profiles(profiles: Sequence[PortProfile]) -> tuple[np.ndarray, list[int]]:
    """Dense matrix of profiles over the ascending union of their ports."""
    if not profiles:
        return np.zeros((0, 0)), []
    reps = {p.representation for p in profiles}
    kinds = {p.kind for p in profiles}
    if len(reps) > 1 or len(kinds) > 1:
        raise UsageError("cannot align profiles of mixed representation or kind")
    ports = sorted(set().union(*(p.entries for p in profiles)))
    column = {port: j for j, port in enumerate(ports)}
    matrix = np.zeros((len(profiles), len(ports)))
    for i, prof in enumerate(profiles):
        for port, value in prof.entries.items():
            matrix[i, column[port]] = value
    return matrix, ports


def write_profiles(profiles: Iterable[PortProfile], stream: TextIO) -> None:
    stream.write(PROFILE_HEADER + "\n")
    rows = sorted(
        ((p.system, p.kind.value, p.representation.value, port, value)
         for p in profiles for port, value in p.entries.items()),
        key=lambda row: (row[0], row[3]),
    )
    for system, kind, rep, port, value in rows:
        stream.write(f"{system},{kind},{rep},{port},{value!r}\n")


def read_profiles(stream: TextIO) -> list[PortProfile]:
    header = stream.readline().strip()
    if header != PROFILE_HEADER:
        raise ValueError(f"expected header {PROFILE_HEADER!r}, got {header!r}")
    grouped: dict[tuple[str, str, str], dict[int, float]] = {}
    for line_no, line in enumerate(stream, start=2):
        line = line.strip()
        if not line:
            continue
        try:
            system, kind, rep, port, value = line.split(",")
            grouped.setdefault((system, kind, rep), {})[int(port)] = float(value)
        except ValueError as exc:
            raise ValueError(f"line {line_no}: {exc}") from None
    return [
        PortProfile(system, Representation(rep), Kind(kind), entries)
        for (system, kind, rep), entries in grouped.items()
    ]
