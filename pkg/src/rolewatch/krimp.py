"""Krimp for item *sequences*.

Transactions are ordered process clusters in which items may repeat.  A
code table holds contiguous item-sequences; a transaction is covered by
disjoint, contiguous occurrences of table entries, and each use costs
``-log2(usage / total usage)`` bits.  Mining greedily adds candidate
sequences that shrink the total description length ``L(CT) + L(D|CT)``.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

from .errors import UsageError
from .sequences import ZScore

log = logging.getLogger(__name__)

Items = tuple[str, ...]

DEFAULT_MIN_SUPPORT = 2
DEFAULT_MAX_CANDIDATE_LENGTH = 10
ACCEPT_TOLERANCE = 1e-9
CODE_TABLE_HEADER = "role,items,usage,code_length_bits"


def occurs_in(x: Items, t: Items) -> bool:
    """Whether ``x`` is a contiguous subsequence of ``t``."""
    n, m = len(t), len(x)
    return any(t[i:i + m] == x for i in range(n - m + 1))


def contiguous_subsequences(t: Items, min_len: int = 1, max_len: int | None = None) -> set[Items]:
    n = len(t)
    top = n if max_len is None else min(n, max_len)
    return {t[i:i + m] for m in range(min_len, top + 1) for i in range(n - m + 1)}


def code_length(usage: int, total: int) -> float:
    return -math.log2(usage / total)


@dataclass
class CodeEntry:
    items: Items
    usage: int = 0
    support: int = 0

    def __len__(self):
        return len(self.items)


def cover_order_key(entry: CodeEntry):
    return (-len(entry.items), -entry.support, entry.items)


@dataclass
class CodeTable:
    """Entries in cover order (length desc, support desc, lexicographic).

    ``standard_lengths`` are the singleton code lengths of the standard
    table of the database the table was mined from; they price the spelled-
    out items in the model cost.
    """

    entries: list[CodeEntry]
    standard_lengths: dict[str, float] = field(default_factory=dict)

    @property
    def alphabet(self) -> set[str]:
        return {e.items[0] for e in self.entries if len(e.items) == 1}

    @property
    def total_usage(self) -> int:
        return sum(e.usage for e in self.entries)

    def usage(self, items: Items) -> int:
        for e in self.entries:
            if e.items == items:
                return e.usage
        raise KeyError(items)

    def code_lengths(self) -> dict[Items, float]:
        """Code length of each in-use entry; unused entries carry no code."""
        total = self.total_usage
        return {e.items: code_length(e.usage, total) for e in self.entries if e.usage > 0}

    def escape_length(self) -> float:
        """Bits charged for an item the table cannot encode."""
        lengths = self.code_lengths()
        singles = [v for k, v in lengths.items() if len(k) == 1]
        return (max(singles) if singles else 0.0) + 1.0

    def composites(self) -> list[CodeEntry]:
        return [e for e in self.entries if len(e.items) > 1]

    def copy(self) -> "CodeTable":
        return CodeTable(
            [CodeEntry(e.items, e.usage, e.support) for e in self.entries],
            dict(self.standard_lengths),
        )


@dataclass
class Encoding:
    transaction: Items
    # (start position, entry items); entry is None for an escaped item
    cover: list[tuple[int, Items | None]]
    length_bits: float
    escaped: int = 0


def _cover_positions(t: Items, entries: Iterable[Items]) -> list[tuple[int, Items]]:
    n = len(t)
    covered = [False] * n
    remaining = n
    segments: list[tuple[int, Items]] = []
    for x in entries:
        m = len(x)
        if m > n:
            continue
        i = 0
        while i <= n - m:
            if t[i:i + m] == x and not any(covered[i:i + m]):
                for j in range(i, i + m):
                    covered[j] = True
                segments.append((i, x))
                remaining -= m
                i += m
            else:
                i += 1
        if remaining == 0:
            break
    segments.sort()
    return segments


def cover(t: Sequence[str], ct: CodeTable, in_use_only: bool = True) -> list[Items]:
    """Greedy cover of ``t`` by code table entries, in positional order.

    Entries are tried in cover order; each claims all of its leftmost
    non-overlapping matches among still-uncovered positions.  Composites
    without usage have no code and are skipped unless ``in_use_only`` is
    false.  Items outside the table's alphabet raise :class:`UsageError`.
    """
    t = tuple(t)
    unknown = set(t) - ct.alphabet
    if unknown:
        raise UsageError(f"items not in code table: {sorted(unknown)}")
    return [x for _, x in _cover_positions(t, _cover_entries(ct, in_use_only))]


def _cover_entries(ct: CodeTable, in_use_only: bool) -> list[Items]:
    return [e.items for e in ct.entries if len(e.items) == 1 or e.usage > 0 or not in_use_only]


def encode(t: Sequence[str], ct: CodeTable) -> Encoding:
    """Cover and price ``t``; unknown items and unused singletons are escaped."""
    t = tuple(t)
    lengths = ct.code_lengths()
    escape = ct.escape_length()
    alphabet = ct.alphabet
    # unknown items split the transaction; cover the known stretches
    segments: list[tuple[int, Items | None]] = []
    start = 0
    for i in range(len(t) + 1):
        if i == len(t) or t[i] not in alphabet:
            if i > start:
                part = t[start:i]
                segments.extend(
                    (start + pos, x) for pos, x in _cover_positions(part, _cover_entries(ct, True))
                )
            if i < len(t):
                segments.append((i, None))
            start = i + 1
    bits = 0.0
    escaped = 0
    for pos, x in segments:
        if x is None or x not in lengths:
            bits += escape
            escaped += 1
        else:
            bits += lengths[x]
    return Encoding(t, segments, bits, escaped)


def encoded_length(t: Sequence[str], ct: CodeTable) -> float:
    """L(t|CT): summed code lengths over the cover of ``t``."""
    t = tuple(t)
    unknown = set(t) - ct.alphabet
    if unknown:
        raise UsageError(f"items not in code table: {sorted(unknown)}")
    return encode(t, ct).length_bits


def _recount(db: Counter, ct: CodeTable) -> None:
    entries = _cover_entries(ct, in_use_only=False)
    usage: Counter = Counter()
    for t, mult in db.items():
        for _, x in _cover_positions(t, entries):
            usage[x] += mult
    for e in ct.entries:
        e.usage = usage.get(e.items, 0)


def _as_counter(database: Iterable[Sequence[str]]) -> Counter:
    db = Counter(tuple(t) for t in database)
    if not db:
        raise UsageError("database is empty")
    if any(len(t) == 0 for t in db):
        raise UsageError("transactions must be non-empty")
    return db


def standard_code_table(database: Iterable[Sequence[str]]) -> CodeTable:
    """Singleton-only table with usages from covering every transaction item by item."""
    db = _as_counter(database)
    occurrences: Counter = Counter()
    support: Counter = Counter()
    for t, mult in db.items():
        for item in t:
            occurrences[item] += mult
        for item in set(t):
            support[item] += mult
    entries = [CodeEntry((item,), occurrences[item], support[item]) for item in occurrences]
    entries.sort(key=cover_order_key)
    total = sum(occurrences.values())
    standard = {item: code_length(u, total) for item, u in occurrences.items()}
    return CodeTable(entries, standard)


def database_length(database: Iterable[Sequence[str]], ct: CodeTable) -> float:
    """L(D|CT) after recounting usages from the covers of ``database``."""
    db = _as_counter(database)
    table = ct.copy()
    _recount(db, table)
    return _data_cost(table)


def _data_cost(ct: CodeTable) -> float:
    total = ct.total_usage
    return sum(e.usage * code_length(e.usage, total) for e in ct.entries if e.usage > 0)


def model_cost(ct: CodeTable) -> float:
    """L(CT): each in-use entry's code plus its items spelled in standard codes."""
    total = ct.total_usage
    cost = 0.0
    for e in ct.entries:
        if e.usage > 0:
            cost += code_length(e.usage, total)
            cost += sum(ct.standard_lengths[i] for i in e.items)
    return cost


def total_length(ct: CodeTable) -> float:
    return model_cost(ct) + _data_cost(ct)


def candidate_order_key(items: Items, support: int):
    return (-support, -len(items), items)


def mine_candidates(
    database: Iterable[Sequence[str]],
    min_support: int = DEFAULT_MIN_SUPPORT,
    max_candidate_length: int = DEFAULT_MAX_CANDIDATE_LENGTH,
) -> list[tuple[Items, int]]:
    """Contiguous subsequences of length >= 2 with transaction support >= ``min_support``.

    Returned in candidate order: support desc, length desc, lexicographic.
    """
    db = _as_counter(database)
    support: Counter = Counter()
    for t, mult in db.items():
        for x in contiguous_subsequences(t, 2, max_candidate_length):
            support[x] += mult
    cands = [(x, s) for x, s in support.items() if s >= min_support]
    cands.sort(key=lambda xs: candidate_order_key(*xs))
    return cands


def _insert(ct: CodeTable, entry: CodeEntry) -> CodeTable:
    table = ct.copy()
    table.entries.append(entry)
    table.entries.sort(key=cover_order_key)
    return table


@dataclass
class MiningTrace:
    """Total description length after the start and after each acceptance."""

    totals: list[float] = field(default_factory=list)
    accepted: list[Items] = field(default_factory=list)
    considered: int = 0


def krimp_mine(
    database: Iterable[Sequence[str]],
    min_support: int = DEFAULT_MIN_SUPPORT,
    max_candidate_length: int = DEFAULT_MAX_CANDIDATE_LENGTH,
    trace: MiningTrace | None = None,
) -> CodeTable:
    """Greedy Krimp over contiguous item-sequences.

    Each candidate is added tentatively; it stays only if the total
    compressed size strictly decreases, otherwise it is dropped for good.
    Only transactions that contain the candidate are re-covered.
    """
    if min_support < 2:
        raise UsageError("min_support below 2 cannot compress")
    db = _as_counter(database)
    ct = standard_code_table(db.elements())
    distinct = list(db)
    covers: dict[Items, Counter] = {}
    usage: Counter = Counter()
    entries = _cover_entries(ct, in_use_only=False)
    for t in distinct:
        c = Counter(x for _, x in _cover_positions(t, entries))
        covers[t] = c
        for x, k in c.items():
            usage[x] += k * db[t]
    best = _total_from_usage(usage, ct.standard_lengths)
    if trace is not None:
        trace.totals.append(best)

    for items, sup in mine_candidates(db.elements(), min_support, max_candidate_length):
        if trace is not None:
            trace.considered += 1
        trial = _insert(ct, CodeEntry(items, 0, sup))
        entries = _cover_entries(trial, in_use_only=False)
        touched = [t for t in distinct if occurs_in(items, t)]
        new_usage = usage.copy()
        new_covers = {}
        for t in touched:
            c = Counter(x for _, x in _cover_positions(t, entries))
            new_covers[t] = c
            mult = db[t]
            for x, k in covers[t].items():
                new_usage[x] -= k * mult
            for x, k in c.items():
                new_usage[x] += k * mult
        total = _total_from_usage(new_usage, ct.standard_lengths)
        if total < best - ACCEPT_TOLERANCE:
            ct, usage, best = trial, new_usage, total
            covers.update(new_covers)
            if trace is not None:
                trace.totals.append(best)
                trace.accepted.append(items)
    for e in ct.entries:
        e.usage = usage.get(e.items, 0)
    return ct


def _total_from_usage(usage: Counter, standard: dict[str, float]) -> float:
    total = sum(u for u in usage.values() if u > 0)
    cost = 0.0
    for x, u in usage.items():
        if u > 0:
            length = code_length(u, total)
            cost += u * length + length + sum(standard[i] for i in x)
    return cost


@dataclass
class KrimpModel:
    """A code table frozen together with the length statistics of its database."""

    ct: CodeTable
    mu: float
    sigma: float
    n: int

    @classmethod
    def fit(
        cls,
        database: Sequence[Sequence[str]],
        min_support: int = DEFAULT_MIN_SUPPORT,
        max_candidate_length: int = DEFAULT_MAX_CANDIDATE_LENGTH,
    ) -> "KrimpModel":
        ct = krimp_mine(database, min_support, max_candidate_length)
        return cls.from_table(ct, database)

    @classmethod
    def from_table(cls, ct: CodeTable, database: Sequence[Sequence[str]]) -> "KrimpModel":
        db = _as_counter(database)
        lengths = {t: encode(t, ct).length_bits for t in db}
        total = sum(db.values())
        mu = sum(lengths[t] * m for t, m in db.items()) / total
        var = sum((lengths[t] - mu) ** 2 * m for t, m in db.items()) / total
        return cls(ct, mu, math.sqrt(var), total)

    def score(self, t: Sequence[str]) -> ZScore:
        return ZScore.compute(encode(tuple(t), self.ct).length_bits, self.mu, self.sigma, direction=1)


def krimp_score(t: Sequence[str], ct: CodeTable, role_database: Sequence[Sequence[str]]) -> ZScore:
    """Standardized encoded length of ``t`` against its role's database lengths.

    Items the table has never seen cost the escape length each.
    """
    return KrimpModel.from_table(ct, role_database).score(t)


# --------------------------------------------------------------------------
# persistence


def write_code_tables(tables: dict, stream: TextIO) -> None:
    stream.write(CODE_TABLE_HEADER + "\n")
    for role in sorted(tables, key=str):
        ct = tables[role]
        lengths = ct.code_lengths()
        for e in ct.entries:
            bits = repr(lengths[e.items]) if e.items in lengths else ""
            stream.write(f"{role},{';'.join(e.items)},{e.usage},{bits}\n")


def read_code_tables(stream: TextIO) -> dict[str, CodeTable]:
    """Inverse of :func:`write_code_tables`; roles come back as strings."""
    header = stream.readline().strip()
    if header != CODE_TABLE_HEADER:
        raise ValueError(f"expected header {CODE_TABLE_HEADER!r}")
    tables: dict[str, CodeTable] = {}
    for line_no, line in enumerate(stream, start=2):
        line = line.rstrip("\n")
        if not line:
            continue
        try:
            role, items, usage, bits = line.split(",")
            entry = CodeEntry(tuple(items.split(";")), int(usage))
        except ValueError as exc:
            raise ValueError(f"line {line_no}: {exc}") from None
        if bits and entry.usage == 0:
            raise ValueError(f"line {line_no}: unused entry cannot carry a code")
        tables.setdefault(role, CodeTable([])).entries.append(entry)
    return tables
