"""Novel-role alerts: new peers that land in clusters with no historical peer."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

from .errors import UsageError
from .ingest import DAY, HOUR, ConnectionRecord, TimeWindow, peers_of, subject_window
from .profiler import DEFAULT_FACTOR, Kind, Representation, build_profiles
from .roles import Pipeline, RoleAssignment, select_clusters

DEFAULT_HISTORY_DAYS = 15
DEFAULT_TEST_HOURS = 24
ALERT_HEADER = "subject,peer,role,reason,window_start,window_end"


class AlertReason(str, enum.Enum):
    NOVEL_ROLE = "novel_role"


@dataclass(frozen=True)
class PeerNovelty:
    peer: str
    first_seen: float
    is_new: bool


@dataclass(frozen=True)
class RoleAlert:
    subject: str
    peer: str
    role: int
    reason: AlertReason
    assignment: RoleAssignment
    # the peer's profile was empty or built from too few records
    low_confidence: bool = False


def find_new_peers(
    history_records: Iterable[ConnectionRecord],
    test_records: Iterable[ConnectionRecord],
    subject: str,
) -> list[PeerNovelty]:
    """One entry per test-window peer; ``is_new`` when history never saw it."""
    seen_before: dict[str, float] = {}
    for r in history_records:
        peer = r.peer_of(subject)
        if peer is not None and (peer not in seen_before or r.timestamp < seen_before[peer]):
            seen_before[peer] = r.timestamp
    first_in_test: dict[str, float] = {}
    for r in test_records:
        peer = r.peer_of(subject)
        if peer is not None and (peer not in first_in_test or r.timestamp < first_in_test[peer]):
            first_in_test[peer] = r.timestamp
    return [
        PeerNovelty(peer, seen_before.get(peer, ts), peer not in seen_before)
        for peer, ts in sorted(first_in_test.items())
    ]


def detect_novel_roles(
    assignment: RoleAssignment,
    novelty: Sequence[PeerNovelty],
    subject: str = "",
    low_confidence: Iterable[str] = (),
) -> list[RoleAlert]:
    """Alert on every new peer whose cluster holds only new peers.

    ``assignment`` must label history and test peers together; any labeled
    system that is not a new peer counts as historical.
    """
    new_peers = {n.peer for n in novelty if n.is_new}
    missing = sorted(n.peer for n in novelty if n.peer not in assignment.labels)
    if missing:
        raise UsageError(f"peers missing from role assignment: {missing}")
    weak = set(low_confidence)
    historical_roles = {
        role for system, role in assignment.labels.items() if system not in new_peers
    }
    alerts = [
        RoleAlert(
            subject, peer, assignment.labels[peer], AlertReason.NOVEL_ROLE,
            assignment, low_confidence=peer in weak,
        )
        for peer in sorted(new_peers)
        if assignment.labels[peer] not in historical_roles
    ]
    return alerts


@dataclass
class RoleDetection:
    alerts: list[RoleAlert]
    novelty: list[PeerNovelty]
    assignment: RoleAssignment
    history: TimeWindow
    test: TimeWindow


def detect_roles_for_subject(
    records: Sequence[ConnectionRecord],
    subject: str,
    test_end: float,
    history_days: float = DEFAULT_HISTORY_DAYS,
    test_hours: float = DEFAULT_TEST_HOURS,
    pipeline: Pipeline | str = Pipeline.KMEANS_PROPORTIONED,
    factor: float = DEFAULT_FACTOR,
    kind: Kind | str = Kind.SERVER,
    seed: int = 0,
    n_clusters_range: Iterable[int] | None = None,
) -> RoleDetection:
    """Cluster the subject's history-plus-test neighborhood and raise alerts.

    Peers whose profile comes out empty cannot be clustered; each gets a
    private role of its own and any resulting alert is marked low-confidence.
    """
    test = TimeWindow(test_end - test_hours * HOUR, test_end)
    history = TimeWindow(test.start - history_days * DAY, test.start)
    hist_recs = subject_window(records, subject, history)
    test_recs = subject_window(records, subject, test)
    novelty = find_new_peers(hist_recs, test_recs, subject)
    peers = peers_of(hist_recs + test_recs, subject)
    full = TimeWindow(history.start, test.end)
    profiles = build_profiles(
        [r for r in records if r.timestamp in full], peers, kind,
        Representation.PROPORTIONED, factor,
    )
    _, assignment = select_clusters(
        pipeline, profiles, _clip_range(n_clusters_range, profiles), seed=seed, window=full,
    )
    weak = {p.system for p in profiles if p.low_confidence}
    next_role = max(assignment.labels.values(), default=-1) + 1
    for prof in profiles:
        if prof.empty:
            assignment.labels[prof.system] = next_role
            next_role += 1
    alerts = detect_novel_roles(assignment, novelty, subject, low_confidence=weak)
    return RoleDetection(alerts, novelty, assignment, history, test)


def _clip_range(n_clusters_range, profiles):
    n = sum(not p.empty for p in profiles)
    if n_clusters_range is None or n < 2:
        return None
    ks = [k for k in n_clusters_range if 2 <= k <= n]
    return ks or None


def write_alerts(alerts: Iterable[RoleAlert], window: TimeWindow, stream: TextIO) -> None:
    stream.write(ALERT_HEADER + "\n")
    for a in sorted(alerts, key=lambda a: (a.subject, a.peer)):
        reason = a.reason.value + (";low_confidence" if a.low_confidence else "")
        stream.write(
            f"{a.subject},{a.peer},{a.role},{reason},{window.start!r},{window.end!r}\n"
        )
