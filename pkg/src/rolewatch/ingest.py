"""Connection records: parsing, windowing and synthetic generation.

The record file is line-delimited text with a fixed header::

    ts,local_ip,local_port,remote_ip,remote_port,process

Identifiers are opaque strings; nothing here interprets them as addresses.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import ConfigError

RECORD_HEADER = "ts,local_ip,local_port,remote_ip,remote_port,process"
FIELDS = RECORD_HEADER.split(",")

EPHEMERAL_PORTS = (49152, 65536)
SYNTH_EPOCH = 1_600_000_000.0
DAY = 86400.0
HOUR = 3600.0


def normalize_process(name: str) -> str:
    """Lowercase a process name and strip a trailing ``.exe``."""
    name = name.strip().lower()
    if name.endswith(".exe"):
        name = name[:-4]
    return name


@dataclass(frozen=True, order=True)
class ConnectionRecord:
    timestamp: float
    local_ip: str
    local_port: int
    remote_ip: str
    remote_port: int
    process: str

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"timestamp must be finite and non-negative, got {self.timestamp!r}")
        for name in ("local_port", "remote_port"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise ValueError(f"{name} out of range: {port}")
        if not self.local_ip or not self.remote_ip:
            raise ValueError("system identifiers must be non-empty")
        if self.local_ip == self.remote_ip:
            raise ValueError(f"local_ip equals remote_ip ({self.local_ip})")
        if not self.process:
            raise ValueError("process name must be non-empty")

    def touches(self, system: str) -> bool:
        return self.local_ip == system or self.remote_ip == system

    def peer_of(self, subject: str) -> str | None:
        """The other endpoint when ``subject`` is one side, else None."""
        if self.local_ip == subject:
            return self.remote_ip
        if self.remote_ip == subject:
            return self.local_ip
        return None

    def to_line(self) -> str:
        return (
            f"{self.timestamp!r},{self.local_ip},{self.local_port},"
            f"{self.remote_ip},{self.remote_port},{self.process}"
        )


@dataclass(frozen=True)
class TimeWindow:
    """Half-open interval ``[start, end)`` in epoch seconds."""

    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"window start must precede end: {self.start} >= {self.end}")

    def __contains__(self, timestamp: float) -> bool:
        return self.start <= timestamp < self.end

    @property
    def duration(self) -> float:
        return self.end - self.start

    @classmethod
    def ending_at(cls, end: float, seconds: float) -> "TimeWindow":
        return cls(end - seconds, end)


@dataclass(frozen=True)
class RecordError:
    line_no: int
    field: str
    message: str

    def __str__(self):
        return f"line {self.line_no}: {self.field}: {self.message}"


@dataclass
class ParseResult:
    records: list[ConnectionRecord] = field(default_factory=list)
    errors: list[RecordError] = field(default_factory=list)


def _parse_line(line: str, line_no: int) -> ConnectionRecord | RecordError:
    parts = line.split(",")
    if len(parts) != len(FIELDS):
        return RecordError(line_no, "line", f"expected {len(FIELDS)} fields, got {len(parts)}")
    ts_s, lip, lport_s, rip, rport_s, proc = (p.strip() for p in parts)
    try:
        ts = float(ts_s)
    except ValueError:
        return RecordError(line_no, "ts", f"not a number: {ts_s!r}")
    if not math.isfinite(ts) or ts < 0:
        return RecordError(line_no, "ts", f"must be finite and non-negative: {ts_s!r}")
    ports = []
    for name, raw in (("local_port", lport_s), ("remote_port", rport_s)):
        try:
            port = int(raw)
        except ValueError:
            return RecordError(line_no, name, f"not an integer: {raw!r}")
        if not 0 <= port <= 65535:
            return RecordError(line_no, name, f"out of range 0-65535: {port}")
        ports.append(port)
    if not lip:
        return RecordError(line_no, "local_ip", "empty")
    if not rip:
        return RecordError(line_no, "remote_ip", "empty")
    if lip == rip:
        return RecordError(line_no, "remote_ip", "equals local_ip")
    proc = normalize_process(proc)
    if not proc:
        return RecordError(line_no, "process", "empty")
    return ConnectionRecord(ts, lip, ports[0], rip, ports[1], proc)


def parse_records(stream: TextIO | Iterable[str]) -> ParseResult:
    """Parse a record stream, collecting per-line errors instead of aborting.

    The header line is required when the stream is non-empty; blank lines are
    skipped.  Records are returned in file order.
    """
    result = ParseResult()
    saw_header = False
    for line_no, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if not saw_header:
            saw_header = True
            if line.strip().replace(" ", "") == RECORD_HEADER:
                continue
            result.errors.append(RecordError(line_no, "header", f"expected {RECORD_HEADER!r}"))
            continue
        parsed = _parse_line(line, line_no)
        if isinstance(parsed, RecordError):
            result.errors.append(parsed)
        else:
            result.records.append(parsed)
    return result


def parse_records_text(text: str) -> ParseResult:
    return parse_records(io.StringIO(text))


def serialize_records(records: Iterable[ConnectionRecord], stream: TextIO) -> None:
    stream.write(RECORD_HEADER + "\n")
    for rec in records:
        stream.write(rec.to_line() + "\n")


def records_to_text(records: Iterable[ConnectionRecord]) -> str:
    buf = io.StringIO()
    serialize_records(records, buf)
    return buf.getvalue()


def sort_chronological(records: Iterable[ConnectionRecord]) -> list[ConnectionRecord]:
    # stable: equal timestamps keep input order
    return sorted(records, key=lambda r: r.timestamp)


def subject_window(
    records: Iterable[ConnectionRecord], subject: str, window: TimeWindow
) -> list[ConnectionRecord]:
    """Records touching ``subject`` with ``start <= ts < end``, chronologically."""
    return sort_chronological(
        r for r in records if r.touches(subject) and r.timestamp in window
    )


def peers_of(records: Iterable[ConnectionRecord], subject: str) -> list[str]:
    """Distinct peers of ``subject`` in sorted order."""
    peers = {r.peer_of(subject) for r in records}
    peers.discard(None)
    return sorted(peers)


# --------------------------------------------------------------------------
# Synthetic generation

PROCESS_POOL = (
    "lsass", "ntoskrnl", "svchost", "services", "wininit", "winlogon", "dns",
    "dfsrs", "ismserv", "microsoft.tri.gateway", "w3wp", "inetinfo", "sqlservr",
    "sqlagent", "reportingservicesservice", "msmdsrv", "exchange.transport",
    "msexchangefrontendtransport", "store.worker", "edgetransport", "umservice",
    "vmms", "vmwp", "vmcompute", "spoolsv", "printfilterpipelinesvc", "wsusservice",
    "ccmexec", "smsexec", "sitecomp", "wmiprvse", "taskhostw", "explorer",
    "chrome", "outlook", "teams", "onedrive", "searchindexer", "msmpeng",
    "nissrv", "splunkd", "nxlog", "java", "tomcat9", "httpd", "nginx", "node",
    "python", "postgres", "mongod", "redis-server", "elasticsearch", "kibana",
    "ntpd", "w32tm", "certsrv", "dhcpserver", "radiusd", "sshd", "rdpclip",
    "termsrv", "veeam.backup.service", "backupexec", "sapstartsrv", "oracle",
    "tnslsnr", "jenkins", "gitlab-workhorse", "mssense", "senseir",
)
SHARED_PROCESSES = ("svchost", "ntoskrnl", "lsass", "system")


@dataclass(frozen=True)
class Motif:
    """A process-sequence motif emitted as a burst of connection events.

    ``rate`` is expected instances per hour while the peer is active; the
    gaps between consecutive events are uniform on ``gap`` seconds.
    """

    processes: tuple[str, ...]
    rate: float
    gap: tuple[float, float] = (0.2, 1.5)


@dataclass
class SynthConfig:
    n_roles: int
    n_systems: int
    history_days: int
    role_port_templates: list[list[tuple[int, float]]]
    role_grammar: list[list[Motif]]
    noise_rate: float = 0.05
    seed: int = 0
    test_hours: float = 24.0
    subject: str = "subject"
    # per-role probability that a peer is active on a given day
    role_activity: list[float] | None = None
    # per-system multiplicative jitter on template weights (gamma shape)
    weight_jitter: float = 20.0
    start: float = SYNTH_EPOCH
    # emit motif instances in round-robin grammar order instead of independently
    cyclic: bool = False

    def validate(self) -> None:
        if self.n_roles < 1 or self.n_systems < 1 or self.history_days < 1:
            raise ConfigError("n_roles, n_systems and history_days must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.test_hours <= 0:
            raise ConfigError("test_hours must be positive")
        if len(self.role_port_templates) != self.n_roles or len(self.role_grammar) != self.n_roles:
            raise ConfigError("need one port template and one grammar per role")
        for r, template in enumerate(self.role_port_templates):
            if not template:
                raise ConfigError(f"role {r} has no template ports")
            for port, weight in template:
                if not 0 <= port <= 65535:
                    raise ConfigError(f"role {r}: port {port} out of range")
                if not weight > 0:
                    raise ConfigError(f"role {r}: template weights must be positive")
        for r, grammar in enumerate(self.role_grammar):
            if not grammar:
                raise ConfigError(f"role {r} has no motifs")
            for motif in grammar:
                if not motif.processes:
                    raise ConfigError(f"role {r}: empty motif")
                if not motif.rate > 0:
                    raise ConfigError(f"role {r}: motif rates must be positive")
                lo, hi = motif.gap
                if lo < 0 or hi < lo:
                    raise ConfigError(f"role {r}: bad gap range {motif.gap}")
        if self.role_activity is not None:
            if len(self.role_activity) != self.n_roles:
                raise ConfigError("role_activity needs one entry per role")
            if any(not 0 < a <= 1 for a in self.role_activity):
                raise ConfigError("role_activity entries must lie in (0, 1]")

    @property
    def history_end(self) -> float:
        return self.start + self.history_days * DAY

    @property
    def history_window(self) -> TimeWindow:
        return TimeWindow(self.start, self.history_end)

    @property
    def test_window(self) -> TimeWindow:
        return TimeWindow(self.history_end, self.history_end + self.test_hours * HOUR)


@dataclass
class SynthData:
    records: list[ConnectionRecord]
    system_roles: dict[str, int]
    # one label per record: "noise" or "r<role>m<motif>"
    record_labels: list[str]
    config: SynthConfig

    def roles_of(self, systems: Iterable[str]) -> list[int]:
        return [self.system_roles[s] for s in systems]


def system_name(index: int) -> str:
    return f"sys{index:04d}"


def make_synth_config(
    n_roles: int = 6,
    n_systems: int = 24,
    history_days: int = 10,
    noise_rate: float = 0.05,
    seed: int = 0,
    ports_per_role: tuple[int, int] = (2, 5),
    motifs_per_role: tuple[int, int] = (3, 5),
    motif_length: tuple[int, int] = (1, 4),
    vocab_per_role: int = 5,
    shared_fraction: float = 0.15,
    motif_rate: float = 2.0,
    test_hours: float = 24.0,
    role_activity: list[float] | None = None,
    cyclic: bool = False,
) -> SynthConfig:
    """Draw a random but valid config with disjoint per-role port templates.

    Each role gets its own slice of service ports and its own process
    vocabulary; a small fraction of motif items come from a shared pool
    (``svchost`` and friends), so roles overlap on very common processes.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    candidate_ports = np.arange(1, 49152)
    needed = n_roles * ports_per_role[1]
    port_block = rng.choice(candidate_ports, size=needed, replace=False)
    private = [p for p in PROCESS_POOL if p not in SHARED_PROCESSES]
    if n_roles * vocab_per_role > len(private):
        private = private + [f"proc{i:03d}" for i in range(n_roles * vocab_per_role - len(private))]
    vocab = rng.permutation(private)[: n_roles * vocab_per_role]
    templates, grammars = [], []
    for r in range(n_roles):
        k = int(rng.integers(ports_per_role[0], ports_per_role[1] + 1))
        ports = sorted(int(p) for p in port_block[r * ports_per_role[1]: r * ports_per_role[1] + k])
        # bounded spread keeps every template port inside the factor-3 cutoff
        weights = rng.uniform(1.0, 2.0, size=k)
        templates.append([(p, round(float(w), 3)) for p, w in zip(ports, weights)])
        role_vocab = [str(v) for v in vocab[r * vocab_per_role: (r + 1) * vocab_per_role]]
        n_motifs = int(rng.integers(motifs_per_role[0], motifs_per_role[1] + 1))
        motifs: list[Motif] = []
        seen: set[tuple[str, ...]] = set()
        while len(motifs) < n_motifs:
            length = int(rng.integers(motif_length[0], motif_length[1] + 1))
            items = tuple(
                str(rng.choice(SHARED_PROCESSES)) if rng.random() < shared_fraction
                else str(rng.choice(role_vocab))
                for _ in range(length)
            )
            if items in seen:
                continue
            seen.add(items)
            rate = motif_rate * float(rng.uniform(0.7, 1.3))
            motifs.append(Motif(items, round(rate, 4)))
        grammars.append(motifs)
    return SynthConfig(
        n_roles=n_roles,
        n_systems=n_systems,
        history_days=history_days,
        role_port_templates=templates,
        role_grammar=grammars,
        noise_rate=noise_rate,
        seed=seed,
        test_hours=test_hours,
        role_activity=role_activity,
        cyclic=cyclic,
    )


def _assign_roles(n_systems: int, n_roles: int, rng: np.random.Generator) -> list[int]:
    base = [i % n_roles for i in range(n_systems)]
    return [int(r) for r in rng.permutation(base)]


def synth_generate(config: SynthConfig) -> SynthData:
    """Generate subject-to-peer connection records with ground truth.

    Every peer is a server of one role; the subject dials it from an
    ephemeral port.  On each active day a peer emits Poisson-many instances
    of each of its role's motifs, plus Poisson noise singletons drawn from the
    role vocabulary.  With probability ``noise_rate`` an event lands on a
    uniformly random port instead of a template port.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    roles = _assign_roles(config.n_systems, config.n_roles, rng)
    activity = config.role_activity or [1.0] * config.n_roles
    total = config.history_days * DAY + config.test_hours * HOUR
    n_days = int(math.ceil(total / DAY))

    rows: list[tuple[float, int, str, str]] = []
    port_tables: list[tuple[np.ndarray, np.ndarray]] = []
    for s in range(config.n_systems):
        role = roles[s]
        template = config.role_port_templates[role]
        ports = np.array([p for p, _ in template])
        jitter = rng.gamma(config.weight_jitter, 1.0 / config.weight_jitter, size=len(ports))
        weights = np.array([w for _, w in template]) * jitter
        port_tables.append((ports, np.cumsum(weights / weights.sum())))
        grammar = config.role_grammar[role]
        vocab = sorted({p for m in grammar for p in m.processes})
        events_per_hour = sum(m.rate * len(m.processes) for m in grammar)
        total_rate = sum(m.rate for m in grammar)
        cursor = int(rng.integers(len(grammar))) if config.cyclic else 0
        for day in range(n_days):
            if rng.random() >= activity[role]:
                continue
            day_start = day * DAY
            day_len = min(DAY, total - day_start)
            hours = day_len / HOUR
            if config.cyclic:
                starts = np.sort(rng.uniform(0.0, day_len, size=rng.poisson(total_rate * hours)))
                instances = []
                for t0 in starts:
                    instances.append((cursor % len(grammar), t0))
                    cursor += 1
            else:
                instances = [
                    (m_idx, t0)
                    for m_idx, motif in enumerate(grammar)
                    for t0 in rng.uniform(0.0, day_len, size=rng.poisson(motif.rate * hours))
                ]
            for m_idx, t0 in instances:
                motif = grammar[m_idx]
                gaps = rng.uniform(motif.gap[0], motif.gap[1], size=len(motif.processes) - 1)
                times = t0 + np.concatenate(([0.0], np.cumsum(gaps)))
                for t, proc in zip(times, motif.processes):
                    rows.append((day_start + float(t), s, proc, f"r{role}m{m_idx}"))
            n_noise = rng.poisson(config.noise_rate * events_per_hour * hours)
            for t in rng.uniform(0.0, day_len, size=n_noise):
                rows.append((day_start + float(t), s, vocab[int(rng.integers(len(vocab)))], "noise"))

    rows = [r for r in rows if r[0] < total]
    rows.sort(key=lambda r: (r[0], r[1]))
    n = len(rows)
    client_ports = rng.integers(EPHEMERAL_PORTS[0], EPHEMERAL_PORTS[1], size=n)
    port_noise = rng.random(n) < config.noise_rate
    random_ports = rng.integers(1, 65536, size=n)
    port_draw = rng.random(n)
    records: list[ConnectionRecord] = []
    labels: list[str] = []
    for i, (t, s, proc, label) in enumerate(rows):
        if port_noise[i]:
            port = int(random_ports[i])
        else:
            ports, cum = port_tables[s]
            port = int(ports[min(int(np.searchsorted(cum, port_draw[i], side="right")), len(ports) - 1)])
        ts = round(config.start + t, 3)
        records.append(
            ConnectionRecord(ts, config.subject, int(client_ports[i]), system_name(s), port, proc)
        )
        labels.append(label)
    system_roles = {system_name(s): roles[s] for s in range(config.n_systems)}
    return SynthData(records, system_roles, labels, config)


def write_ground_truth(data: SynthData, stream: TextIO) -> None:
    stream.write("system,role\n")
    for system in sorted(data.system_roles):
        stream.write(f"{system},{data.system_roles[system]}\n")
    stream.write("record_index,label\n")
    for i, label in enumerate(data.record_labels):
        stream.write(f"{i},{label}\n")


def read_ground_truth(stream: TextIO) -> tuple[dict[str, int], list[str]]:
    roles: dict[str, int] = {}
    labels: list[str] = []
    section = None
    for line in stream:
        line = line.strip()
        if not line:
            continue
        if line == "system,role":
            section = "roles"
            continue
        if line == "record_index,label":
            section = "labels"
            continue
        key, value = line.split(",", 1)
        if section == "roles":
            roles[key] = int(value)
        elif section == "labels":
            if int(key) != len(labels):
                raise ValueError(f"record_index out of sequence at {key}")
            labels.append(value)
        else:
            raise ValueError("ground truth file is missing its section header")
    return roles, labels
