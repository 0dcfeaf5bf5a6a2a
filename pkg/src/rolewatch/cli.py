"""``rolewatch`` command line.

Every command reads its inputs from files, takes settings from an optional
``key=value`` config file overridden by flags, and writes its outputs
atomically.  Exit codes: 0 success, 2 bad usage, 3 missing input file,
4 unparseable input, 5 invalid configuration, 6 analysis could not proceed.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

from .baselines import (
    CnbModel, CnbParams, FpofModel, FpofParams, KappaLofModel, KappaLofParams,
)
from .errors import ConfigError, RolewatchError, UsageError
from .evaluation import METHODS, BenchConfig, MethodParams, run_benchmark, write_report
from .ingest import (
    DAY, HOUR, ConnectionRecord, TimeWindow, make_synth_config, parse_records, peers_of,
    serialize_records, subject_window, synth_generate, write_ground_truth,
)
from .io import atomic_write, write_via
from .krimp import KrimpModel, krimp_mine, read_code_tables, write_code_tables
from .profiler import Kind, Representation, build_profiles, read_profiles, write_profiles
from .role_detect import detect_roles_for_subject, write_alerts
from .roles import Pipeline, select_clusters, write_assignment, write_sweep
from .sequences import (
    DbscanParams, MatchDatabase, StideParams, auto_epsilon, build_all_series, dbscan_temporal,
    stide_segments,
)

log = logging.getLogger("rolewatch")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_PARSE = 4
EXIT_CONFIG = 5
EXIT_ANALYSIS = 6


class MissingInput(RolewatchError):
    pass


class ParseFailure(RolewatchError):
    pass


@dataclass
class Config:
    history_days: float = 15.0
    test_hours: float = 24.0
    port_factor: float = 3.0
    pipeline: str = Pipeline.KMEANS_PROPORTIONED.value
    stide_k: int = 6
    min_pts: int = 2
    epsilon: str = "auto"
    min_support: int = 2
    max_candidate_length: int = 10
    s0: int = 3
    kappa: int = 2
    theta: float = 0.25
    cnb_k: int = 2
    z_threshold: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        try:
            Pipeline(self.pipeline)
        except ValueError:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}") from None
        if self.history_days <= 0 or self.test_hours <= 0:
            raise ConfigError("history_days and test_hours must be positive")
        if self.port_factor <= 1:
            raise ConfigError("port_factor must exceed 1")
        if self.epsilon != "auto":
            try:
                if float(self.epsilon) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"epsilon must be 'auto' or a positive number, got {self.epsilon!r}") from None
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        try:
            self.dbscan, self.stide, self.method_params  # noqa: B018 - validation side effect
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def dbscan(self) -> DbscanParams:
        eps = None if self.epsilon == "auto" else float(self.epsilon)
        return DbscanParams(min_pts=self.min_pts, epsilon=eps)

    @property
    def stide(self) -> StideParams:
        return StideParams(self.stide_k)

    @property
    def method_params(self) -> MethodParams:
        return MethodParams(
            krimp_min_support=self.min_support,
            krimp_max_length=self.max_candidate_length,
            stide=self.stide,
            fpof=FpofParams(self.s0),
            kappa=KappaLofParams(self.kappa),
            cnb=CnbParams(self.theta, self.cnb_k),
        )


def _convert(kind, raw: str, key: str, elem=str):
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(elem(x.strip()) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def read_key_values(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"config file not found: {path}")
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def apply_values(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string ``values`` converted and applied."""
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(obj, key)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else str
            changes[key] = _convert(tuple, raw, key, elem)
        else:
            changes[key] = _convert(type(default), raw, key)
    return dataclasses.replace(obj, **changes)


# ------------------------------------------------------------------ inputs


def load_records(path: str | Path, lenient: bool = False) -> list[ConnectionRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"records file not found: {path}")
    with path.open() as fh:
        result = parse_records(fh)
    if result.errors:
        for err in result.errors[:20]:
            log.warning("%s: %s", path, err)
        if not lenient:
            raise ParseFailure(f"{path}: {len(result.errors)} malformed line(s); first: {result.errors[0]}")
    return result.records


def _test_end(records: Sequence[ConnectionRecord], explicit: float | None) -> float:
    if explicit is not None:
        return explicit
    if not records:
        raise UsageError("no records to analyze")
    return math.nextafter(max(r.timestamp for r in records), math.inf)


@dataclass
class Neighborhood:
    history: TimeWindow
    test: TimeWindow
    roles: dict[str, int]
    assignment: object


def neighborhood(records, subject: str, cfg: Config, test_end: float) -> Neighborhood:
    """Windows and role assignment for the peers of ``subject``."""
    test = TimeWindow(test_end - cfg.test_hours * HOUR, test_end)
    history = TimeWindow(test.start - cfg.history_days * DAY, test.start)
    full = TimeWindow(history.start, test.end)
    peers = peers_of(subject_window(records, subject, full), subject)
    if not peers:
        raise UsageError(f"{subject} has no peers in the analysis window")
    profiles = build_profiles(records, peers, Kind.SERVER, Representation.PROPORTIONED,
                              cfg.port_factor, full)
    _, assignment = select_clusters(cfg.pipeline, profiles, seed=cfg.seed, window=full)
    roles = dict(assignment.labels)
    nxt = max(roles.values(), default=-1) + 1
    for p in peers:
        if p not in roles:
            roles[p] = nxt
            nxt += 1
    return Neighborhood(history, test, roles, assignment)


@dataclass
class PeerClusters:
    peer: str
    role: int
    history: list
    test: list
    history_windows: list
    test_windows: list


def peer_clusters(records, subject: str, hood: Neighborhood, cfg: Config) -> list[PeerClusters]:
    out = []
    params = cfg.dbscan
    for peer, events in build_all_series(records, subject).items():
        if peer not in hood.roles:
            continue
        hist = [e for e in events if e.timestamp in hood.history]
        tst = [e for e in events if e.timestamp in hood.test]
        eps = params.epsilon
        if eps is None:
            base = hist or tst
            eps = auto_epsilon(base, params.min_pts, params.fallback_epsilon, params.count_self) \
                if base else params.fallback_epsilon
        k = cfg.stide_k
        out.append(PeerClusters(
            peer, hood.roles[peer],
            dbscan_temporal(hist, params, eps, hood.roles[peer]),
            dbscan_temporal(tst, params, eps, hood.roles[peer]),
            [w for w in stide_segments(hist, cfg.stide) if len(w) == k],
            [w for w in stide_segments(tst, cfg.stide) if len(w) == k],
        ))
    return out


def role_databases(clusters: Sequence[PeerClusters]) -> dict[int, list[tuple[str, ...]]]:
    dbs: dict[int, list] = {}
    for pc in clusters:
        dbs.setdefault(pc.role, []).extend(c.processes for c in pc.history)
    return dbs


# ---------------------------------------------------------------- commands


def cmd_profile(args, cfg: Config) -> None:
    records = load_records(args.records, args.lenient)
    end = _test_end(records, args.test_end)
    window = TimeWindow(end - cfg.test_hours * HOUR - cfg.history_days * DAY, end)
    peers = peers_of(subject_window(records, args.subject, window), args.subject)
    profiles = build_profiles(records, peers, args.kind, args.representation, cfg.port_factor, window)
    write_via(args.out, lambda fh: write_profiles(profiles, fh))


def cmd_roles(args, cfg: Config) -> None:
    path = Path(args.profiles)
    if not path.is_file():
        raise MissingInput(f"profiles file not found: {path}")
    try:
        with path.open() as fh:
            profiles = read_profiles(fh)
    except ValueError as exc:
        raise ParseFailure(f"{path}: {exc}") from None
    profiles.sort(key=lambda p: p.system)
    selection, assignment = select_clusters(cfg.pipeline, profiles, seed=cfg.seed)
    write_via(args.out, lambda fh: write_assignment(assignment, fh))
    sweep = args.sweep_out or f"{args.out}.sweep.csv"
    write_via(sweep, lambda fh: write_sweep(selection, fh))


def cmd_detect_roles(args, cfg: Config) -> None:
    records = load_records(args.records, args.lenient)
    end = _test_end(records, args.test_end)
    result = detect_roles_for_subject(
        records, args.subject, end, cfg.history_days, cfg.test_hours, cfg.pipeline,
        cfg.port_factor, Kind.SERVER, cfg.seed,
    )
    write_via(args.out, lambda fh: write_alerts(result.alerts, result.test, fh))


def cmd_mine(args, cfg: Config) -> None:
    records = load_records(args.records, args.lenient)
    hood = neighborhood(records, args.subject, cfg, _test_end(records, args.test_end))
    dbs = role_databases(peer_clusters(records, args.subject, hood, cfg))
    tables = {
        role: krimp_mine(db, cfg.min_support, cfg.max_candidate_length)
        for role, db in sorted(dbs.items()) if db
    }
    write_via(args.out, lambda fh: write_code_tables(tables, fh))


SCORE_HEADER = "method,transaction_id,peer,role,processes,score,z,anomalous"


def cmd_score(args, cfg: Config) -> None:
    records = load_records(args.records, args.lenient)
    hood = neighborhood(records, args.subject, cfg, _test_end(records, args.test_end))
    clusters = peer_clusters(records, args.subject, hood, cfg)
    dbs = role_databases(clusters)
    method = args.method
    tables = None
    if method == "krimp":
        if not args.code_tables:
            raise UsageError("--code-tables is required for the krimp method")
        path = Path(args.code_tables)
        if not path.is_file():
            raise MissingInput(f"code table file not found: {path}")
        try:
            with path.open() as fh:
                tables = read_code_tables(fh)
        except ValueError as exc:
            raise ParseFailure(f"{path}: {exc}") from None
    p = cfg.method_params
    models: dict[int, object] = {}
    lines = [SCORE_HEADER]
    for pc in sorted(clusters, key=lambda c: c.peer):
        db = dbs.get(pc.role) or []
        if not db:
            log.warning("role %s has no history; %s not scored", pc.role, pc.peer)
            continue
        if pc.role not in models:
            models[pc.role] = _model(method, pc.role, db, clusters, tables, p)
        model = models[pc.role]
        samples = (
            [(f"{pc.peer}@{i}", w) for i, w in enumerate(pc.test_windows)] if method == "stide"
            else [(f"{pc.peer}@{c.start!r}", c.processes) for c in pc.test]
        )
        for tid, items in samples:
            score, z = model(items)
            flag = z is not None and z > cfg.z_threshold
            zs = "" if z is None else repr(z)
            lines.append(f"{method},{tid},{pc.peer},{pc.role},{';'.join(items)},{score!r},{zs},{int(flag)}")
    atomic_write(args.out, "\n".join(lines) + "\n")


def _model(method, role, db, clusters, tables, p: MethodParams):
    if method == "krimp":
        ct = tables.get(str(role))
        if ct is None:
            raise UsageError(f"no code table for role {role}; re-run mine with the same config")
        km = KrimpModel.from_table(ct, db)
        return lambda t: ((z := km.score(t)).raw, z.z)
    if method == "frequency":
        md = MatchDatabase.from_samples(db)
        return lambda t: ((z := md.score(t)).raw, z.z)
    if method == "stide":
        windows = [w for pc in clusters if pc.role == role for w in pc.history_windows]
        if not windows:
            raise UsageError(f"role {role} has no full-length history windows")
        md = MatchDatabase.from_samples(windows)
        return lambda t: ((z := md.score(t)).raw, z.z)
    model = {"fpof": lambda: FpofModel(db, p.fpof), "kappa-lof": lambda: KappaLofModel(db, p.kappa),
             "cnb": lambda: CnbModel(db, p.cnb)}[method]()
    return lambda t: (model.score(t), None)


SYNTH_KEYS = ("n_roles", "n_systems", "history_days", "noise_rate", "seed", "motif_rate",
              "test_hours", "cyclic")


@dataclass
class SynthSettings:
    n_roles: int = 6
    n_systems: int = 24
    history_days: int = 10
    noise_rate: float = 0.05
    motif_rate: float = 2.0
    test_hours: float = 24.0
    cyclic: bool = False
    seed: int = 0


def cmd_synth(args, cfg: Config) -> None:
    settings = SynthSettings(seed=cfg.seed)
    if args.synth_config:
        settings = apply_values(settings, read_key_values(args.synth_config))
    if args.seed is not None:
        settings = dataclasses.replace(settings, seed=args.seed)
    data = synth_generate(make_synth_config(**dataclasses.asdict(settings)))
    write_via(args.out, lambda fh: serialize_records(data.records, fh))
    truth = args.truth or f"{args.out}.truth.csv"
    write_via(truth, lambda fh: write_ground_truth(data, fh))


def cmd_bench(args, cfg: Config) -> None:
    bench = BenchConfig(params=cfg.method_params, pipeline=cfg.pipeline, port_factor=cfg.port_factor,
                        dbscan=cfg.dbscan)
    if args.synth_config:
        bench = apply_values(bench, read_key_values(args.synth_config))
    methods = tuple(m.strip() for m in args.methods.split(",")) if args.methods else None
    report = run_benchmark(bench, methods, seed=cfg.seed)
    write_report(report, args.out)


# ------------------------------------------------------------------ parser


def _config_help() -> str:
    rows = [f"  {f.name} = {f.default}" for f in fields(Config)]
    return "config keys (file or --key value) and defaults:\n" + "\n".join(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rolewatch", description="Role-based lateral movement analytics.",
        epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=True, help="output path")
        for f in fields(Config):
            flag = "--" + f.name.replace("_", "-")
            kind = f.type if isinstance(f.type, type) else {"float": float, "int": int, "str": str}[f.type]
            p.add_argument(flag, dest=f.name, type=kind, default=None,
                           help=f"default {f.default}")
        return p

    def with_records(p):
        p.add_argument("--records", required=True, help="connection records CSV")
        p.add_argument("--subject", required=True, help="system under analysis")
        p.add_argument("--test-end", type=float, default=None,
                       help="end of the test window (epoch seconds); default just after the last record")
        p.add_argument("--lenient", action="store_true", help="skip malformed record lines")
        return p

    p = with_records(command("profile", cmd_profile, "Port profiles of the subject's peers."))
    p.add_argument("--kind", choices=[k.value for k in Kind], default=Kind.SERVER.value)
    p.add_argument("--representation", choices=[r.value for r in Representation],
                   default=Representation.PROPORTIONED.value)

    p = command("roles", cmd_roles, "Cluster profiles into roles.")
    p.add_argument("--profiles", required=True)
    p.add_argument("--sweep-out", default=None, help="silhouette sweep output (default <out>.sweep.csv)")

    with_records(command("detect-roles", cmd_detect_roles, "Alert on peers in novel roles."))
    with_records(command("mine", cmd_mine, "Mine one Krimp code table per role."))

    p = with_records(command("score", cmd_score, "Score test-window samples against role history."))
    p.add_argument("--method", choices=METHODS, default="krimp")
    p.add_argument("--code-tables", default=None, help="output of mine (krimp only)")

    p = command("synth", cmd_synth, "Generate synthetic records and ground truth.")
    p.add_argument("--synth-config", default=None, help="key=value file: " + ", ".join(SYNTH_KEYS))
    p.add_argument("--truth", default=None, help="ground truth output (default <out>.truth.csv)")

    p = command("bench", cmd_bench, "Run the synthetic benchmark; --out is a directory.")
    p.add_argument("--synth-config", default=None, help="key=value file of benchmark settings")
    p.add_argument("--methods", default=None, help="comma-separated subset of " + ",".join(METHODS))
    return parser


def resolve_config(args) -> Config:
    cfg = Config()
    if args.config:
        cfg = apply_values(cfg, read_key_values(args.config))
    overrides = {f.name: getattr(args, f.name) for f in fields(Config) if getattr(args, f.name) is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.fn(args, cfg)
    except MissingInput as exc:
        print(f"rolewatch: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ParseFailure as exc:
        print(f"rolewatch: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"rolewatch: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RolewatchError, ValueError) as exc:
        print(f"rolewatch: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
