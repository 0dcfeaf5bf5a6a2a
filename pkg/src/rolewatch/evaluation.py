"""Injection experiment, ROC/AUC, clustering recovery and the benchmark driver."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .baselines import (
    CnbModel, CnbParams, FpofModel, FpofParams, KappaLofModel, KappaLofParams,
)
from .errors import UndefinedScoreError, UsageError
from .ingest import TimeWindow, make_synth_config, synth_generate
from .krimp import DEFAULT_MAX_CANDIDATE_LENGTH, DEFAULT_MIN_SUPPORT, KrimpModel
from .profiler import DEFAULT_FACTOR, Kind, Representation, build_profiles
from .role_detect import detect_roles_for_subject
from .roles import PIPELINES, Pipeline, RoleAssignment, select_clusters
from .sequences import (
    DbscanParams, MatchDatabase, StideParams, auto_epsilon,
    build_all_series, dbscan_temporal, fraction_beyond, stide_segments, zscore_cdf,
)

log = logging.getLogger(__name__)

Items = tuple[str, ...]

METHODS = ("krimp", "frequency", "stide", "fpof", "kappa-lof", "cnb")
# +1: larger score is more anomalous; -1: smaller is
DIRECTIONS = {
    "krimp": 1, "frequency": 1, "stide": 1, "fpof": -1, "kappa-lof": 1, "cnb": 1,
}
Z_THRESHOLD = 4.0


# ---------------------------------------------------------------------- ROC


@dataclass(frozen=True)
class RocCurve:
    points: list[tuple[float, float]]
    auc: float


def roc_auc(scores: Sequence[float], labels: Sequence[bool], direction: int = 1) -> RocCurve:
    """ROC over every distinct score threshold; tied scores form one diagonal step.

    ``labels`` are True for anomalies.  With ``direction=-1`` small scores
    count as anomalous.
    """
    if len(scores) != len(labels):
        raise UsageError("scores and labels differ in length")
    s = direction * np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if np.isnan(s).any():
        raise UsageError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedScoreError("AUC is undefined unless both classes are present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    auc = 0.0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        block = y[i:j]
        dtp = int(block.sum())
        dfp = len(block) - dtp
        auc += dfp * (tp + dtp / 2.0)
        tp += dtp
        fp += dfp
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return RocCurve(points, auc / (n_pos * n_neg))


# ------------------------------------------------------------------- ARI


def adjusted_rand_index(a: Sequence, b: Sequence) -> float:
    if len(a) != len(b):
        raise UsageError("label sequences differ in length")
    n = len(a)
    if n < 2:
        return 1.0
    pairs = Counter(zip(a, b))
    comb = lambda x: x * (x - 1) / 2.0
    sum_ij = sum(comb(c) for c in pairs.values())
    sum_a = sum(comb(c) for c in Counter(a).values())
    sum_b = sum(comb(c) for c in Counter(b).values())
    expected = sum_a * sum_b / comb(n)
    best = (sum_a + sum_b) / 2.0
    if best == expected:
        return 1.0
    return (sum_ij - expected) / (best - expected)


def clustering_recovery(assignment: RoleAssignment | Mapping[str, int], truth: Mapping[str, int]) -> float:
    labels = assignment.labels if isinstance(assignment, RoleAssignment) else assignment
    if set(labels) != set(truth):
        raise UsageError("assignment and truth cover different systems")
    systems = sorted(truth)
    return adjusted_rand_index([labels[s] for s in systems], [truth[s] for s in systems])


# --------------------------------------------------------------- trend test


@dataclass(frozen=True)
class TrendTest:
    tau: float
    # one-sided p-value against a decreasing trend
    p_decreasing: float
    p_increasing: float


def mann_kendall(values: Sequence[float]) -> TrendTest:
    """Mann-Kendall trend test, i.e. Kendall's tau of the values against time."""
    if len(values) < 3:
        raise UsageError("trend test needs at least three points")
    x = np.arange(len(values))
    if len(set(values)) == 1:
        return TrendTest(0.0, 1.0, 1.0)
    dec = stats.kendalltau(x, values, alternative="less")
    inc = stats.kendalltau(x, values, alternative="greater")
    return TrendTest(float(dec.statistic), float(dec.pvalue), float(inc.pvalue))


# ---------------------------------------------------------------- injection


@dataclass(frozen=True)
class InjectionTrial:
    role: int
    source_role: int
    injected: Items
    seed: int


def inject(role_databases: Mapping[int, Sequence[Items]], seed: int) -> list[InjectionTrial]:
    """One foreign transaction per role, drawn from a uniformly chosen other role."""
    roles = sorted(r for r, db in role_databases.items())
    if len(roles) < 2:
        raise UsageError("injection needs at least two roles")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11EC7]))
    trials = []
    for role in roles:
        donors = [r for r in roles if r != role and len(role_databases[r]) > 0]
        if not donors:
            raise UsageError(f"no other role can donate to role {role}")
        donor = donors[int(rng.integers(len(donors)))]
        pool = role_databases[donor]
        trials.append(InjectionTrial(role, donor, tuple(pool[int(rng.integers(len(pool)))]), seed))
    return trials


# ------------------------------------------------------------ sequence data


@dataclass
class RoleSequences:
    """Per-role databases of history clusters, test clusters and stide windows."""

    history: dict[int, list[Items]]
    test: dict[int, list[Items]]
    history_windows: dict[int, list[Items]]
    test_windows: dict[int, list[Items]]


def build_role_sequences(
    records, subject: str, roles: Mapping[str, int], history: TimeWindow, test: TimeWindow,
    dbscan: DbscanParams = DbscanParams(), stide: StideParams = StideParams(),
) -> RoleSequences:
    """Cluster each peer's history and test series and pool them by role.

    Epsilon is chosen per peer from its history series and reused for its
    test series.  Stide windows shorter than ``k`` are dropped.
    """
    series = build_all_series(records, subject)
    out = RoleSequences({}, {}, {}, {})
    for peer, events in series.items():
        if peer not in roles:
            continue
        role = roles[peer]
        hist = [e for e in events if e.timestamp in history]
        tst = [e for e in events if e.timestamp in test]
        eps = dbscan.epsilon
        if eps is None:
            eps = auto_epsilon(hist or tst, dbscan.min_pts, dbscan.fallback_epsilon, dbscan.count_self) \
                if (hist or tst) else dbscan.fallback_epsilon
        for target, part in ((out.history, hist), (out.test, tst)):
            target.setdefault(role, []).extend(c.processes for c in dbscan_temporal(part, dbscan, eps))
        for target, part in ((out.history_windows, hist), (out.test_windows, tst)):
            target.setdefault(role, []).extend(
                w for w in stide_segments(part, stide) if len(w) == stide.k
            )
    return out


# ---------------------------------------------------------------- scorers


@dataclass(frozen=True)
class MethodParams:
    krimp_min_support: int = DEFAULT_MIN_SUPPORT
    krimp_max_length: int = DEFAULT_MAX_CANDIDATE_LENGTH
    stide: StideParams = StideParams()
    fpof: FpofParams = FpofParams()
    kappa: KappaLofParams = KappaLofParams()
    cnb: CnbParams = CnbParams()


class _Scorer:
    """Caches one score per distinct transaction."""

    def __init__(self, fn):
        self.fn = fn
        self.cache: dict[Items, float] = {}

    def __call__(self, t: Items) -> float:
        if t not in self.cache:
            self.cache[t] = self.fn(t)
        return self.cache[t]


def make_scorer(method: str, history: Sequence[Items], windows: Sequence[Items], params: MethodParams):
    if method == "krimp":
        model = KrimpModel.fit(history, params.krimp_min_support, params.krimp_max_length)
        return _Scorer(lambda t: model.score(t).z)
    if method == "frequency":
        db = MatchDatabase.from_samples(history)
        return _Scorer(lambda t: db.score(t).z)
    if method == "stide":
        if not windows:
            raise UndefinedScoreError("no full-length stide windows in history")
        db = MatchDatabase.from_samples(windows)
        k = params.stide.k
        # a transaction is as unusual as its least-matched window
        return _Scorer(lambda t: max(db.score(w).z for w in stide_segments(t, StideParams(k))))
    if method == "fpof":
        return _Scorer(FpofModel(history, params.fpof).score)
    if method == "kappa-lof":
        return _Scorer(KappaLofModel(history, params.kappa).score)
    if method == "cnb":
        return _Scorer(CnbModel(history, params.cnb).score)
    raise UsageError(f"unknown method {method!r}")


@dataclass
class TrialScores:
    scores: dict[str, list[float]]
    labels: list[bool]


def score_injection(
    data: RoleSequences, trials: Sequence[InjectionTrial], methods: Sequence[str],
    params: MethodParams = MethodParams(),
) -> TrialScores:
    """Score every test cluster plus the injected one against its role's history."""
    out = TrialScores({m: [] for m in methods}, [])
    for trial in trials:
        history = data.history.get(trial.role, [])
        if not history:
            log.warning("role %s has no history clusters; skipped", trial.role)
            continue
        batch = list(data.test.get(trial.role, [])) + [trial.injected]
        out.labels.extend([False] * (len(batch) - 1) + [True])
        for m in methods:
            scorer = make_scorer(m, history, data.history_windows.get(trial.role, []), params)
            out.scores[m].extend(scorer(t) for t in batch)
    return out


def sample_zscores(data: RoleSequences) -> dict[str, list[float]]:
    """z of every test stide window and every test cluster against role history."""
    zs: dict[str, list[float]] = {"stide": [], "frequency": []}
    for role in sorted(data.test):
        if data.history_windows.get(role):
            db = MatchDatabase.from_samples(data.history_windows[role])
            zs["stide"].extend(db.score(w).z for w in data.test_windows.get(role, []))
        if data.history.get(role):
            db = MatchDatabase.from_samples(data.history[role])
            zs["frequency"].extend(db.score(c).z for c in data.test[role])
    return zs


# ---------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchConfig:
    n_roles: int = 6
    n_systems: int = 24
    history_days: int = 10
    test_hours: float = 24.0
    # process and port noise; low enough that regular series stay regular
    noise_rate: float = 0.005
    motif_rate: float = 2.0
    # motifs follow the grammar order round-robin, giving regular series
    cyclic: bool = True
    n_seeds: int = 20
    pipeline: str = Pipeline.KMEANS_PROPORTIONED.value
    port_factor: float = DEFAULT_FACTOR
    dbscan: DbscanParams = DbscanParams()
    methods: tuple[str, ...] = ("krimp", "frequency", "stide")
    params: MethodParams = MethodParams()
    # clustering-recovery check over every pipeline
    ari: bool = True
    # novel-role alert sweep over history lengths
    sweep_days: tuple[int, ...] = tuple(range(10, 31, 2))
    sweep_seeds: int = 8
    sweep_regular_roles: int = 4
    sweep_sporadic_roles: int = 16
    sweep_systems_per_role: int = 2
    sweep_activity: float = 0.04
    sweep_motif_rate: float = 0.25

    def validate(self) -> None:
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise UsageError(f"unknown methods: {unknown}")
        Pipeline(self.pipeline)
        if self.n_seeds < 1:
            raise UsageError("n_seeds must be positive")


@dataclass
class BenchmarkReport:
    metrics: list[tuple[str, str, float]] = field(default_factory=list)
    roc: dict[str, RocCurve] = field(default_factory=dict)
    cdf: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    sweep: list[tuple[int, int]] = field(default_factory=list)

    def metric(self, name: str, method: str) -> float:
        for n, m, v in self.metrics:
            if n == name and m == method:
                return v
        raise KeyError((name, method))


def trial_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


def run_seed(config: BenchConfig, seed: int):
    """One synthetic neighborhood: ARI per pipeline, per-method AUC inputs and z samples."""
    synth = make_synth_config(
        n_roles=config.n_roles, n_systems=config.n_systems, history_days=config.history_days,
        noise_rate=config.noise_rate, seed=seed, motif_rate=config.motif_rate,
        test_hours=config.test_hours, cyclic=config.cyclic,
    )
    data = synth_generate(synth)
    history, test = synth.history_window, synth.test_window
    peers = sorted(data.system_roles)
    profiles = build_profiles(
        data.records, peers, Kind.SERVER, Representation.PROPORTIONED, config.port_factor,
        TimeWindow(history.start, test.end),
    )
    ari: dict[str, float] = {}
    chosen: dict[str, int] = {}
    assignment = None
    for pipeline in PIPELINES if config.ari else [Pipeline(config.pipeline)]:
        selection, result = select_clusters(pipeline, profiles, seed=seed)
        if pipeline is Pipeline(config.pipeline):
            assignment = result
        truth = {s: data.system_roles[s] for s in result.labels}
        ari[pipeline.value] = clustering_recovery(result, truth)
        chosen[pipeline.value] = selection.chosen_n_clusters
    seqs = build_role_sequences(
        data.records, synth.subject, assignment.labels, history, test,
        config.dbscan, config.params.stide,
    )
    trials = inject({r: db for r, db in seqs.history.items() if db}, seed)
    scored = score_injection(seqs, trials, config.methods, config.params)
    return ari, chosen, scored, sample_zscores(seqs)


def alert_sweep(config: BenchConfig, seed: int) -> list[int]:
    """Novel-role alert counts for each history length on a population with sporadic roles."""
    n_roles = config.sweep_regular_roles + config.sweep_sporadic_roles
    activity = [1.0] * config.sweep_regular_roles + [config.sweep_activity] * config.sweep_sporadic_roles
    longest = max(config.sweep_days)
    synth = make_synth_config(
        n_roles=n_roles, n_systems=n_roles * config.sweep_systems_per_role,
        history_days=longest, noise_rate=config.noise_rate, seed=seed,
        motif_rate=config.sweep_motif_rate, test_hours=config.test_hours, role_activity=activity,
    )
    data = synth_generate(synth)
    counts = []
    for days in config.sweep_days:
        result = detect_roles_for_subject(
            data.records, synth.subject, synth.test_window.end, history_days=days,
            test_hours=config.test_hours, pipeline=config.pipeline, factor=config.port_factor,
            seed=seed,
        )
        counts.append(len(result.alerts))
    return counts


def run_benchmark(config: BenchConfig, methods: Sequence[str] | None = None, seed: int = 0) -> BenchmarkReport:
    """Everything end to end, deterministic in ``seed``."""
    if methods is not None:
        config = replace(config, methods=tuple(methods))
    config.validate()
    report = BenchmarkReport()
    aucs: dict[str, list[float]] = {m: [] for m in config.methods}
    pooled: dict[str, list[float]] = {m: [] for m in config.methods}
    pooled_labels: list[bool] = []
    aris: dict[str, list[float]] = {}
    n_cs: dict[str, list[int]] = {}
    zs: dict[str, list[float]] = {"stide": [], "frequency": []}
    for s in trial_seeds(seed, config.n_seeds):
        ari, chosen, scored, samples = run_seed(config, s)
        for p, v in ari.items():
            aris.setdefault(p, []).append(v)
            n_cs.setdefault(p, []).append(chosen[p])
        for m in config.methods:
            aucs[m].append(roc_auc(scored.scores[m], scored.labels, DIRECTIONS[m]).auc)
            pooled[m].extend(scored.scores[m])
        pooled_labels.extend(scored.labels)
        for k in zs:
            zs[k].extend(samples[k])

    for m in config.methods:
        report.metrics += [
            ("auc_mean", m, float(np.mean(aucs[m]))),
            ("auc_min", m, float(np.min(aucs[m]))),
            ("auc_max", m, float(np.max(aucs[m]))),
        ]
        report.roc[m] = roc_auc(pooled[m], pooled_labels, DIRECTIONS[m])
        report.metrics.append(("auc_pooled", m, report.roc[m].auc))
    for p in sorted(aris):
        report.metrics += [
            ("ari_mean", p, float(np.mean(aris[p]))),
            ("ari_min", p, float(np.min(aris[p]))),
            ("n_clusters_mean", p, float(np.mean(n_cs[p]))),
        ]
    for k, values in zs.items():
        report.cdf[k] = zscore_cdf(values)
        report.metrics.append((f"frac_z_gt_{Z_THRESHOLD:g}", k, fraction_beyond(values, Z_THRESHOLD)))

    if config.sweep_days and config.sweep_seeds > 0:
        totals = np.zeros(len(config.sweep_days), dtype=int)
        for s in trial_seeds(seed ^ 0x5EE9, config.sweep_seeds):
            totals += np.array(alert_sweep(config, s))
        report.sweep = list(zip(config.sweep_days, (int(v) for v in totals)))
        if len(config.sweep_days) >= 3:
            trend = mann_kendall([float(v) for v in totals])
            report.metrics += [
                ("alerts_trend_tau", "role_detect", trend.tau),
                ("alerts_trend_p_decreasing", "role_detect", trend.p_decreasing),
                ("alerts_trend_p_increasing", "role_detect", trend.p_increasing),
            ]
    return report


def write_report(report: BenchmarkReport, directory: str | Path) -> list[Path]:
    """Write ``report.csv`` plus plot data; returns the paths written."""
    from .io import atomic_write

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    lines = ["metric,method,value"] + [f"{n},{m},{v!r}" for n, m, v in report.metrics]
    paths.append(atomic_write(d / "report.csv", "\n".join(lines) + "\n"))
    for m, curve in sorted(report.roc.items()):
        body = "fpr,tpr\n" + "".join(f"{x!r},{y!r}\n" for x, y in curve.points)
        paths.append(atomic_write(d / f"roc_{m}.csv", body))
    for k, cdf in sorted(report.cdf.items()):
        body = "z,p\n" + "".join(f"{z!r},{p!r}\n" for z, p in cdf)
        paths.append(atomic_write(d / f"cdf_{k}.csv", body))
    if report.sweep:
        body = "history_days,alerts\n" + "".join(f"{h},{a}\n" for h, a in report.sweep)
        paths.append(atomic_write(d / "alerts_vs_history.csv", body))
    return paths


# ------------------------------------------------------- frequency fixture


def frequency_only_fixture(n_families: int = 6, frequent: int = 30, rare: int = 2,
                           test_normals: int = 5, seed: int = 0):
    """A database whose anomalies differ from normal data only in frequency.

    Each family shares a motif ``(a, b)`` placed at offset 0, 1 or 2 inside a
    length-4 transaction padded with fillers unique to that transaction type.
    Positional overlap between distinct types is therefore zero and every
    family member shares the motif with every other, so neither walk
    similarity nor common-neighbor structure separates types within a family.
    One offset is frequent, the other two rare but present.

    Returns ``(database, test_transactions, labels)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF2E0]))
    database: list[Items] = []
    test: list[Items] = []
    labels: list[bool] = []
    for fam in range(n_families):
        a, b = f"a{fam}", f"b{fam}"
        types = []
        for off in range(3):
            fill = iter(f"f{fam}_{off}_{i}" for i in range(2))
            body = [next(fill) if i not in (off, off + 1) else None for i in range(4)]
            body[off], body[off + 1] = a, b
            types.append(tuple(body))
        common = int(rng.integers(3))
        for i, t in enumerate(types):
            database.extend([t] * (frequent if i == common else rare))
            if i == common:
                test.extend([t] * test_normals)
                labels.extend([False] * test_normals)
            else:
                test.append(t)
                labels.append(True)
    return database, test, labels
