import os
import subprocess
import sys
from dataclasses import fields
from pathlib import Path

import pytest

from rolewatch.cli import Config, SCORE_HEADER, build_parser, main

SUBJECT = "subject"
SMALL_SYNTH = "n_roles = 3\nn_systems = 9\nhistory_days = 4\ntest_hours = 12\nseed = 5\n"
SMALL_BENCH = (
    "n_roles = 3\nn_systems = 9\nhistory_days = 3\ntest_hours = 12\nn_seeds = 2\n"
    "sweep_days = 3,5,7\nsweep_seeds = 1\nsweep_regular_roles = 2\nsweep_sporadic_roles = 3\n"
)


@pytest.fixture(scope="module")
def records(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    (d / "s.cfg").write_text(SMALL_SYNTH)
    out = d / "records.csv"
    assert main(["synth", "--synth-config", str(d / "s.cfg"), "--out", str(out)]) == 0
    return out


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["mine", "--help"])
    text = capsys.readouterr().out
    for f in fields(Config):
        assert f"--{f.name.replace('_', '-')}" in text
        assert f"{f.name} = {f.default}" in text


def test_exit_codes(tmp_path, records):
    out = str(tmp_path / "x.csv")
    with pytest.raises(SystemExit) as exc:
        main(["profile", "--out", out])
    assert exc.value.code == 2
    assert main(["profile", "--records", str(tmp_path / "nope.csv"), "--subject", SUBJECT, "--out", out]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,header\n")
    assert main(["profile", "--records", str(bad), "--subject", SUBJECT, "--out", out]) == 4
    assert main(["profile", "--records", str(records), "--subject", SUBJECT, "--out", out,
                 "--pipeline", "nope"]) == 5
    assert main(["score", "--records", str(records), "--subject", SUBJECT, "--out", out]) == 6
    assert not Path(out).exists()


def test_pipeline_end_to_end(tmp_path, records):
    common = ["--records", str(records), "--subject", SUBJECT]
    prof, assign, alerts = tmp_path / "p.csv", tmp_path / "a.csv", tmp_path / "al.csv"
    tables, scores = tmp_path / "ct.csv", tmp_path / "sc.csv"
    assert main(["profile", *common, "--out", str(prof)]) == 0
    assert main(["roles", "--profiles", str(prof), "--out", str(assign)]) == 0
    assert Path(f"{assign}.sweep.csv").read_text().startswith("n_C,score")
    assert main(["detect-roles", *common, "--out", str(alerts)]) == 0
    assert main(["mine", *common, "--out", str(tables)]) == 0
    assert tables.read_text().startswith("role,items,usage,code_length_bits\n")
    for method in ("krimp", "frequency", "stide", "cnb"):
        extra = ["--code-tables", str(tables)] if method == "krimp" else []
        assert main(["score", *common, "--method", method, *extra, "--out", str(scores)]) == 0
        lines = scores.read_text().splitlines()
        assert lines[0] == SCORE_HEADER and len(lines) > 1


def test_history_only_data_raises_no_role_alerts(tmp_path, records):
    # ending the test window inside history means every peer was already known
    lines = records.read_text().splitlines()
    head, body = lines[0], lines[1:]
    ts = sorted(float(l.split(",")[0]) for l in body)
    cut = ts[len(ts) // 2]
    hist = tmp_path / "hist.csv"
    hist.write_text("\n".join([head] + [l for l in body if float(l.split(",")[0]) <= cut]) + "\n")
    out = tmp_path / "alerts.csv"
    assert main(["detect-roles", "--records", str(hist), "--subject", SUBJECT, "--out", str(out),
                 "--history-days", "1", "--test-hours", "1"]) == 0
    assert len(out.read_text().splitlines()) == 1


def _run_bench(workdir: Path, hashseed: str) -> dict[str, bytes]:
    workdir.mkdir()
    (workdir / "b.cfg").write_text(SMALL_BENCH)
    env = dict(os.environ, PYTHONHASHSEED=hashseed)
    subprocess.run([sys.executable, "-m", "rolewatch.cli", "bench", "--synth-config", "b.cfg",
                    "--out", "r", "--methods", "krimp,frequency,stide,fpof,kappa-lof,cnb", "--seed", "3"],
                   cwd=workdir, env=env, check=True)
    return {p.name: p.read_bytes() for p in sorted((workdir / "r").iterdir())}


def test_bench_output_is_byte_identical_across_runs(tmp_path):
    a = _run_bench(tmp_path / "a", "0")
    b = _run_bench(tmp_path / "b", "12345")
    assert a == b
    assert "report.csv" in a and "alerts_vs_history.csv" in a


DATA = Path(__file__).parent / "data"


def test_bundled_fixture_matches_golden_outputs(tmp_path):
    # records.csv is synth output (fixture.cfg) plus one hand-added newcomer, newdb
    common = ["--records", str(DATA / "records.csv"), "--subject", SUBJECT,
              "--history-days", "3", "--test-hours", "6"]
    tables = tmp_path / "ct.csv"
    runs = {
        "golden_alerts.csv": ["detect-roles"],
        "golden_code_tables.csv": ["mine"],
        "golden_scores_krimp.csv": ["score", "--method", "krimp", "--code-tables", str(tables)],
        "golden_scores_frequency.csv": ["score", "--method", "frequency"],
    }
    for name, cmd in runs.items():
        out = tables if name == "golden_code_tables.csv" else tmp_path / name
        assert main([cmd[0], *common, *cmd[1:], "--out", str(out)]) == 0
        assert out.read_text() == (DATA / name).read_text(), name
    assert "newdb,0,novel_role" in (DATA / "golden_alerts.csv").read_text()
