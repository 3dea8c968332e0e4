import json
import subprocess
import sys
from pathlib import Path

import pytest

from fedsto.cli import main, seed_aggregate
from fedsto.config import load_config

ROOT = Path(__file__).resolve().parent.parent
TINY = """
[federation]
warmup_rounds = 1
phase1_rounds = 1
phase2_rounds = 1

[data]
server_scenes = 16
client_scenes = 8
test_scenes = 8

[run]
seeds = 1
theory_samples = 2000
theory_triples = 3
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def _files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_run_twice_is_byte_identical(tiny_ini, tmp_path, capsys):
    assert main(["run", str(tiny_ini), "--output", str(tmp_path / "a")]) == 0
    assert main(["run", str(tiny_ini), "--output", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"config.ini", "summary.json", "summary.txt", "seed1/metrics.jsonl", "seed1/report.json",
                      "seed1/checkpoints/server.ckpt", "seed1/checkpoints/warmup.ckpt",
                      "seed1/checkpoints/client0.ckpt", "seed1/checkpoints/client1.ckpt",
                      "seed1/checkpoints/client2.ckpt"}
    # config snapshots differ only in the output path they record
    a.pop("config.ini"), b.pop("config.ini")
    assert a == b
    assert "artifacts written to" in capsys.readouterr().out


def test_config_snapshot_reproduces_run(tiny_ini, tmp_path):
    main(["run", str(tiny_ini), "--output", str(tmp_path / "a")])
    snap = tmp_path / "a" / "config.ini"
    assert load_config(snap) == load_config(tiny_ini).with_updates(run={"output": str(tmp_path / "a")})
    main(["run", str(snap)])
    assert (tmp_path / "a" / "seed1" / "metrics.jsonl").read_bytes()


def test_three_seed_summary(tiny_ini, tmp_path):
    assert main(["run", str(tiny_ini), "--output", str(tmp_path), "--seeds", "1,2,3"]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_seeds"] == 3 and summary["seeds"] == [1, 2, 3]
    assert sorted(p.name for p in tmp_path.glob("seed*")) == ["seed1", "seed2", "seed3"]
    assert not list(tmp_path.rglob("*.tmp-*"))


def test_seed_aggregate_population_std():
    finals = [{"x": {"map50": 0.2, "map75": 0.1}}, {"x": {"map50": 0.4, "map75": 0.1}}]
    agg = seed_aggregate(finals)
    assert agg["x"]["map50"]["mean"] == pytest.approx(0.3)
    assert agg["x"]["map50"]["std"] == pytest.approx(0.1)


def test_comm_report_large_schedule(capsys):
    assert main(["comm-report", str(ROOT / "configs" / "cost-100.ini")]) == 0
    out = capsys.readouterr().out
    assert "2,725.50 GB" in out and "2,166.23 GB" in out and "20.52 %" in out and "803.48 GB" in out


def test_eval_checkpoint(tiny_ini, tmp_path, capsys):
    main(["run", str(tiny_ini), "--output", str(tmp_path)])
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "seed1" / "checkpoints" / "server.ckpt"), str(tiny_ini)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines] == ["cloudy", "overcast", "rainy", "snowy"]


def test_theory_check(tiny_ini, capsys):
    assert main(["theory-check", str(tiny_ini)]) == 0
    assert "all triples consistent" in capsys.readouterr().out


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[pseudo]\ntau1 = 0.7\ntau2 = 0.6\n")
    assert main(["run", str(bad)]) == 2
    assert "pseudo.tau1" in capsys.readouterr().err
    assert main(["comm-report", str(tmp_path / "missing.ini")]) == 1
    assert main(["theory-check", str(bad), "--seeds", "x"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fedsto", "comm-report", str(ROOT / "configs" / "cost-100.ini")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "20.52 %" in proc.stdout
