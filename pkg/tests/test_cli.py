import json
import subprocess
import sys

import pytest

from slimfl import __version__
from slimfl.cli import build_summary, emit_metrics, run_command
from slimfl.metrics import COLUMNS, MetricsSeries, RoundRecord

TINY = """seed = 11
rounds = 2
devices = 3
dataset.n = 60
dataset.image_size = 4
local_steps = 1
batch_size = 8
channel.sigma2_dbm = -30
"""


def write_cfg(tmp_path, text=TINY, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestRun:
    def test_zero_rounds(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "seed = 1\nrounds = 0\ndataset.n = 20\ndataset.image_size = 3\n")
        assert run_command(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        assert (tmp_path / "out" / "metrics.csv").read_text() == ",".join(COLUMNS) + "\n"
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["convergence_round"] is None
        assert summary["version"] == __version__
        assert summary["config"]["seed"] == 1

    def test_metrics_and_summary(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert run_command(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        lines = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["algorithm"] == "slimfl"
        assert 0.5 < summary["lambda"] < 1
        assert set(summary["energy"]) >= {"comm_mW_per_round", "flops_per_epoch"}
        assert summary["bits"]["attempted_MB"] == pytest.approx(2 * 3 * 172_688 / 8e6)

    def test_deterministic_across_threads(self, tmp_path, monkeypatch):
        cfg = write_cfg(tmp_path, TINY + "algorithm = vanilla_1.5x\n")
        outputs = []
        for threads in ("1", "8", "1"):
            monkeypatch.setenv("SLIMFL_THREADS", threads)
            out = tmp_path / f"t{len(outputs)}"
            assert run_command(["run", "--config", cfg, "--out", str(out)]) == 0
            outputs.append((out / "metrics.csv").read_bytes())
        assert len(set(outputs)) == 1

    def test_seed_override(self, tmp_path):
        cfg = write_cfg(tmp_path)
        run_command(["run", "--config", cfg, "--out", str(tmp_path / "a")])
        run_command(["run", "--config", cfg, "--seed", "12", "--out", str(tmp_path / "b")])
        a = json.loads((tmp_path / "a" / "summary.json").read_text())
        b = json.loads((tmp_path / "b" / "summary.json").read_text())
        assert (a["config"]["seed"], b["config"]["seed"]) == (11, 12)

    def test_echo_reproduces_run(self, tmp_path):
        cfg = write_cfg(tmp_path)
        run_command(["run", "--config", cfg, "--out", str(tmp_path / "a")])
        echo = json.loads((tmp_path / "a" / "summary.json").read_text())["config"]
        lines = []
        for k, v in echo.items():
            if v is None:
                continue
            v = ", ".join(map(repr, v)) if isinstance(v, list) else v
            lines.append(f"{k} = {v}")
        cfg2 = write_cfg(tmp_path, "\n".join(lines) + "\n", "echo.cfg")
        run_command(["run", "--config", cfg2, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run_command(["frobnicate"]) == 1
        err = capsys.readouterr().err
        assert "usage:" in err and "error:" in err

    def test_no_subcommand(self, capsys):
        assert run_command([]) == 1

    def test_config_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "seed = 1\nlambda = 1.2\n")
        assert run_command(["run", "--config", cfg]) == 1
        assert capsys.readouterr().err.startswith("error: line 2, field 'lambda'")

    def test_missing_config(self, tmp_path, capsys):
        assert run_command(["run", "--config", str(tmp_path / "none.cfg")]) == 1
        assert run_command(["partition-report"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_runtime_failure(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        cfg = write_cfg(tmp_path, "seed = 1\nrounds = 0\ndataset.n = 20\ndataset.image_size = 3\n")
        assert run_command(["run", "--config", cfg, "--out", str(blocker / "sub")]) == 2
        assert "error: cannot write metrics" in capsys.readouterr().err

    def test_infinite_bound_is_runtime_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "seed = 1\nlambda = 1.0\n")
        assert run_command(["bound", "--config", cfg]) == 2

    def test_version_and_help(self, capsys):
        assert run_command(["--version"]) == 0
        assert __version__ in capsys.readouterr().out
        assert run_command(["run", "--help"]) == 0

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "slimfl.cli", "nope"], capture_output=True, text=True)
        assert proc.returncode == 1
        assert proc.stderr.strip().splitlines()[-1].startswith("error:")


class TestOtherCommands:
    def test_bound(self, capsys):
        assert run_command(["bound"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "t,eta_t,bound"
        rows = [list(map(float, ln.split(","))) for ln in lines[1:]]
        assert rows[0][0] == 1
        bounds = [r[2] for r in rows]
        assert all(a > b for a, b in zip(bounds, bounds[1:]))

    def test_counterexample(self, tmp_path):
        assert run_command(["counterexample", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "counterexample.csv").read_text().splitlines()
        assert lines[0] == "E,eta,gap,lower_bound,fixed_point_residual"
        assert len(lines) == 1 + 6
        for ln in lines[1:]:
            E, eta, gap, lb, res = map(float, ln.split(","))
            assert gap >= lb and res < 1e-10

    def test_partition_report(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "seed = 3\ndevices = 4\nalpha = 0.5\ndataset.n = 100\ndataset.image_size = 3\n")
        assert run_command(["partition-report", "--config", cfg]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split(",")[:3] == ["device", "n", "class_0"]
        rows = [list(map(int, ln.split(","))) for ln in lines[1:]]
        assert len(rows) == 4
        assert sum(r[1] for r in rows) == 90
        assert all(r[1] == sum(r[2:]) for r in rows)

    def test_sweep(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY.replace("rounds = 2", "rounds = 1") + "sweep.lambdas = 0.6, 0.8\n")
        assert run_command(["sweep-lambda", "--config", cfg, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "lambda,D,final_top1_0.5x,final_top1_1.0x"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["0.6", "0.8"]


class TestEmit:
    def test_three_rounds(self, tmp_path):
        s = MetricsSeries(RoundRecord(i, 1.0, 1.0, 0.5, 0.5, 1, 1, 0, 172_688, 0, 199.5, 10) for i in (1, 2, 3))
        csv_path, json_path = emit_metrics(s, tmp_path / "x")
        assert len(csv_path.read_text().splitlines()) == 4
        summary = json.loads(json_path.read_text())
        assert summary["final_top1_1.0x"] == 0.5
        assert summary["convergence_round"] is None

    def test_summary_nan_is_null(self):
        s = MetricsSeries([RoundRecord(1, float("nan"), 1.0, float("nan"), 0.5, 1, 1, 0, 0, 0, 1.0, 1)])
        assert build_summary(s)["final_top1_0.5x"] is None
