"""Command-line entry point: ``slimfl {run,sweep-lambda,bound,counterexample,partition-report}``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 for
failures while running.  Errors go to standard error prefixed ``error:``.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import analysis as an
from . import fedavg_oracle as fo
from . import linkmodel as lm
from .config import ExperimentConfig, parse_config, parse_config_text
from .datakit import dirichlet_partition, holdout_split
from .errors import ConfigError, SlimFLError
from .fedsim import run_algorithm
from .metrics import MetricsSeries


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


def build_summary(series: MetricsSeries, cfg: ExperimentConfig | None = None, extra: dict | None = None) -> dict:
    last = series[-1] if len(series) else None
    acc_full = [r.top1_full for r in series]
    conv = an.detect_convergence(acc_full)
    energy = an.energy_entry(series, conv)
    summary = {
        "version": __version__,
        "rounds": len(series),
        "final_top1_0.5x": last.top1_half if last else None,
        "final_top1_1.0x": last.top1_full if last else None,
        "convergence_round": conv,
        "energy": {
            "comm_mW_per_round": energy.comm_mW_per_round,
            "flops_per_epoch": energy.flops_per_epoch,
            "total_comm_mW": energy.total_comm_mW,
            "total_flops": energy.total_flops,
        },
        "bits": an.bits_report(series),
    }
    if cfg is not None:
        summary["algorithm"] = cfg.algorithm
        summary["config"] = cfg.echo()
    summary.update(extra or {})
    return _jsonable(summary)


def emit_metrics(series: MetricsSeries, out_dir: str | Path, summary: dict | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = series.write_csv(out / "metrics.csv")
        json_path = out / "summary.json"
        payload = summary if summary is not None else build_summary(series)
        with open(json_path, "w", newline="\n", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise SlimFLError(f"cannot write metrics to {out}: {exc.strerror or exc}") from None
    return csv_path, json_path


def _write_table(header: Sequence[str], rows, out_dir: str | None, name: str) -> None:
    buf = io.StringIO(newline="")
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(v if isinstance(v, str) else ("%.9g" % v if isinstance(v, float) else str(v)) for v in row) + "\n")
    text = buf.getvalue()
    if out_dir is None:
        sys.stdout.write(text)
        return
    path = Path(out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / name, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise SlimFLError(f"cannot write {path / name}: {exc.strerror or exc}") from None


def _load(args, required: bool = True) -> ExperimentConfig | None:
    overrides = {"seed": args.seed}
    if args.config is None:
        if required:
            raise ConfigError("--config is required for this command")
        return parse_config_text("", overrides={"seed": 0 if args.seed is None else args.seed})
    return parse_config(args.config, overrides)


def cmd_run(args) -> None:
    cfg = _load(args)
    data = cfg.dataset()
    result = run_algorithm(cfg.algorithm, cfg.sim_config(), data)
    extra = {"lambda": result.lam, "skipped_device_rounds": int(sum(result.skipped_devices))}
    emit_metrics(result.series, args.out, build_summary(result.series, cfg, extra))


def cmd_sweep(args) -> None:
    cfg = _load(args)
    data = cfg.dataset()
    ch = cfg.channel()
    rows = []
    for lam in cfg["sweep.lambdas"]:
        D = float(lm.exact_diversity(lam, ch.total_power_P, ch.u_prime, ch.c))
        series = run_algorithm("slimfl", cfg.sim_config(lam=lam), data).series
        last = series[-1] if len(series) else None
        rows.append((lam, D, last.top1_half if last else math.nan, last.top1_full if last else math.nan))
    _write_table(("lambda", "D", "final_top1_0.5x", "final_top1_1.0x"), rows, args.out, "sweep.csv")


def cmd_bound(args) -> None:
    cfg = _load(args, required=False)
    fleet = an.default_fleet(cfg.seed)
    ch = cfg.channel()
    lam = cfg["lambda"]
    lam = lm.optimize_lambda(ch) if lam == "auto" else lam
    prof = lm.decode_profile(lm.split_power(ch.total_power_P, lam), ch.u_prime, ch.c)
    if prof.p2 <= 0:
        raise SlimFLError("RH decoding probability is zero; the bound is infinite")
    theta1 = fleet.theta_star + 1.0 / math.sqrt(fleet.dim)
    base = fleet.bound_params(theta1)
    params = an.BoundParams(base.L, base.mu, base.delta, prof.p1, prof.p2, tuple(cfg["trainer.weights"]), base.Delta1)
    t = np.unique(np.geomspace(1, cfg["bound.t_max"], cfg["bound.points"]).round().astype(np.int64))
    eta = an.step_size(t, params.L, params.mu)
    bound = an.convergence_bound(t, params)
    _write_table(("t", "eta_t", "bound"), zip(t.tolist(), eta.tolist(), bound.tolist()), args.out, "bound.csv")


def cmd_counterexample(args) -> None:
    cfg = _load(args, required=False)
    ex = fo.build_quadratic_example(cfg["counterexample.N"], cfg["counterexample.p"])
    ws = fo.optimal_point(ex)
    rows = []
    for E in cfg["counterexample.E"]:
        for eta in cfg["counterexample.eta"]:
            wt = fo.fixed_point(ex, E, eta)
            R, c = fo.round_map(ex, E, eta)
            resid = float(np.linalg.norm(R @ wt + c - wt))
            rows.append((E, eta, float(np.linalg.norm(wt - ws)), fo.gap_lower_bound(ex, E, eta), resid))
    _write_table(("E", "eta", "gap", "lower_bound", "fixed_point_residual"), rows, args.out, "counterexample.csv")


def cmd_partition(args) -> None:
    cfg = _load(args)
    data = cfg.dataset()
    train, _ = holdout_split(data, cfg["holdout_fraction"], cfg.seed)
    part = dirichlet_partition(train.labels, cfg["devices"], cfg["alpha"], cfg.seed)
    counts = part.class_counts(train.labels, train.classes)
    header = ("device", "n") + tuple(f"class_{c}" for c in range(train.classes))
    rows = [(k, int(counts[:, k].sum()), *map(int, counts[:, k])) for k in range(part.K)]
    _write_table(header, rows, args.out, "partition.csv")


COMMANDS = {
    "run": cmd_run,
    "sweep-lambda": cmd_sweep,
    "bound": cmd_bound,
    "counterexample": cmd_counterexample,
    "partition-report": cmd_partition,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slimfl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"slimfl {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--out", metavar="DIR", default="." if name == "run" else None)
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SlimFLError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
