"""Batch experiment driver.

Subcommands:
  run    Monte-Carlo experiment over one or more strategies
  audit  single short run with the subspace auditor forced on
  bench  kernel/transform timing harness

Configuration comes from a plain-text key-value file with dotted
nesting (sections: sim.*, filter.*, noise.*); CLI flags override file
values. Outputs are deterministic in (config, seed).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import bench as bench_mod
from .evaluation import RunMetrics, aggregate, epoch_errors, improvement
from .filter import (FilterConfig, FilterEstimate, Mode, SlidingWindowFilter,
                     Strategy, initial_estimate)
from .simulator import SimConfig, simulate

log = logging.getLogger(__name__)

DIVERGE_POS_M = 1e3


@dataclasses.dataclass
class ExperimentSpec:
    strategies: list[Strategy]
    mode: Mode
    runs: int
    seed: int
    out: str
    audit: bool = False
    init_variant: str = "separate"
    workers: int = 1
    max_failures: int = 0
    sim_cfg: SimConfig = dataclasses.field(default_factory=SimConfig)
    filter_cfg: FilterConfig = dataclasses.field(default_factory=FilterConfig)


def parse_config_file(path: str) -> dict[str, str]:
    """key = value lines; dots give nesting; # starts a comment."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _coerce(current, val: str):
    if isinstance(current, bool):
        return val.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(val)
    if isinstance(current, float):
        return float(val)
    if isinstance(current, np.ndarray):
        return np.array([float(x) for x in val.split(",")])
    if isinstance(current, Strategy):
        return Strategy(val)
    if isinstance(current, Mode):
        return Mode(val)
    return val


def apply_config(kv: dict[str, str], sim_cfg: SimConfig,
                 filter_cfg: FilterConfig) -> None:
    targets = {"sim": sim_cfg, "filter": filter_cfg,
               "noise": sim_cfg.noise}
    for key, val in kv.items():
        section, _, name = key.partition(".")
        if section not in targets or not name:
            raise ValueError(f"unknown config key {key!r}")
        obj = targets[section]
        if not hasattr(obj, name):
            raise ValueError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(getattr(obj, name), val))
    # the filter assumes the noise model the simulator uses
    filter_cfg.noise = sim_cfg.noise
    filter_cfg.sigma_uv = sim_cfg.sigma_uv


def run_single(sim_cfg: SimConfig, filter_cfg: FilterConfig, seed: int,
               audit: bool) -> tuple[RunMetrics, list[dict], dict]:
    """One (strategy, seed) run: simulate, filter, collect metrics."""
    data = simulate(sim_cfg, seed)
    fcfg = dataclasses.replace(filter_cfg, audit=audit)
    est = initial_estimate(data.truth.imu_state(0.0), fcfg,
                           np.random.default_rng([seed, 3]))
    swf = SlidingWindowFilter(fcfg, est)
    n = len(data.frames)
    cols = {k: np.full(n, np.nan) for k in
            ("t", "ori", "pos", "nees_ori", "nees_pos", "nees_yaw")}
    skipped = 0
    diverged = False
    for k, (t, obs) in enumerate(data.frames):
        swf.process_frame(t, obs, data.frame_samples(k))
        cols["t"][k] = t
        row = epoch_errors(swf.est, data.truth.imu_state(t))
        if row is None:
            skipped += 1
            continue
        cols["ori"][k] = row.ori_err_deg
        cols["pos"][k] = row.pos_err_m
        cols["nees_ori"][k] = row.ori_nees
        cols["nees_pos"][k] = row.pos_nees
        cols["nees_yaw"][k] = row.yaw_nees
        if row.pos_err_m > DIVERGE_POS_M or swf.stats.diverged:
            diverged = True
            break
    metrics = RunMetrics(cols["t"], cols["ori"], cols["pos"],
                         cols["nees_ori"], cols["nees_pos"], cols["nees_yaw"],
                         diverged=diverged, skipped=skipped)
    audit_lines = []
    if swf.est.audit is not None:
        for rec in swf.est.audit.records:
            audit_lines.append({
                "t": round(rec.stamp, 6),
                "step": rec.step,
                "status": rec.status.label.value,
                "dim": rec.status.dim,
                "angle": float(rec.status.angle),
            })
    return metrics, audit_lines, dataclasses.asdict(swf.stats)


def _task(args):
    strat_value, sim_cfg, filter_cfg, seed, audit = args
    fcfg = dataclasses.replace(filter_cfg, strategy=Strategy(strat_value))
    return strat_value, seed, run_single(sim_cfg, fcfg, seed, audit)


def _fmt(v) -> str:
    return f"{v:.12g}"


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def run_experiment(spec: ExperimentSpec) -> int:
    os.makedirs(spec.out, exist_ok=True)
    tasks = []
    for strat in spec.strategies:
        fcfg = dataclasses.replace(
            spec.filter_cfg, strategy=strat, mode=spec.mode,
            init_variant=spec.init_variant)
        fcfg.validate()
        for i in range(spec.runs):
            tasks.append((strat.value, spec.sim_cfg, fcfg,
                          spec.seed + i, spec.audit))

    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            raw = list(pool.map(_task, tasks))
    else:
        raw = [_task(t) for t in tasks]

    by_strat: dict[str, list] = {s.value: [] for s in spec.strategies}
    for strat_value, seed, payload in raw:
        by_strat[strat_value].append((seed, payload))

    header = ["t", "ori_rmse_deg", "pos_rmse_m", "ori_nees", "pos_nees", "yaw_nees"]
    summaries = {}
    total_failed = 0
    for strat in spec.strategies:
        sdir = os.path.join(spec.out, strat.value)
        os.makedirs(sdir, exist_ok=True)
        runs = []
        for idx, (seed, (metrics, audit_lines, _stats)) in enumerate(
                sorted(by_strat[strat.value])):
            runs.append(metrics)
            rows = zip(metrics.t, metrics.ori_err_deg, metrics.pos_err_m,
                       metrics.ori_nees, metrics.pos_nees, metrics.yaw_nees)
            write_csv(os.path.join(sdir, f"run_{idx:03d}.csv"),
                      ["t", "ori_err_deg", "pos_err_m",
                       "ori_nees", "pos_nees", "yaw_nees"], rows)
            if audit_lines:
                with open(os.path.join(sdir, f"audit_run_{idx:03d}.jsonl"), "w") as f:
                    for line in audit_lines:
                        f.write(json.dumps(line) + "\n")
        summary = aggregate(runs)
        summaries[strat.value] = summary
        total_failed += summary.n_failed
        rows = zip(summary.t, summary.ori_rmse_deg, summary.pos_rmse_m,
                   summary.ori_nees, summary.pos_nees, summary.yaw_nees)
        write_csv(os.path.join(sdir, "aggregate.csv"), header, rows)

    base = spec.strategies[0].value
    base_rmse = summaries[base].avg_pos_rmse_m
    table = [["strategy", "runs", "failed", "ori_rmse_deg", "pos_rmse_m",
              "ori_nees", "pos_nees", "yaw_nees", "pos_impr"]]
    srows = []
    for strat in spec.strategies:
        s = summaries[strat.value]
        impr = ("--" if strat.value == base
                else f"{100 * improvement(base_rmse, s.avg_pos_rmse_m):.1f}%")
        table.append([strat.value, str(s.n_runs), str(s.n_failed),
                      f"{s.avg_ori_rmse_deg:.4f}", f"{s.avg_pos_rmse_m:.4f}",
                      f"{s.avg_ori_nees:.3f}", f"{s.avg_pos_nees:.3f}",
                      f"{s.avg_yaw_nees:.3f}", impr])
        srows.append([s.avg_ori_rmse_deg, s.avg_pos_rmse_m, s.avg_ori_nees,
                      s.avg_pos_nees, s.avg_yaw_nees])
    widths = [max(len(r[c]) for r in table) for c in range(len(table[0]))]
    for r in table:
        print("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    with open(os.path.join(spec.out, "summary.csv"), "w") as f:
        f.write("strategy,ori_rmse_deg,pos_rmse_m,ori_nees,pos_nees,yaw_nees\n")
        for strat, row in zip(spec.strategies, srows):
            f.write(strat.value + "," + ",".join(_fmt(v) for v in row) + "\n")

    return 0 if total_failed <= spec.max_failures else 1


def run_audit_demo(spec: ExperimentSpec) -> int:
    os.makedirs(spec.out, exist_ok=True)
    strat = spec.strategies[0]
    fcfg = dataclasses.replace(spec.filter_cfg, strategy=strat, mode=spec.mode,
                               init_variant=spec.init_variant)
    fcfg.validate()
    _, audit_lines, _ = run_single(spec.sim_cfg, fcfg, spec.seed, audit=True)
    path = os.path.join(spec.out, f"audit_{strat.value}.jsonl")
    with open(path, "w") as f:
        for line in audit_lines:
            f.write(json.dumps(line) + "\n")
    for line in audit_lines:
        print(f"t={line['t']:<8g} step={line['step']:<11s} "
              f"status={line['status']:<11s} dim={line['dim']} "
              f"angle={line['angle']:.3e}")
    counts: dict[str, int] = {}
    for line in audit_lines:
        counts[line["status"]] = counts.get(line["status"], 0) + 1
    print("status tally:", " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    print(f"audit log written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swfvio")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--mode", default="hybrid",
                       choices=[m.value for m in Mode])
        p.add_argument("--strategy", default="std",
                       help="comma-separated list, e.g. std,usa-dt")
        p.add_argument("--runs", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--audit", action="store_true")
        p.add_argument("--init-variant", default="separate",
                       choices=["separate", "batch"])
        p.add_argument("--out", default="out")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="worker processes (default: all cores)")
        p.add_argument("--max-failures", type=int, default=0)
        p.add_argument("--duration", type=float, default=None,
                       help="override sim duration, seconds")

    p_run = sub.add_parser("run", help="Monte-Carlo experiment")
    common(p_run)
    p_audit = sub.add_parser("audit", help="status-timeline demo")
    common(p_audit)
    p_bench = sub.add_parser("bench", help="timing harness")
    bench_mod.add_args(p_bench)
    return ap


def spec_from_args(args) -> ExperimentSpec:
    sim_cfg = SimConfig()
    filter_cfg = FilterConfig()
    if args.config:
        apply_config(parse_config_file(args.config), sim_cfg, filter_cfg)
    else:
        filter_cfg.noise = sim_cfg.noise
        filter_cfg.sigma_uv = sim_cfg.sigma_uv
    if args.duration is not None:
        sim_cfg.duration = args.duration
    strategies = [Strategy(s.strip()) for s in args.strategy.split(",") if s.strip()]
    if not strategies:
        raise ValueError("no strategy given")
    if args.runs < 1:
        raise ValueError("runs must be >= 1")
    return ExperimentSpec(
        strategies=strategies, mode=Mode(args.mode), runs=args.runs,
        seed=args.seed, out=args.out, audit=args.audit,
        init_variant=args.init_variant, workers=max(1, args.workers),
        max_failures=args.max_failures, sim_cfg=sim_cfg, filter_cfg=filter_cfg)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "bench":
        return bench_mod.run(args)
    try:
        spec = spec_from_args(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command == "run":
        return run_experiment(spec)
    return run_audit_demo(spec)


if __name__ == "__main__":
    sys.exit(main())
