"""Command-line driver: ``cohfilter {master,trajectory,ensemble,validate,eps-convergence}``.

Exit codes: 0 pass, 1 validation fail, 2 configuration error, 3 inconclusive,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import _engine as eng
from . import fockspace as fs
from .config import ConfigError, RunConfig, build_model, load_config, manifest, parse_config
from .counting import simulate_counting
from .diffusion import epsilon_convergence, simulate_diffusion
from .ensemble import AbortRateError, EnsembleSpec, default_workers, run_ensemble, validate_against_master
from .heterodyne import simulate_heterodyne
from .master import integrate_master

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_INCONCLUSIVE, EXIT_ABORT = 0, 1, 2, 3, 4
CSV_COLUMNS = ("t", "re_b", "im_b", "n", "purity", "defect")
NUMERICAL_ERRORS = (fs.TruncationError, fs.PositivityError, AbortRateError, eng.StepSizeError, eng.SamplingError)

log = logging.getLogger("cohfilter")


def write_csv(path: Path, obs: dict) -> None:
    cols = np.column_stack([np.asarray(obs[c], dtype=float) for c in CSV_COLUMNS])
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join("%.17g" % v for v in row) for row in cols]
    path.write_text("\n".join(lines) + "\n")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def write_jsonl(path: Path, records) -> None:
    path.write_text("".join(_dumps(r) + "\n" for r in records))


class _Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, cfg: RunConfig, command: str, out: Path):
        self.cfg, self.command, self.out = cfg, command, out
        self.files: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def finish(self, **extra) -> None:
        # execution-only settings do not change results and are left out
        cfg = self.cfg.replace("run", workers=None).replace("output", dir="out")
        self.files.append("manifest.json")
        (self.out / "manifest.json").write_text(manifest(cfg, self.command, self.files, **extra))


def cmd_master(cfg: RunConfig, out: Path) -> int:
    run = _Run(cfg, "master", out)
    model = build_model(cfg)
    res = integrate_master(model, cfg.run.t_final, cfg.master_step(), stride=cfg.run.sample_stride)
    write_csv(run.path("master.csv"), res.observables())
    run.finish(renormalizations=res.renormalizations)
    return EXIT_PASS


def simulate(cfg: RunConfig):
    model = build_model(cfg)
    r = cfg.run
    dt = cfg.step()
    stride = eng.TimeGrid.from_interval(r.t_final, dt, r.sample_interval).stride if r.sample_interval else r.sample_stride
    if r.unraveling == "counting":
        return simulate_counting(model, r.t_final, dt, r.seed, r.method, stride)
    if r.unraveling == "heterodyne":
        return simulate_heterodyne(model, r.t_final, dt, r.seed, r.method, stride)
    return simulate_diffusion(model, r.t_final, dt, r.seed, stride)


def cmd_trajectory(cfg: RunConfig, out: Path) -> int:
    run = _Run(cfg, "trajectory", out)
    traj = simulate(cfg)
    write_csv(run.path("trajectory.csv"), traj.observables())
    kind = cfg.run.unraveling
    if kind == "diffusion":
        ts = traj.grid.times[1:]
        head = {"kind": kind, "seed": traj.seed, "dt": traj.grid.dt, "n_steps": traj.grid.n_steps}
        body = ({"t": float(t), "dW": float(w)} for t, w in zip(ts, traj.wiener_increments))
    else:
        eps = traj.model.lo.epsilon if kind == "heterodyne" and traj.model.lo.enabled else None
        head = {"kind": kind, "seed": traj.seed, "dt": traj.grid.dt, "t_final": traj.record.t_final,
                "n_jumps": len(traj.record), "eps": eps, "method": traj.method}
        body = ({"t": float(t)} for t in traj.record.jump_times)
    write_jsonl(run.path("record.jsonl"), [head, *body])
    run.finish()
    return EXIT_PASS


def ensemble_spec(cfg: RunConfig, workers: int) -> EnsembleSpec:
    r = cfg.run
    return EnsembleSpec(
        model=build_model(cfg), unraveling=r.unraveling, n_traj=r.n_traj, t_final=r.t_final,
        dt=cfg.step(), base_seed=r.seed, sample_stride=r.sample_stride, sample_interval=r.sample_interval,
        method=r.method, block_size=r.block_size, workers=workers,
    )


def _ensemble(cfg: RunConfig, run: _Run, workers: int):
    stats = run_ensemble(ensemble_spec(cfg, workers))
    write_csv(run.path("ensemble.csv"), stats.observables())
    write_jsonl(run.path("stats.jsonl"), stats.to_records())
    return stats


def cmd_ensemble(cfg: RunConfig, out: Path, workers: int) -> int:
    run = _Run(cfg, "ensemble", out)
    _ensemble(cfg, run, workers)
    run.finish()
    return EXIT_PASS


def cmd_validate(cfg: RunConfig, out: Path, workers: int) -> int:
    run = _Run(cfg, "validate", out)
    stats = _ensemble(cfg, run, workers)
    ref = integrate_master(stats.spec.model, cfg.run.t_final, cfg.master_step(), sample_times=stats.times)
    write_csv(run.path("master.csv"), ref.observables())
    report = validate_against_master(stats, ref)
    run.path("validation.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    run.finish(status=report.status)
    print(f"{report.status}: max trace distance {report.max_trace_distance:.4g} (threshold {report.threshold:.4g})")
    return {"PASS": EXIT_PASS, "FAIL": EXIT_FAIL, "INCONCLUSIVE": EXIT_INCONCLUSIVE}[report.status]


def cmd_eps_convergence(cfg: RunConfig, out: Path, workers: int) -> int:
    run = _Run(cfg, "eps-convergence", out)
    r = cfg.run
    interval = r.sample_interval if r.sample_interval else 0.1
    report = epsilon_convergence(
        build_model(cfg), r.eps_list, r.n_traj, r.t_final,
        diffusion_dt=r.dt if r.dt is not None else 1e-3,
        sample_interval=interval, base_seed=r.seed, workers=workers,
    )
    data = report.to_dict()
    last = report.rows[-1].increment_var_ratio
    data["variance_ok"] = bool(abs(last - 1.0) <= 0.1)
    run.path("eps_convergence.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    run.finish()
    if not report.resolvable:
        print("INCONCLUSIVE: statistical error exceeds the gap between the extreme eps values")
        return EXIT_INCONCLUSIVE
    ok = report.monotone and data["variance_ok"]
    print(("PASS" if ok else "FAIL") + f": deviations {[round(row.deviation, 5) for row in report.rows]}")
    return EXIT_PASS if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cohfilter", description="Simulate continuously observed cavity fields.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("master", "trajectory", "ensemble", "validate", "eps-convergence"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON configuration (or a manifest from an earlier run)")
        s.add_argument("--seed", type=int, help="base seed, 0 <= seed < 2**64")
        s.add_argument("--workers", type=int, help="worker processes (default: $COHFILTER_WORKERS or 1)")
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--unraveling", choices=("counting", "heterodyne", "diffusion"))
    return p


def resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    run_changes = {}
    if args.seed is not None:
        run_changes["seed"] = args.seed
    if args.unraveling is not None:
        run_changes["unraveling"] = args.unraveling
    if args.workers is not None:
        run_changes["workers"] = args.workers
    if args.out is not None:
        cfg = cfg.replace("output", dir=str(args.out))
    if run_changes:
        cfg = parse_config(cfg.replace("run", **run_changes).to_dict())
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        workers = cfg.run.workers if cfg.run.workers is not None else default_workers()
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output.dir)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "master":
                return cmd_master(cfg, out)
            if args.command == "trajectory":
                return cmd_trajectory(cfg, out)
            if args.command == "ensemble":
                return cmd_ensemble(cfg, out, workers)
            if args.command == "validate":
                return cmd_validate(cfg, out, workers)
            return cmd_eps_convergence(cfg, out, workers)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
