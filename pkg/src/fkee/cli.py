"""Command-line entry point: ``fkee <command> --config FILE [--seed N] [--out DIR] [--deterministic]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from . import checkpoint
from .bridge import BridgeModel, FitConfig, fit
from .errors import ConfigError, NumericError
from .fkpde import SolutionNet, SolveConfig, estimate_expectation, solve, split_paths
from .gibbs import LatticeSpec, observables, run_chain
from .harness import (
    TARGETS,
    EstimateReport,
    ExperimentConfig,
    compare_estimators,
    payoff,
    run_experiment,
    set_deterministic,
    write_csv,
)
from .sdesim import NoiseSource, PathBatch, TimeGrid

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default="fkee-out", help="output directory")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fkee", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    dbm = sub.add_parser("dbm", help="diffusion bridge model").add_subparsers(dest="action", required=True)
    _common(dbm.add_parser("fit", help="fit a bridge to the resample target and save a checkpoint"))
    fcm = sub.add_parser("fcm", help="Feynman-Kac model").add_subparsers(dest="action", required=True)
    _common(fcm.add_parser("solve", help="solve on a path CSV (paths_csv, f, x0 keys)"))
    mcmc = sub.add_parser("mcmc", help="Gibbs chains").add_subparsers(dest="action", required=True)
    _common(mcmc.add_parser("run", help="run Ising chains and export them as CSV"))
    _common(sub.add_parser("ising", help="partition-function ratio experiment"))
    _common(sub.add_parser("bench", help="run any configured experiment with repeats"))
    return parser


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _summary(rows, out: Path):
    try:
        table = compare_estimators(rows)
    except ConfigError:
        return
    (out / "summary.json").write_text(json.dumps(table, indent=2) + "\n")
    for e in table:
        extra = f" abs_error={e['abs_error']:.6g}" if "abs_error" in e else ""
        print(f"{e['method']:>22} n_or_d={e['n_or_d']} mean={e['mean_estimate']:.6g}"
              f" sq_error={e['sq_error']:.3g}{extra}")


def cmd_bench(cfg: ExperimentConfig, out: Path, deterministic: bool):
    rows = run_experiment(cfg, out, deterministic)
    _summary(rows, out)
    print(f"wrote {out / 'results.csv'}")
    failed = [r for r in rows if r.error]
    if failed:
        raise NumericError(f"{len(failed)} repeat(s) failed, first: {failed[0].error}")


def cmd_ising(cfg: ExperimentConfig, out: Path, deterministic: bool):
    if not cfg.experiment:
        cfg = dataclasses.replace(cfg, experiment="ising")
    if cfg.experiment != "ising":
        raise ConfigError("the ising command needs experiment = ising")
    cmd_bench(cfg, out, deterministic)


def cmd_dbm_fit(cfg: ExperimentConfig, out: Path, deterministic: bool):
    cfg = dataclasses.replace(cfg, experiment=cfg.experiment or "resample").resolved()
    target = TARGETS["mixed3d"]()
    y = target.sampler(cfg.samples, cfg.seed)
    grid = TimeGrid.from_horizon(cfg.T, cfg.h)
    hidden = tuple(int(w) for w in cfg.bridge_hidden.split(","))
    model = BridgeModel.create(target.dim, grid, hidden=hidden, seed=cfg.seed, x0=y.mean(0))
    model, rep = fit(model, "terminal", y, FitConfig(cfg.bridge_epochs, cfg.bridge_lr, seed=cfg.seed, loss=cfg.loss))
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, out / "bridge.ckpt")
    with torch.no_grad():
        model.simulate(NoiseSource(cfg.seed, 2), cfg.samples).to_csv(out / "paths.csv")
    (out / "fit_report.json").write_text(json.dumps(dataclasses.asdict(rep), indent=2) + "\n")
    print(f"loss {rep.trace[0] if rep.trace else rep.final_loss:.6g} -> {rep.final_loss:.6g} "
          f"({rep.epochs_run} epochs, {rep.stop_reason}); wrote {out / 'bridge.ckpt'}")


def cmd_fcm_solve(cfg: ExperimentConfig, out: Path, deterministic: bool):
    if not cfg.paths_csv:
        raise ConfigError("fcm solve needs paths_csv")
    batch = PathBatch.from_csv(cfg.paths_csv)
    f = payoff(cfg.f or "x")
    colloc, boundary = split_paths(batch, cfg.stride or 1, f)
    u = SolutionNet.create(batch.dim, width=cfg.fcm_width, seed=cfg.seed)
    u, rep = solve(u, colloc, boundary, cfg=SolveConfig(epochs=cfg.fcm_epochs or 400, lr=cfg.fcm_lr, seed=cfg.seed))
    x0 = batch.states[0, 0] if cfg.x0 is None else torch.full((batch.dim,), float(cfg.x0), dtype=torch.float64)
    est = estimate_expectation(u, x0, batch.grid.t0)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(u, out / "solution.ckpt")
    row = EstimateReport("fcm-solve", "fkee", batch.dim, est, None, len(colloc) + len(boundary.f), 0.0,
                         cfg.seed, cfg.config_hash() if cfg.experiment else "")
    write_csv([row], out / "results.csv")
    print(f"u(x0, t0) = {est!r} (loss {rep.final_loss:.3g}); wrote {out / 'results.csv'}")


def cmd_mcmc_run(cfg: ExperimentConfig, out: Path, deterministic: bool):
    lat = LatticeSpec(cfg.n)
    chain = run_chain(lat, cfg.beta1, cfg.sweeps, cfg.seed, n_chains=cfg.chains)
    F, G = observables(cfg.beta1, cfg.beta2)
    out.mkdir(parents=True, exist_ok=True)
    chain.to_csv(out / "chain.csv", {"F": F, "G": G})
    print(f"{cfg.chains} chains x {cfg.sweeps} sweeps at beta={cfg.beta1}; wrote {out / 'chain.csv'}")


COMMANDS = {
    ("dbm", "fit"): cmd_dbm_fit,
    ("fcm", "solve"): cmd_fcm_solve,
    ("mcmc", "run"): cmd_mcmc_run,
    ("ising", None): cmd_ising,
    ("bench", None): cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.deterministic:
            set_deterministic(True)
        COMMANDS[(args.command, getattr(args, "action", None))](cfg, Path(args.out), args.deterministic)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
