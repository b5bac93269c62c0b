"""Experiment configuration, registry, runner and reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .bridge import BridgeModel, FitConfig, fit, resample
from .errors import ConfigError, NumericError
from .fkpde import SolutionNet, SolveConfig, estimate_expectation, solve, split_paths
from .gibbs import ESTIMATORS, IsingBudget, gpf_ratio_experiment
from .gradengine import DTYPE
from .sdesim import NoiseSource, TimeGrid, brownian_sde, jacobi_sde, langevin_sde, gaussian_score, simulate
from .targets import mixed_3d, mixed_3d_mean

EXPERIMENTS = ("ising", "resample", "langevin1d", "jacobi", "gauss-highdim", "heat-oracle", "ou-oracle")
CSV_COLUMNS = ("experiment", "method", "n_or_d", "estimate", "truth", "abs_error", "sq_error",
               "points_used", "wall_time_s", "seed", "config_hash")


# -- registry -----------------------------------------------------------------

@dataclass(frozen=True)
class Target:
    sampler: Callable[[int, int], torch.Tensor]  # (n, seed) -> (n, d)
    dim: int
    mean: Optional[np.ndarray] = None


def product_gaussian(mean: float, d: int) -> Target:
    def sample(n, seed):
        return torch.from_numpy(np.random.default_rng(seed).normal(mean, 1.0, (n, d)))
    return Target(sample, d, np.full(d, mean))


TARGETS: Dict[str, Callable[..., Target]] = {
    "mixed3d": lambda: Target(mixed_3d, 3, mixed_3d_mean()),
    "gaussian": product_gaussian,
}

PAYOFFS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "x": lambda x: x[:, 0],
    "x2": lambda x: x[:, 0] ** 2,
    "sum": lambda x: x.sum(1),
    "sum_sq": lambda x: (x ** 2).sum(1),
}


def payoff(name: str):
    try:
        return PAYOFFS[name]
    except KeyError:
        raise ConfigError(f"unknown payoff {name!r}; choose from {sorted(PAYOFFS)}") from None


# -- configuration ------------------------------------------------------------

@dataclass
class ExperimentConfig:
    experiment: str = ""
    seed: int = 0
    repeats: int = 1
    workers: int = 1
    dim: Optional[int] = None
    n: int = 2
    paths: Optional[int] = None
    T: Optional[float] = None
    h: Optional[float] = None
    stride: Optional[int] = None
    x0: Optional[float] = None
    t0: float = 0.0
    f: Optional[str] = None
    fcm_epochs: Optional[int] = None
    fcm_lr: float = 1e-3
    fcm_width: Optional[int] = None
    bridge_epochs: int = 300
    bridge_lr: float = 1e-3
    bridge_hidden: str = "64,64"
    loss: str = "w2_marginal_sum"
    samples: int = 500
    jacobi_scale: Optional[float] = None
    beta1: float = -0.02
    beta2: float = 0.0
    estimators: str = "exact,lln,etmc,fkee-direct"
    chains: int = 100
    moments: int = 20
    sweeps: int = 1000
    paths_csv: Optional[str] = None

    def __post_init__(self):
        if self.experiment and self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.repeats < 1 or self.workers < 1:
            raise ConfigError("repeats and workers must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in kw:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            kw[key] = _coerce(key, types[key], value)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.parse(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def resolved(self) -> "ExperimentConfig":
        """Copy with the experiment's defaults filled into unset fields."""
        if not self.experiment:
            raise ConfigError("config must name an experiment")
        filled = {k: v for k, v in DEFAULTS.get(self.experiment, {}).items() if getattr(self, k) is None}
        out = dataclasses.replace(self, **filled)
        if out.experiment == "jacobi" and out.jacobi_scale is None:
            out.jacobi_scale = out.h
        return out

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved().dumps().encode()).hexdigest()[:16]


def _coerce(key, typ, value):
    typ = str(typ)
    if value.lower() == "none" and "Optional" in typ:
        return None
    try:
        if "int" in typ:
            return int(value)
        if "float" in typ:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
    return value


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


DEFAULTS = {
    "heat-oracle": dict(dim=1, T=1.0, h=0.01, paths=100, stride=10, x0=0.0, f="x2", fcm_epochs=2000, fcm_width=32),
    "ou-oracle": dict(dim=1, T=10.0, h=0.01, paths=50, stride=50, x0=0.0, f="x", fcm_epochs=2000, fcm_width=32),
    "langevin1d": dict(dim=1, T=10.0, h=0.01, paths=5, stride=100, x0=0.0, f="x", fcm_epochs=400),
    "jacobi": dict(dim=1, T=1.0, h=0.01, paths=100, stride=10, x0=0.5, f="x", fcm_epochs=1000, fcm_width=32),
    "gauss-highdim": dict(dim=5, T=10.0, h=0.1, paths=50, stride=10, x0=0.0, f="sum", fcm_epochs=400),
    "resample": dict(dim=3, T=0.2, h=0.025, paths=None, stride=1, f="sum", fcm_epochs=400, fcm_width=32),
    "ising": dict(fcm_epochs=400),
}


def truth_of(cfg: ExperimentConfig) -> Optional[float]:
    e = cfg.experiment
    if e == "heat-oracle":
        return cfg.x0 ** 2 + cfg.T
    if e == "ou-oracle":
        return 1.0 + (cfg.x0 - 1.0) * math.exp(-0.5 * cfg.T)
    if e == "langevin1d":
        return 1.0
    if e == "jacobi":
        return 0.5
    if e == "gauss-highdim":
        return 0.2 * cfg.dim
    return None


def sde_of(cfg: ExperimentConfig):
    e = cfg.experiment
    if e == "heat-oracle":
        return brownian_sde()
    if e in ("ou-oracle", "langevin1d"):
        return langevin_sde(gaussian_score(1.0))
    if e == "gauss-highdim":
        return langevin_sde(gaussian_score(torch.full((cfg.dim,), 0.2, dtype=DTYPE)))
    if e == "jacobi":
        return jacobi_sde(cfg.jacobi_scale)
    raise ConfigError(f"experiment {e!r} has no fixed SDE")


def derived_seeds(seed: int, repeats: int) -> List[int]:
    children = np.random.SeedSequence(seed).spawn(repeats)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


# -- experiments --------------------------------------------------------------

@dataclass
class EstimateReport:
    experiment: str
    method: str
    n_or_d: int
    estimate: float
    truth: Optional[float]
    points_used: int
    wall_time_s: float
    seed: int
    config_hash: str
    abs_error: Optional[float] = None
    sq_error: Optional[float] = None
    error: str = ""


def _fcm(cfg: ExperimentConfig, batch, f, x0, seed):
    colloc, boundary = split_paths(batch, cfg.stride, f)
    u = SolutionNet.create(batch.dim, width=cfg.fcm_width, seed=seed)
    u, rep = solve(u, colloc, boundary, cfg=SolveConfig(epochs=cfg.fcm_epochs, lr=cfg.fcm_lr, seed=seed))
    return estimate_expectation(u, x0, cfg.t0), len(colloc) + len(boundary.f), u


def _sde_repeat(cfg: ExperimentConfig, seed: int, h: str) -> List[EstimateReport]:
    grid = TimeGrid.from_horizon(cfg.T, cfg.h, cfg.t0)
    x0 = torch.full((cfg.dim,), float(cfg.x0), dtype=DTYPE)
    f = payoff(cfg.f)
    truth = truth_of(cfg)
    t = time.perf_counter()
    batch = simulate(sde_of(cfg), x0, grid, NoiseSource(seed), cfg.paths)
    sim_time = time.perf_counter() - t
    lln = f(batch.terminal()).mean().item()
    rows = [EstimateReport(cfg.experiment, "lln", cfg.dim, lln, truth, cfg.paths, sim_time, seed, h)]
    t = time.perf_counter()
    est, pts, _ = _fcm(cfg, batch, f, x0, seed)
    rows.append(EstimateReport(cfg.experiment, "fkee", cfg.dim, est, truth, pts,
                               sim_time + time.perf_counter() - t, seed, h))
    return rows


def _resample_repeat(cfg: ExperimentConfig, seed: int, h: str) -> List[EstimateReport]:
    target = TARGETS["mixed3d"]()
    grid = TimeGrid.from_horizon(cfg.T, cfg.h)
    t = time.perf_counter()
    y = target.sampler(cfg.samples, seed)
    hidden = tuple(int(w) for w in cfg.bridge_hidden.split(","))
    model = BridgeModel.create(target.dim, grid, hidden=hidden, seed=seed, x0=y.mean(0))
    model, rep = fit(model, "terminal", y, FitConfig(cfg.bridge_epochs, cfg.bridge_lr, seed=seed, loss=cfg.loss))
    r = resample(model, cfg.samples, seed)
    fit_time = time.perf_counter() - t
    rows = []
    for k in range(target.dim):
        mu = float(target.mean[k])
        rows.append(EstimateReport(cfg.experiment, "target-empirical", k + 1, y[:, k].mean().item(), mu,
                                   cfg.samples, 0.0, seed, h))
        rows.append(EstimateReport(cfg.experiment, "dbm-resample", k + 1, r[:, k].mean().item(), mu,
                                   cfg.samples, fit_time, seed, h))
    f = payoff(cfg.f)
    truth = float(f(torch.from_numpy(target.mean)[None]).item()) if cfg.f in ("sum", "x") else None
    t = time.perf_counter()
    with torch.no_grad():
        batch = model.simulate(NoiseSource(seed, 2), cfg.samples)
    est, pts, _ = _fcm(cfg, batch, f, model.x0.detach(), seed)
    rows.append(EstimateReport(cfg.experiment, "dbm+fcm", target.dim, est, truth, cfg.samples,
                               fit_time + time.perf_counter() - t, seed, h))
    return rows


def _ising_repeat(cfg: ExperimentConfig, seed: int, h: str) -> List[EstimateReport]:
    budget = IsingBudget(chains=cfg.chains, moments=cfg.moments, fcm_epochs=cfg.fcm_epochs,
                         fcm_lr=cfg.fcm_lr, fcm_width=cfg.fcm_width)
    rows = []
    for est in [e.strip() for e in cfg.estimators.split(",") if e.strip()]:
        if est not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {est!r}")
        t = time.perf_counter()
        r = gpf_ratio_experiment(cfg.n, cfg.beta1, cfg.beta2, est, budget, seed, verify=cfg.n <= 4)
        wall = time.perf_counter() - t
        truth = r.truth or (None, None, None)
        for name, value, tv in zip(("wi", "vi", "q"), (r.wi, r.vi, r.q), truth):
            rows.append(EstimateReport(cfg.experiment, f"{est}:{name}", cfg.n, value, tv, r.points, wall, seed, h))
    return rows


RUNNERS = {
    "heat-oracle": _sde_repeat,
    "ou-oracle": _sde_repeat,
    "langevin1d": _sde_repeat,
    "jacobi": _sde_repeat,
    "gauss-highdim": _sde_repeat,
    "resample": _resample_repeat,
    "ising": _ising_repeat,
}


def _run_one(args):
    cfg, seed, h = args
    if torch.get_num_threads() != 1 and cfg.workers > 1:
        torch.set_num_threads(1)
    try:
        return RUNNERS[cfg.experiment](cfg, seed, h), None
    except NumericError as exc:
        return [EstimateReport(cfg.experiment, "failed", cfg.dim or cfg.n, math.nan, truth_of(cfg), 0, 0.0,
                               seed, h, error=f"{type(exc).__name__}: {exc}")], str(exc)


def _fill_errors(rows: List[EstimateReport]):
    by_method: Dict[tuple, List[EstimateReport]] = {}
    for r in rows:
        by_method.setdefault((r.method, r.n_or_d), []).append(r)
    for group in by_method.values():
        vals = [r.estimate for r in group if math.isfinite(r.estimate)]
        centre = sum(vals) / len(vals) if vals else math.nan
        for r in group:
            if r.truth is not None and math.isfinite(r.estimate):
                r.abs_error = abs(r.estimate - r.truth)
            if math.isfinite(r.estimate):
                r.sq_error = (r.estimate - centre) ** 2


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: List[EstimateReport], path, wall_time: bool = True):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            d = dataclasses.asdict(r)
            if not wall_time:
                d["wall_time_s"] = None
            w.writerow([_cell(d[c]) for c in CSV_COLUMNS])


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def set_deterministic(flag: bool = True):
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def run_experiment(cfg: ExperimentConfig, out_dir=None, deterministic: bool = False) -> List[EstimateReport]:
    """Run ``cfg.repeats`` repeats with derived seeds; write results.csv and manifest.json to ``out_dir``."""
    cfg = cfg.resolved()
    if deterministic:
        set_deterministic(True)
    h = cfg.config_hash()
    seeds = derived_seeds(cfg.seed, cfg.repeats)
    jobs = [(cfg, s, h) for s in seeds]
    start = time.perf_counter()
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    rows = [r for rs, _ in results for r in rs]
    _fill_errors(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(rows, out / "results.csv")
        manifest = {
            "experiment": cfg.experiment,
            "config_hash": h,
            "config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
            "seeds": seeds,
            "deterministic": deterministic,
            "errors": [e for _, e in results if e],
            "wall_time_s": time.perf_counter() - start,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return rows


def compare_estimators(rows) -> List[dict]:
    """Per (method, n_or_d): mean absolute error, mean centred squared error, variance, points used."""
    rows = [r if isinstance(r, dict) else {k: _cell(v) for k, v in dataclasses.asdict(r).items()} for r in rows]
    groups: Dict[tuple, List[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["n_or_d"]), []).append(r)
    if len({m for m, _ in groups}) < 2:
        raise ConfigError("comparison needs rows from at least two methods")
    table = []
    for (method, nd), g in groups.items():
        est = np.array([float(r["estimate"]) for r in g])
        entry = {"method": method, "n_or_d": nd, "repeats": len(g), "mean_estimate": float(est.mean()),
                 "sq_error": float(((est - est.mean()) ** 2).mean()),
                 "variance": float(est.var(ddof=1)) if len(g) > 1 else 0.0,
                 "points_used": int(np.mean([int(r["points_used"]) for r in g]))}
        if all(r["truth"] not in ("", None) for r in g):
            entry["abs_error"] = float(np.mean([abs(e - float(r["truth"])) for e, r in zip(est, g)]))
        table.append(entry)
    return table
