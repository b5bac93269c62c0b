"""Ising lattices, heat-bath Gibbs chains, classical estimators and the
partition-function ratio experiment."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError
from .gradengine import DTYPE, as_tensor

MAX_ENUM_SIDE = 4
ESTIMATORS = ("exact", "lln", "etmc", "fkee-direct", "fkee-spin")


@dataclass(frozen=True)
class LatticeSpec:
    """n x n grid, 4-neighbour edges, open boundary; sites are row-major."""

    n: int
    periodic: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("lattice side must be >= 1")

    @property
    def sites(self) -> int:
        return self.n * self.n

    @property
    def edges(self) -> np.ndarray:
        return _edges(self.n, self.periodic)

    @property
    def neighbours(self):
        return _neighbours(self.n, self.periodic)


@lru_cache(maxsize=None)
def _edges(n: int, periodic: bool) -> np.ndarray:
    out = set()
    for r in range(n):
        for c in range(n):
            i = r * n + c
            for rr, cc in ((r, c + 1), (r + 1, c)):
                if periodic:
                    rr, cc = rr % n, cc % n
                if rr < n and cc < n:
                    j = rr * n + cc
                    if i != j:
                        out.add((min(i, j), max(i, j)))
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)


@lru_cache(maxsize=None)
def _neighbours(n: int, periodic: bool):
    nb = [[] for _ in range(n * n)]
    for i, j in _edges(n, periodic):
        nb[i].append(j)
        nb[j].append(i)
    return tuple(np.array(v, dtype=np.int64) for v in nb)


def hamiltonian(lat: LatticeSpec, s) -> np.ndarray:
    """Minus the number of agreeing neighbour pairs; batched over leading axes."""
    s = np.asarray(s)
    if s.shape[-1] != lat.sites:
        raise ConfigError(f"state has {s.shape[-1]} spins, lattice has {lat.sites}")
    e = lat.edges
    if len(e) == 0:
        return np.zeros(s.shape[:-1], dtype=np.int64)
    return -(s[..., e[:, 0]] == s[..., e[:, 1]]).sum(-1)


def _hamiltonian_torch(lat: LatticeSpec, s: torch.Tensor) -> torch.Tensor:
    e = torch.from_numpy(lat.edges)
    if len(e) == 0:
        return torch.zeros(s.shape[:-1], dtype=DTYPE)
    return -(s[..., e[:, 0]] == s[..., e[:, 1]]).sum(-1).to(DTYPE)


@dataclass
class GibbsChain:
    lattice: LatticeSpec
    beta: float
    states: np.ndarray  # (chains, sweeps + 1, n^2) int8, entries +-1
    seed: int

    @property
    def sweeps(self) -> int:
        return self.states.shape[1] - 1

    def energies(self) -> np.ndarray:
        return hamiltonian(self.lattice, self.states)

    def to_csv(self, path, observables: Optional[Dict[str, Callable]] = None):
        """One row per (chain, sweep): H plus each observable of H."""
        observables = observables or {}
        H = self.energies()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "sweep", "H"] + list(observables))
            for c in range(H.shape[0]):
                for k in range(H.shape[1]):
                    w.writerow([c, k, int(H[c, k])] + [repr(float(fn(H[c, k]))) for fn in observables.values()])


def run_chain(lat: LatticeSpec, beta: float, sweeps: int, seed: int, n_chains: int = 1,
              init: Optional[np.ndarray] = None) -> GibbsChain:
    """Systematic-scan heat-bath sweeps; each site is redrawn from its conditional law.

    With m the sum of neighbouring spins, P(s_i = +1 | rest) = 1 / (1 + exp(-beta m)).
    """
    if sweeps < 1:
        raise ConfigError("need at least one sweep")
    rng = np.random.default_rng(seed)
    if init is None:
        s = rng.choice(np.array([-1, 1], dtype=np.int8), size=(n_chains, lat.sites))
    else:
        s = np.broadcast_to(np.asarray(init, dtype=np.int8), (n_chains, lat.sites)).copy()
    out = np.empty((n_chains, sweeps + 1, lat.sites), dtype=np.int8)
    out[:, 0] = s
    nbrs = lat.neighbours
    for k in range(sweeps):
        u = rng.random((n_chains, lat.sites))
        for i, nb in enumerate(nbrs):
            m = s[:, nb].sum(1, dtype=np.int64)
            p_up = 1.0 / (1.0 + np.exp(-beta * m))
            s[:, i] = np.where(u[:, i] < p_up, 1, -1)
        out[:, k + 1] = s
    return GibbsChain(lat, beta, out, seed)


def lln_estimate(f: Callable, terminal_samples) -> float:
    """Plain average of f over independent terminal samples."""
    xs = list(terminal_samples)
    if not xs:
        raise ConfigError("no samples")
    return float(np.mean([f(x) for x in xs]))


def etmc_estimate(f: Callable, path, burn_in: int, normalization: str = "literal") -> float:
    """Time average of f along one chain X_0..X_N after discarding a burn-in.

    ``literal`` sums t = M..N (N - M + 1 terms) and divides by N - M;
    ``mean`` divides by the number of terms instead.
    """
    xs = list(path)
    N = len(xs) - 1
    if burn_in < 0 or burn_in >= N:
        raise ConfigError(f"burn-in {burn_in} must lie in [0, {N}) for a path of length {N + 1}")
    total = math.fsum(float(f(x)) for x in xs[burn_in:])
    if normalization == "literal":
        return total / (N - burn_in)
    if normalization == "mean":
        return total / (N - burn_in + 1)
    raise ConfigError(f"unknown normalization {normalization!r}")


def _check_enum(lat: LatticeSpec):
    if lat.n > MAX_ENUM_SIDE:
        raise ConfigError(f"exact enumeration refuses n = {lat.n} > {MAX_ENUM_SIDE}")


@lru_cache(maxsize=None)
def _energy_table(n: int, periodic: bool) -> np.ndarray:
    lat = LatticeSpec(n, periodic)
    k = lat.sites
    codes = np.arange(2 ** k, dtype=np.int64)
    spins = np.where((codes[:, None] >> np.arange(k)) & 1, 1, -1).astype(np.int8)
    return hamiltonian(lat, spins)


def energy_levels(lat: LatticeSpec) -> np.ndarray:
    """H of every state, indexed by the bit pattern of the up spins."""
    _check_enum(lat)
    return _energy_table(lat.n, lat.periodic)


def exact_partition(lat: LatticeSpec, beta: float) -> float:
    H = energy_levels(lat).astype(float)
    return math.fsum(np.exp(-beta * H))


def exact_expectation(lat: LatticeSpec, beta: float, f: Callable[[np.ndarray], np.ndarray]) -> float:
    H = energy_levels(lat).astype(float)
    w = np.exp(-beta * H)
    return math.fsum(w * f(H)) / math.fsum(w)


def observables(beta1: float, beta2: float):
    """(F, G) as functions of the energy: exp(-(b2-b1)/2 H) and exp((b2-b1)/2 H)."""
    c = 0.5 * (beta2 - beta1)
    return (lambda H: np.exp(-c * np.asarray(H, dtype=float)),
            lambda H: np.exp(c * np.asarray(H, dtype=float)))


def round_half_up(p: torch.Tensor) -> torch.Tensor:
    # torch.round sends 0.5 to 0 (half to even); ties go to 1 here
    return torch.floor(p + 0.5)


def spin_boundary_f(beta1: float, beta2: float, lat: LatticeSpec, observable: str = "F") -> Callable:
    """x -> exp(-+(b2-b1)/2 H(s)) with s = 2 round(sigmoid(x)) - 1; x is (P, n^2)."""
    if observable not in ("F", "G"):
        raise ConfigError("observable must be 'F' or 'G'")
    c = 0.5 * (beta2 - beta1) * (1.0 if observable == "F" else -1.0)

    def f(x):
        x = as_tensor(x)
        s = 2.0 * round_half_up(torch.sigmoid(x)) - 1.0
        return torch.exp(-c * _hamiltonian_torch(lat, s))

    return f


@dataclass
class GPFResult:
    wi: float
    vi: float
    q: float
    points: int
    truth: Optional[tuple] = None
    extra: dict = field(default_factory=dict)


@dataclass
class IsingBudget:
    """Per-expectation budget: ``chains`` x ``moments`` chain points."""

    chains: int = 100
    moments: int = 20
    burn_in_frac: float = 0.1
    etmc_normalization: str = "literal"
    bridge_epochs: int = 300
    bridge_lr: float = 1e-2
    bridge_hidden: tuple = (32, 32)
    fcm_epochs: int = 400
    fcm_lr: float = 1e-3
    fcm_width: Optional[int] = None
    fcm_paths: int = 100
    horizon: float = 1.0

    @property
    def points(self) -> int:
        return self.chains * self.moments


def exact_ratio(lat: LatticeSpec, beta1: float, beta2: float) -> tuple:
    F, G = observables(beta1, beta2)
    wi = exact_expectation(lat, beta1, F)
    vi = exact_expectation(lat, beta2, G)
    return wi, vi, vi / wi


def _fkee_direct(lat, beta, obs, budget: IsingBudget, seed):
    from .bridge import BridgeModel, ChainMarginals, FitConfig, fit
    from .fkpde import SolutionNet, SolveConfig, estimate_expectation, solve, split_paths
    from .sdesim import NoiseSource, TimeGrid

    chain = run_chain(lat, beta, budget.moments, seed, n_chains=budget.chains)
    H = torch.from_numpy(chain.energies().astype(float))  # (chains, moments + 1)
    grid = TimeGrid.from_horizon(budget.horizon, budget.horizon / budget.moments)
    targets = ChainMarginals(list(grid.times()[1:]), [H[:, k:k + 1] for k in range(1, budget.moments + 1)])
    model = BridgeModel.create(1, grid, hidden=budget.bridge_hidden, seed=seed, x0=H[:, 0].mean().reshape(1))
    model, rep = fit(model, "chain", targets, FitConfig(epochs=budget.bridge_epochs, lr=budget.bridge_lr, seed=seed))
    with torch.no_grad():
        paths = model.simulate(NoiseSource(seed, 2), budget.fcm_paths)
    f = lambda x: torch.from_numpy(obs(x[:, 0].numpy()))
    colloc, boundary = split_paths(paths, 1, f)
    u = SolutionNet.create(1, width=budget.fcm_width, seed=seed)
    u, frep = solve(u, colloc, boundary, cfg=SolveConfig(epochs=budget.fcm_epochs, lr=budget.fcm_lr, seed=seed))
    est = estimate_expectation(u, model.x0.detach(), 0.0)
    return est, {"bridge_loss": rep.final_loss, "fcm_loss": frep.final_loss}


def _fkee_spin(lat, beta, which, beta1, beta2, budget: IsingBudget, seed):
    from .bridge import BridgeModel, FitConfig, fit
    from .fkpde import SolutionNet, SolveConfig, estimate_expectation, solve, split_paths
    from .sdesim import NoiseSource, TimeGrid

    burn = max(1, int(budget.burn_in_frac * budget.moments))
    chain = run_chain(lat, beta, budget.moments, seed, n_chains=budget.chains)
    data = torch.from_numpy((chain.states[:, burn:].reshape(-1, lat.sites) > 0).astype(float))
    grid = TimeGrid.from_horizon(budget.horizon, budget.horizon / budget.moments)
    model = BridgeModel.create(lat.sites, grid, hidden=budget.bridge_hidden, seed=seed)
    cfg = FitConfig(epochs=budget.bridge_epochs, lr=budget.bridge_lr, seed=seed, readout=torch.sigmoid)
    model, rep = fit(model, "terminal", data, cfg)
    with torch.no_grad():
        paths = model.simulate(NoiseSource(seed, 2), budget.fcm_paths)
    colloc, boundary = split_paths(paths, 1, spin_boundary_f(beta1, beta2, lat, which))
    u = SolutionNet.create(lat.sites, width=budget.fcm_width, seed=seed)
    u, frep = solve(u, colloc, boundary, cfg=SolveConfig(epochs=budget.fcm_epochs, lr=budget.fcm_lr, seed=seed))
    est = estimate_expectation(u, model.x0.detach(), 0.0)
    return est, {"bridge_loss": rep.final_loss, "fcm_loss": frep.final_loss}


def gpf_ratio_experiment(n: int, beta1: float = -0.02, beta2: float = 0.0, estimator: str = "exact",
                         budget: IsingBudget = IsingBudget(), seed: int = 0, verify: bool = True,
                         periodic: bool = False) -> GPFResult:
    """Estimate wi = E F under beta1, vi = E G under beta2 and q = vi / wi."""
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    lat = LatticeSpec(n, periodic)
    truth = None
    if verify or estimator == "exact":
        if n > MAX_ENUM_SIDE:
            if estimator == "exact":
                raise ConfigError(f"exact enumeration refuses n = {n} > {MAX_ENUM_SIDE}")
            warnings.warn(f"n = {n}: exact verification skipped", RuntimeWarning, stacklevel=2)
        else:
            truth = exact_ratio(lat, beta1, beta2)
    F, G = observables(beta1, beta2)
    extra: dict = {}
    if estimator == "exact":
        wi, vi, _ = truth
        points = 0
    elif estimator == "lln":
        ests = []
        for k, (beta, obs) in enumerate(((beta1, F), (beta2, G))):
            ch = run_chain(lat, beta, budget.moments, seed + k, n_chains=budget.chains)
            ests.append(lln_estimate(obs, hamiltonian(lat, ch.states[:, -1])))
        wi, vi = ests
        points = budget.points
    elif estimator == "etmc":
        ests = []
        for k, (beta, obs) in enumerate(((beta1, F), (beta2, G))):
            ch = run_chain(lat, beta, budget.points - 1, seed + k)
            ests.append(etmc_estimate(obs, ch.energies()[0], int(budget.burn_in_frac * budget.points),
                                      budget.etmc_normalization))
        wi, vi = ests
        points = budget.points
    elif estimator == "fkee-direct":
        wi, extra["wi"] = _fkee_direct(lat, beta1, F, budget, seed)
        vi, extra["vi"] = _fkee_direct(lat, beta2, G, budget, seed + 1)
        points = budget.points
    else:
        wi, extra["wi"] = _fkee_spin(lat, beta1, "F", beta1, beta2, budget, seed)
        vi, extra["vi"] = _fkee_spin(lat, beta2, "G", beta1, beta2, budget, seed + 1)
        points = budget.points
    return GPFResult(wi, vi, vi / wi, points, truth, extra)
