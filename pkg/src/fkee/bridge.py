"""Neural-SDE diffusion bridge: fit (x0, drift, diffusion) so simulated
marginals match data, then resample from it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import torch
import torch.nn.functional as F
from scipy.optimize import brentq

from .errors import ConfigError, NumericError
from .gradengine import DTYPE, Adam, MLPSpec, as_tensor, forward, init_params, loss_gradient
from .otmetrics import SinkhornConfig, distance
from .sdesim import NoiseSource, PathBatch, SDECoefficients, TimeGrid, simulate

DIFFUSION_FLOOR = 1e-4
TRAIN_STREAM = 0
RESAMPLE_STREAM = 1
PARAM_GROUPS = ("drift", "diffusion", "x0")


def _inv_softplus(y: float) -> float:
    if y <= 0:
        return -50.0
    return y + math.log(-math.expm1(-y))


@dataclass
class BridgeModel:
    drift_spec: MLPSpec
    drift_params: torch.Tensor
    diffusion_spec: MLPSpec
    diffusion_params: torch.Tensor
    x0: torch.Tensor
    grid: TimeGrid
    floor: float = DIFFUSION_FLOOR

    def __post_init__(self):
        d = self.x0.numel()
        for spec in (self.drift_spec, self.diffusion_spec):
            if spec.input_dim != d + 1 or spec.output_dim != d:
                raise ConfigError(f"bridge networks must map R^{d + 1} -> R^{d}")
        for name in ("drift_params", "diffusion_params", "x0"):
            t = getattr(self, name).detach().clone().to(DTYPE).requires_grad_(True)
            setattr(self, name, t)

    @classmethod
    def create(cls, dim: int, grid: TimeGrid, hidden: Sequence[int] = (64, 64), seed: int = 0,
               x0=None, floor: float = DIFFUSION_FLOOR) -> "BridgeModel":
        g = torch.Generator().manual_seed(int(seed))
        spec = MLPSpec(dim + 1, tuple(hidden), dim)
        x0 = torch.zeros(dim, dtype=DTYPE) if x0 is None else as_tensor(x0).reshape(dim)
        return cls(spec, init_params(spec, g), spec, init_params(spec, g), x0, grid, floor)

    @classmethod
    def constant(cls, dim: int, grid: TimeGrid, x0, drift: float = 0.0, diffusion: float | None = None,
                 hidden: Sequence[int] = (4,), floor: float = DIFFUSION_FLOOR) -> "BridgeModel":
        """Zero-weight networks whose outputs are the constants given (diffusion defaults to the floor)."""
        spec = MLPSpec(dim + 1, tuple(hidden), dim)
        pd = torch.zeros(spec.n_params, dtype=DTYPE)
        ps = torch.zeros(spec.n_params, dtype=DTYPE)
        pd[-dim:] = drift
        ps[-dim:] = _inv_softplus((diffusion if diffusion is not None else floor) - floor)
        return cls(spec, pd, spec, ps, as_tensor(x0).reshape(dim), grid, floor)

    @property
    def dim(self) -> int:
        return self.x0.numel()

    def parameters(self, groups: Sequence[str] = PARAM_GROUPS) -> List[torch.Tensor]:
        table = {"drift": self.drift_params, "diffusion": self.diffusion_params, "x0": self.x0}
        unknown = set(groups) - set(table)
        if unknown or not groups:
            raise ConfigError(f"parameter groups must be a nonempty subset of {PARAM_GROUPS}, got {tuple(groups)}")
        return [table[g] for g in PARAM_GROUPS if g in groups]

    def _input(self, x, t):
        x = as_tensor(x)
        if x.ndim == 1:
            x = x[:, None]
        tt = torch.full((x.shape[0], 1), float(t), dtype=DTYPE) if not torch.is_tensor(t) or t.ndim == 0 \
            else as_tensor(t).reshape(-1, 1)
        return torch.cat([x, tt], dim=1)

    def drift(self, x, t):
        return forward(self.drift_spec, self.drift_params, self._input(x, t))

    def diffusion(self, x, t):
        return F.softplus(forward(self.diffusion_spec, self.diffusion_params, self._input(x, t))) + self.floor

    def coefficients(self) -> SDECoefficients:
        return SDECoefficients(self.drift, self.diffusion, True)

    def simulate(self, noise, n_paths: int, record: bool = True) -> PathBatch:
        return simulate(self.coefficients(), self.x0, self.grid, noise, n_paths, record=record)

    def copy(self) -> "BridgeModel":
        return BridgeModel(self.drift_spec, self.drift_params, self.diffusion_spec,
                           self.diffusion_params, self.x0, self.grid, self.floor)


@dataclass
class ChainMarginals:
    times: List[float]
    clouds: List[torch.Tensor]

    def __post_init__(self):
        if len(self.times) != len(self.clouds) or not self.times:
            raise ConfigError("need one cloud per target time")
        self.clouds = [as_tensor(c).reshape(c.shape[0], -1) for c in self.clouds]
        shapes = {tuple(c.shape) for c in self.clouds}
        if len(shapes) != 1:
            raise ConfigError(f"all target clouds must share (n, d); got {shapes}")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ConfigError("target times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.clouds[0].shape[0]


@dataclass
class GaussianKernel:
    """Gaussian one-step transition density p(y | x, h) = N(y; mean(x, t), cov(x, t)).

    ``cov`` returns (n, d) for diagonal covariances or (n, d, d) for full ones.
    """

    mean: Callable
    cov: Callable


def langevin_kernel(grad_log_density: Callable, h: float) -> GaussianKernel:
    """One unadjusted Langevin step with drift grad log p / 2 and unit diffusion."""
    return GaussianKernel(
        mean=lambda x, t: x + 0.5 * h * grad_log_density(x),
        cov=lambda x, t: torch.full_like(x, h),
    )


@dataclass
class FitConfig:
    epochs: int = 300
    lr: float = 1e-3
    threshold: float = 0.0
    seed: int = 0
    loss: str = "w2_marginal_sum"
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    trainable: tuple = PARAM_GROUPS
    readout: Optional[Callable] = None  # applied to simulated states before the loss


@dataclass
class FitReport:
    final_loss: float
    trace: List[float]
    epochs_run: int
    stop_reason: str
    seed: int


def _training_noise(model: BridgeModel, n: int, seed: int):
    return NoiseSource(seed, TRAIN_STREAM).increments(n, model.grid, model.dim)


def _read(states, readout):
    return states if readout is None else readout(states)


def terminal_loss(model: BridgeModel, data, noise, loss: str = "w2_marginal_sum",
                  sinkhorn: SinkhornConfig | None = None, readout: Optional[Callable] = None) -> torch.Tensor:
    data = as_tensor(data).reshape(len(data), -1)
    if data.shape[1] != model.dim:
        raise ConfigError(f"data has dimension {data.shape[1]}, bridge has {model.dim}")
    batch = model.simulate(noise, data.shape[0], record=False)
    return distance(loss, _read(batch.terminal(), readout), data, sinkhorn)


def chain_loss(model: BridgeModel, targets: ChainMarginals, noise, loss: str = "w2_marginal_sum",
               sinkhorn: SinkhornConfig | None = None, readout: Optional[Callable] = None) -> torch.Tensor:
    idx = [model.grid.index_of(t) for t in targets.times]
    batch = model.simulate(noise, targets.n, record=False)
    return sum(distance(loss, _read(batch.states[:, k, :], readout), c, sinkhorn)
               for k, c in zip(idx, targets.clouds))


def _as_full(cov: torch.Tensor, d: int) -> torch.Tensor:
    if cov.ndim == 2:
        return torch.diag_embed(cov)
    if cov.ndim == 3 and cov.shape[-2:] == (d, d):
        return cov
    raise ConfigError(f"covariance has shape {tuple(cov.shape)}")


def gaussian_overlap(m1, S1, m2, S2) -> torch.Tensor:
    """Integral of N(y; m1, S1) N(y; m2, S2) dy = N(m1; m2, S1 + S2), batched."""
    S = S1 + S2
    d = m1.shape[-1]
    L = torch.linalg.cholesky(S)
    diff = (m1 - m2)[..., None]
    z = torch.linalg.solve_triangular(L, diff, upper=False)[..., 0]
    logdet = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    return torch.exp(-0.5 * (z * z).sum(-1) - 0.5 * logdet - 0.5 * d * math.log(2 * math.pi))


def gaussian_l2_sq(m1, S1, m2, S2) -> torch.Tensor:
    """Squared L2 distance between two Gaussian densities, closed form."""
    return gaussian_overlap(m1, S1, m1, S1) + gaussian_overlap(m2, S2, m2, S2) - 2 * gaussian_overlap(m1, S1, m2, S2)


def transition_density_loss(model: BridgeModel, target_kernel, anchors, x0, anchor_times=None) -> torch.Tensor:
    """Anchor-averaged L2 gap between the bridge's Euler step density and a
    Gaussian target kernel, plus the squared initial-point error."""
    if not isinstance(target_kernel, GaussianKernel):
        raise ConfigError("transition matching needs a Gaussian target kernel")
    x = as_tensor(anchors).reshape(len(anchors), -1)
    d = model.dim
    if x.shape[1] != d:
        raise ConfigError("anchor dimension does not match the bridge")
    h = model.grid.h
    t = torch.zeros(x.shape[0], dtype=DTYPE) if anchor_times is None else as_tensor(anchor_times).reshape(-1)
    m_model = x + model.drift(x, t) * h
    S_model = torch.diag_embed(h * model.diffusion(x, t) ** 2)
    m_tgt = target_kernel.mean(x, t)
    S_tgt = _as_full(target_kernel.cov(x, t), d)
    gap = gaussian_l2_sq(m_model, S_model, m_tgt, S_tgt).mean()
    return gap + ((as_tensor(x0).reshape(d) - model.x0) ** 2).sum()


def fit(model: BridgeModel, objective: str, data, cfg: FitConfig = FitConfig(), x0_target=None,
        anchor_times=None):
    """Adam on the chosen objective with early stopping once the loss drops below ``cfg.threshold``.

    ``data`` is a cloud (terminal), a :class:`ChainMarginals` (chain) or a
    ``(kernel, anchors)`` pair (transition, with ``x0_target``).
    """
    if objective == "terminal":
        noise = _training_noise(model, len(data), cfg.seed)

        def loss_fn():
            return terminal_loss(model, data, noise, cfg.loss, cfg.sinkhorn, cfg.readout)
    elif objective == "chain":
        if not isinstance(data, ChainMarginals):
            raise ConfigError("chain matching needs ChainMarginals")
        noise = _training_noise(model, data.n, cfg.seed)

        def loss_fn():
            return chain_loss(model, data, noise, cfg.loss, cfg.sinkhorn, cfg.readout)
    elif objective == "transition":
        kernel, anchors = data
        if x0_target is None:
            raise ConfigError("transition matching needs the target initial point")

        def loss_fn():
            return transition_density_loss(model, kernel, anchors, x0_target, anchor_times)
    else:
        raise ConfigError(f"unknown objective {objective!r}")

    params = model.parameters(cfg.trainable)
    opt = Adam(params, lr=cfg.lr)
    trace: List[float] = []
    stop = "budget exhausted"
    for _ in range(cfg.epochs):
        loss = loss_fn()
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite bridge loss after {len(trace)} epochs; trace tail {trace[-5:]}",
                               value=trace)
        if value < cfg.threshold:
            stop = "threshold reached"
            break
        trace.append(value)
        opt.step(loss_gradient(loss, params))
    else:
        with torch.no_grad():
            value = loss_fn().item()
        if value < cfg.threshold:
            stop = "threshold reached"
    final = value
    return model, FitReport(final, trace, len(trace), stop, cfg.seed)


def resample(model: BridgeModel, n: int, seed: int) -> torch.Tensor:
    """Terminal states of ``n`` fresh simulations (a noise stream disjoint from training)."""
    with torch.no_grad():
        return model.simulate(NoiseSource(seed, RESAMPLE_STREAM), n, record=False).terminal().detach()


@dataclass
class BudgetAdvice:
    feasible: bool
    h: float
    T: float
    steps: int


def _error_bound(C, L, h, T):
    return C * math.sqrt(h) * math.exp(4.0 * L * L * T)


def budget_advisor(L: float, C: float, eps: float, M0: int, horizon: float | None = None) -> BudgetAdvice:
    """Largest step h (and horizon T) with [T/h] <= M0 and C sqrt(h) exp(4 L^2 T) <= eps.

    Without ``horizon`` the horizon is free and T is pushed as far as both
    constraints allow; with it, T is fixed and only h is chosen.
    """
    if min(C, eps, M0) <= 0 or L < 0:
        raise ConfigError("budget advisor needs positive C, eps, M0 and L >= 0")
    if horizon is not None:
        h = min((eps / (C * math.exp(4.0 * L * L * horizon))) ** 2, horizon)
        ok = horizon / h <= M0 * (1 + 1e-12)
        return BudgetAdvice(ok, h, horizon, int(math.floor(horizon / h + 1e-9)))
    # one step is the cheapest horizon, so the largest admissible h solves
    # C sqrt(h) exp(4 L^2 h) = eps
    if L == 0:
        h = (eps / C) ** 2
    else:
        g = lambda hh: math.log(C) + 0.5 * math.log(hh) + 4.0 * L * L * hh - math.log(eps)
        hi = 1.0
        while g(hi) < 0:
            hi *= 2.0
        h = brentq(g, 1e-300, hi, xtol=1e-300, rtol=1e-15)
    steps = int(M0)
    if L > 0:
        t_err = math.log(eps / (C * math.sqrt(h))) / (4.0 * L * L)
        steps = max(1, min(int(M0), int(math.floor(t_err / h + 1e-9))))
    return BudgetAdvice(True, h, steps * h, steps)
