"""Physics-informed solver for the backward Kolmogorov equation on SDE paths.

A network u(x, t) is trained so that

    du/dt + grad u . b + 1/2 sum_ij (sigma sigma^T)_ij d_ij u = 0

at points visited by simulated paths and u(x, T) = f(x) at their terminal
states; u(x0, t0) is then the estimate of E[f(X_T) | X_t0 = x0].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import torch

from .bridge import FitReport
from .errors import ConfigError, NumericError
from .gradengine import DTYPE, Adam, Jet, MLPSpec, as_tensor, forward, init_params, jet, loss_gradient
from .sdesim import CollocationSet, PathBatch, subsample_collocation


def default_width(d: int) -> int:
    return 108 if d <= 10 else 526


@dataclass
class SolutionNet:
    spec: MLPSpec
    params: torch.Tensor

    def __post_init__(self):
        if self.spec.output_dim != 1:
            raise ConfigError("a solution network has a single output")
        self.params = self.params.detach().clone().to(DTYPE).requires_grad_(True)

    @classmethod
    def create(cls, dim: int, width: Optional[int] = None, depth: int = 2, seed: int = 0) -> "SolutionNet":
        width = default_width(dim) if width is None else width
        spec = MLPSpec(dim + 1, (width,) * depth, 1)
        return cls(spec, init_params(spec, seed=seed))

    @property
    def dim(self) -> int:
        return self.spec.input_dim - 1

    def __call__(self, x, t) -> torch.Tensor:
        x = as_tensor(x)
        if x.ndim == 1:
            x = x[None, :]
        t = as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        return forward(self.spec, self.params, torch.cat([x, t[:, None]], 1))[:, 0]

    def jet(self, x, t, mode: str = "diagonal") -> Jet:
        return jet(self.spec, self.params, x, t, mode)


@dataclass
class BoundarySet:
    x: torch.Tensor  # (P, d) terminal states
    f: torch.Tensor  # (P,) target values, never differentiated
    T: float

    def __post_init__(self):
        self.x = as_tensor(self.x).detach()
        self.f = as_tensor(self.f).detach().reshape(-1)
        if self.x.ndim != 2 or self.x.shape[0] == 0 or self.x.shape[0] != self.f.shape[0]:
            raise ConfigError("boundary set needs matching nonempty x (P, d) and f (P,)")
        if not torch.isfinite(self.f).all():
            raise ConfigError("boundary values must be finite")


@dataclass(frozen=True)
class LossWeights:
    residual: float = 1.0
    boundary: float = 1.0

    def __post_init__(self):
        if not (self.residual > 0 and self.boundary > 0):
            raise ConfigError("loss weights must be positive")


@dataclass
class SolveConfig:
    epochs: int = 400
    lr: float = 1e-3
    threshold: float = 0.0
    seed: int = 0


def residual_from_jet(j: Jet, b, sigma, diagonal: bool = True) -> torch.Tensor:
    """Generator residual built from a jet and the SDE coefficients at the same points.

    Diagonal: dt + grad.b + 1/2 sum_i sigma_i^2 H_ii.
    Full: dt + grad.b + 1/2 sum_ij (sigma sigma^T)_ij H_ij.
    """
    b, sigma = as_tensor(b), as_tensor(sigma)
    first = j.dt + (j.grad_x * b).sum(-1)
    if diagonal:
        hdiag = torch.diagonal(j.hess, dim1=-2, dim2=-1) if j.mode == "full" else j.hess
        if sigma.shape != j.grad_x.shape:
            raise ConfigError(f"diagonal diffusion must match x, got {tuple(sigma.shape)}")
        return first + 0.5 * (sigma * sigma * hdiag).sum(-1)
    if j.mode != "full":
        raise ConfigError("a full diffusion matrix needs the full Hessian")
    if sigma.shape != j.hess.shape:
        raise ConfigError(f"diffusion matrix has shape {tuple(sigma.shape)}, Hessian {tuple(j.hess.shape)}")
    a = sigma @ sigma.transpose(-1, -2)
    return first + 0.5 * (a * j.hess).sum((-1, -2))


def pde_residual(u: SolutionNet, colloc: CollocationSet, mode: Optional[str] = None) -> torch.Tensor:
    """Residual at every collocation point; ``mode`` defaults to the diffusion layout."""
    mode = mode or ("diagonal" if colloc.diagonal else "full")
    if mode == "diagonal" and not colloc.diagonal:
        raise ConfigError("diagonal mode cannot use a full diffusion matrix")
    if mode == "full" and colloc.diagonal:
        raise ConfigError("full mode needs a full diffusion matrix; use diagonal mode or diag_embed sigma")
    return residual_from_jet(u.jet(colloc.x, colloc.t, mode), colloc.b, colloc.sigma, colloc.diagonal)


def boundary_loss(u: SolutionNet, boundary: BoundarySet) -> torch.Tensor:
    return ((u(boundary.x, boundary.T) - boundary.f) ** 2).mean()


def split_paths(batch: PathBatch, stride: int, f: Callable) -> tuple[CollocationSet, BoundarySet]:
    """Interior collocation points (t < T) every ``stride`` steps, plus the terminal boundary set."""
    colloc = subsample_collocation(batch, stride)
    interior = colloc.subset(colloc.step < batch.grid.M)
    xT = batch.terminal().detach()
    with torch.no_grad():
        fT = as_tensor(f(xT)).reshape(-1)
    return interior, BoundarySet(xT, fT, batch.grid.T)


def solve(u: SolutionNet, colloc: CollocationSet, boundary: BoundarySet, weights: LossWeights = LossWeights(),
          cfg: SolveConfig = SolveConfig(), mode: Optional[str] = None):
    """Adam on w1 * mean(residual^2) + w2 * boundary loss, stopping once below ``cfg.threshold``."""
    if colloc.x.shape[1] != u.dim or boundary.x.shape[1] != u.dim:
        raise ConfigError("collocation, boundary and network dimensions differ")

    def loss_fn():
        r = pde_residual(u, colloc, mode) if len(colloc) else torch.zeros(1, dtype=DTYPE)
        return weights.residual * (r * r).mean() + weights.boundary * boundary_loss(u, boundary)

    opt = Adam([u.params], lr=cfg.lr)
    trace: List[float] = []
    stop = "budget exhausted"
    value = math.nan
    for _ in range(cfg.epochs):
        loss = loss_fn()
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite PDE loss after {len(trace)} epochs", value=trace)
        if value < cfg.threshold:
            stop = "threshold reached"
            break
        trace.append(value)
        opt.step(loss_gradient(loss, [u.params]))
    else:
        value = loss_fn().item()
        if value < cfg.threshold:
            stop = "threshold reached"
    return u, FitReport(value, trace, len(trace), stop, cfg.seed)


def estimate_expectation(u: SolutionNet, x0, t0: float = 0.0) -> float:
    with torch.no_grad():
        return u(as_tensor(x0).reshape(1, -1), t0).item()
