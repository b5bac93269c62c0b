"""Euler-Maruyama simulation with replayable Brownian increments."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError, SimulationDiverged
from .gradengine import DTYPE, as_tensor

JACOBI_CLAMP = 1e-6


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    h: float
    M: int

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError(f"step size must be positive, got {self.h}")
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"number of steps must be a positive integer, got {self.M}")

    @classmethod
    def from_horizon(cls, T: float, h: float, t0: float = 0.0) -> "TimeGrid":
        M = int(round((T - t0) / h))
        if M < 1 or abs(t0 + M * h - T) > 1e-9 * max(1.0, abs(T)):
            raise ConfigError(f"horizon {T} is not a whole number of steps of size {h}")
        return cls(t0, h, M)

    @property
    def T(self) -> float:
        return self.t0 + self.M * self.h

    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.M + 1)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        k = int(round((t - self.t0) / self.h))
        if k < 0 or k > self.M or abs(self.t0 + k * self.h - t) > tol * max(1.0, abs(t)):
            raise ConfigError(f"time {t} is not on the grid")
        return k


@dataclass
class SDECoefficients:
    """drift(x, t) -> (N, d); diffusion(x, t) -> (N, d) if diagonal else (N, d, d).

    ``x`` is an (N, d) tensor and ``t`` a float.
    """

    drift: Callable
    diffusion: Callable
    diagonal: bool = True


@dataclass(frozen=True)
class NoiseSource:
    """Counter-based Gaussian increments.

    Path ``p`` of stream ``s`` under master seed ``seed`` always owns the same
    Philox substream, so the increment at (seed, stream, path, step) never
    depends on how many other paths were drawn.
    """

    seed: int
    stream: int = 0

    def _generator(self, path: int) -> np.random.Generator:
        bitgen = np.random.Philox(key=int(self.seed) & ((1 << 64) - 1),
                                  counter=[0, 0, int(path), int(self.stream)])
        return np.random.Generator(bitgen)

    def normals(self, n_paths: int, n_steps: int, d: int, first_path: int = 0) -> np.ndarray:
        """Standard normals of shape (n_paths, n_steps, d)."""
        out = np.empty((n_paths, n_steps, d))
        for i in range(n_paths):
            out[i] = self._generator(first_path + i).standard_normal((n_steps, d))
        return out

    def increments(self, n_paths: int, grid: TimeGrid, d: int) -> torch.Tensor:
        return torch.from_numpy(self.normals(n_paths, grid.M, d) * math.sqrt(grid.h))


@dataclass
class PathBatch:
    states: torch.Tensor  # (N, M+1, d)
    grid: TimeGrid
    drift: torch.Tensor  # (N, M+1, d)
    diffusion: torch.Tensor  # (N, M+1, d) or (N, M+1, d, d)
    diagonal: bool = True

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def terminal(self) -> torch.Tensor:
        return self.states[:, -1, :]

    def to_csv(self, path):
        if not self.diagonal:
            raise ConfigError("CSV export stores diagonal diffusion only")
        d = self.dim
        times = self.grid.times()
        st, b, s = (a.detach().cpu().numpy() for a in (self.states, self.drift, self.diffusion))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "step", "t"] + [f"x_{i}" for i in range(d)]
                       + [f"b_{i}" for i in range(d)] + [f"sigma_{i}" for i in range(d)])
            for p in range(st.shape[0]):
                for k in range(st.shape[1]):
                    w.writerow([p, k, repr(float(times[k]))]
                               + [repr(float(v)) for v in st[p, k]]
                               + [repr(float(v)) for v in b[p, k]]
                               + [repr(float(v)) for v in s[p, k]])

    @classmethod
    def from_csv(cls, path) -> "PathBatch":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(1 for c in header if c.startswith("x_"))
        if not body or header[:3] != ["path_id", "step", "t"] or len(header) != 3 + 3 * d:
            raise ConfigError(f"{path}: not a path batch CSV")
        arr = np.array(body, dtype=float)
        n = int(arr[:, 0].max()) + 1
        m1 = int(arr[:, 1].max()) + 1
        arr = arr[np.lexsort((arr[:, 1], arr[:, 0]))].reshape(n, m1, -1)
        times = arr[0, :, 2]
        h = float(times[1] - times[0]) if m1 > 1 else 1.0
        grid = TimeGrid(float(times[0]), h, m1 - 1)
        t = torch.from_numpy(arr)
        return cls(t[:, :, 3:3 + d].clone(), grid, t[:, :, 3 + d:3 + 2 * d].clone(),
                   t[:, :, 3 + 2 * d:].clone(), True)


def _apply_diffusion(sig, dW, diagonal):
    if diagonal:
        return sig * dW
    return torch.einsum("nij,nj->ni", sig, dW)


def simulate(coeffs: SDECoefficients, x0, grid: TimeGrid, noise, n_paths: int,
             record: bool = True) -> PathBatch:
    """Euler-Maruyama: X_{k+1} = X_k + b(X_k, t_k) h + sigma(X_k, t_k) dW_k.

    ``noise`` is a :class:`NoiseSource` or a precomputed (N, M, d) tensor of
    increments.  ``x0`` may be a d-vector or an (N, d) tensor and may carry
    gradients; the whole recursion stays on the autograd tape.
    """
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    x0 = as_tensor(x0)
    if x0.ndim == 1:
        x = x0[None, :].expand(n_paths, -1)
    else:
        x = x0
    d = x.shape[1]
    if isinstance(noise, NoiseSource):
        dW = noise.increments(n_paths, grid, d)
    else:
        dW = as_tensor(noise)
        if dW.shape != (n_paths, grid.M, d):
            raise ConfigError(f"increments have shape {tuple(dW.shape)}, expected {(n_paths, grid.M, d)}")
    times = grid.times()
    states, drifts, diffs = [x], [], []
    for k in range(grid.M):
        t = float(times[k])
        b = coeffs.drift(x, t)
        s = coeffs.diffusion(x, t)
        x = x + b * grid.h + _apply_diffusion(s, dW[:, k, :], coeffs.diagonal)
        if not torch.isfinite(x).all():
            raise SimulationDiverged(k + 1)
        states.append(x)
        if record:
            drifts.append(b)
            diffs.append(s)
    if record:
        t = float(times[-1])
        drifts.append(coeffs.drift(x, t))
        diffs.append(coeffs.diffusion(x, t))
        drift = torch.stack(drifts, 1)
        diff = torch.stack(diffs, 1)
    else:
        drift = diff = torch.empty(0, dtype=DTYPE)
    return PathBatch(torch.stack(states, 1), grid, drift, diff, coeffs.diagonal)


def coarsen(dW: torch.Tensor, factor: int) -> torch.Tensor:
    """Sum consecutive blocks of ``factor`` increments (same Brownian path, coarser grid)."""
    N, M, d = dW.shape
    if M % factor:
        raise ConfigError("number of steps must be divisible by the coarsening factor")
    return dW.reshape(N, M // factor, factor, d).sum(2)


@dataclass
class CollocationSet:
    """Points (x, t) with the SDE coefficients there, plus provenance."""

    x: torch.Tensor  # (P, d)
    t: torch.Tensor  # (P,)
    b: torch.Tensor  # (P, d)
    sigma: torch.Tensor  # (P, d) diagonal or (P, d, d)
    diagonal: bool
    path_id: torch.Tensor
    step: torch.Tensor

    def __len__(self):
        return self.x.shape[0]

    def subset(self, mask) -> "CollocationSet":
        return CollocationSet(self.x[mask], self.t[mask], self.b[mask], self.sigma[mask],
                              self.diagonal, self.path_id[mask], self.step[mask])


def subsample_collocation(batch: PathBatch, stride: int) -> CollocationSet:
    """Every ``stride``-th grid point of every path, always including the terminal one."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    M = batch.grid.M
    steps = sorted(set(range(0, M + 1, stride)) | {M})
    idx = torch.tensor(steps)
    N = batch.n_paths
    times = torch.from_numpy(batch.grid.times())[idx]
    x = batch.states[:, idx, :].detach().reshape(N * len(steps), -1)
    b = batch.drift[:, idx, :].detach().reshape(N * len(steps), -1)
    sig = batch.diffusion[:, idx].detach()
    sig = sig.reshape(N * len(steps), *sig.shape[2:])
    return CollocationSet(
        x=x,
        t=times.repeat(N),
        b=b,
        sigma=sig,
        diagonal=batch.diagonal,
        path_id=torch.arange(N).repeat_interleave(len(steps)),
        step=idx.repeat(N),
    )


def langevin_drift(grad_log_density: Callable) -> Callable:
    """b(x) = grad log p(x) / 2; pair with unit diffusion."""

    def drift(x, t=None):
        return 0.5 * grad_log_density(x)

    return drift


def unit_diffusion(x, t=None):
    return torch.ones_like(x)


def langevin_sde(grad_log_density: Callable) -> SDECoefficients:
    return SDECoefficients(langevin_drift(grad_log_density), unit_diffusion, True)


def gaussian_score(mean, var=1.0) -> Callable:
    mean = as_tensor(mean)

    def score(x):
        return (mean - x) / var

    return score


def ou_sde(mean=1.0) -> SDECoefficients:
    """Langevin diffusion for a unit-variance Gaussian centred at ``mean``."""
    return langevin_sde(gaussian_score(mean))


def brownian_sde() -> SDECoefficients:
    return SDECoefficients(lambda x, t: torch.zeros_like(x), unit_diffusion, True)


def gbm_sde(mu: float, sigma: float) -> SDECoefficients:
    return SDECoefficients(lambda x, t: mu * x, lambda x, t: sigma * x, True)


def gbm_exact(x0: float, mu: float, sigma: float, T: float, W_T: torch.Tensor) -> torch.Tensor:
    return x0 * torch.exp((mu - 0.5 * sigma ** 2) * T + sigma * W_T)


def jacobi_sde(scale: float, clamp: float = JACOBI_CLAMP) -> SDECoefficients:
    """dX = s^2/2 (1-2X)/sqrt(X(1-X)) dt + 2 s (X(1-X))^(1/4) dW on (0, 1).

    States are clamped to [clamp, 1 - clamp] before the coefficients are
    evaluated, which keeps the singular drift finite near the boundary.
    """

    def drift(x, t):
        y = x.clamp(clamp, 1.0 - clamp)
        return 0.5 * scale ** 2 * (1.0 - 2.0 * y) / torch.sqrt(y * (1.0 - y))

    def diffusion(x, t):
        y = x.clamp(clamp, 1.0 - clamp)
        return 2.0 * scale * (y * (1.0 - y)) ** 0.25

    return SDECoefficients(drift, diffusion, True)
