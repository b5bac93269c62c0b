"""Sample-based optimal transport losses, all differentiable in torch."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, NumericError
from .gradengine import as_tensor

LOG_DOMAIN_EPS = 1e-2


def _cloud(a) -> torch.Tensor:
    a = as_tensor(a)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ConfigError("a sample cloud needs at least one point")
    return a


def _safe_sqrt(sq: torch.Tensor) -> torch.Tensor:
    # exact zero stays zero with a zero gradient instead of NaN
    if sq.item() > 0:
        return torch.sqrt(sq)
    return sq


def _sorted_sq_gap(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # stable sort: ties keep their original order
    sa = torch.sort(a, dim=0, stable=True).values
    sb = torch.sort(b, dim=0, stable=True).values
    return ((sa - sb) ** 2).mean(0)


def w2_1d(a, b) -> torch.Tensor:
    """Exact 2-Wasserstein distance between equal-size 1-D empirical measures."""
    a, b = _cloud(a), _cloud(b)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise ConfigError("w2_1d takes one-dimensional clouds")
    if a.shape[0] != b.shape[0]:
        raise ConfigError(f"sample counts differ ({a.shape[0]} vs {b.shape[0]})")
    return _safe_sqrt(_sorted_sq_gap(a, b)[0])


def w2_marginal_sum(a, b) -> torch.Tensor:
    """Sum over coordinates of the 1-D 2-Wasserstein distances of the marginals."""
    a, b = _cloud(a), _cloud(b)
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"dimension mismatch ({a.shape[1]} vs {b.shape[1]})")
    if a.shape[0] != b.shape[0]:
        raise ConfigError(f"sample counts differ ({a.shape[0]} vs {b.shape[0]})")
    gaps = _sorted_sq_gap(a, b)
    return sum(_safe_sqrt(g) for g in gaps)


@dataclass(frozen=True)
class SinkhornConfig:
    eps: float = 0.05
    iters: int = 200
    debiased: bool = False
    log_domain: bool | None = None  # None: automatic, forced on for eps <= 1e-2

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError("entropic regularisation must be positive")
        if self.iters < 1:
            raise ConfigError("Sinkhorn needs at least one iteration")

    @property
    def use_log(self) -> bool:
        if self.log_domain is None:
            return self.eps <= LOG_DOMAIN_EPS
        return self.log_domain


def sq_cost(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def _log_potentials(C, eps, iters):
    n, m = C.shape
    log_mu = torch.full((n,), -math.log(n), dtype=C.dtype)
    log_nu = torch.full((m,), -math.log(m), dtype=C.dtype)
    f = torch.zeros(n, dtype=C.dtype)
    g = torch.zeros(m, dtype=C.dtype)
    for _ in range(iters):
        f = -eps * torch.logsumexp((g[None, :] - C) / eps + log_nu[None, :], dim=1)
        g = -eps * torch.logsumexp((f[:, None] - C) / eps + log_mu[:, None], dim=0)
    return f, g, log_mu, log_nu


def sinkhorn_dual(a, b, cfg: SinkhornConfig) -> torch.Tensor:
    """Entropic dual objective after ``cfg.iters`` iterations (nondecreasing in iters)."""
    a, b = _cloud(a), _cloud(b)
    C = sq_cost(a, b)
    f, g, log_mu, log_nu = _log_potentials(C, cfg.eps, cfg.iters)
    mass = torch.exp((f[:, None] + g[None, :] - C) / cfg.eps + log_mu[:, None] + log_nu[None, :]).sum()
    return (f * log_mu.exp()).sum() + (g * log_nu.exp()).sum() - cfg.eps * (mass - 1.0)


def sinkhorn_plan(a, b, cfg: SinkhornConfig) -> torch.Tensor:
    """Transport plan after ``cfg.iters`` unrolled Sinkhorn iterations (uniform weights)."""
    a, b = _cloud(a), _cloud(b)
    if a.shape[1] != b.shape[1]:
        raise ConfigError("dimension mismatch")
    C = sq_cost(a, b)
    if not torch.isfinite(C).all():
        raise NumericError("non-finite cost matrix")
    n, m = C.shape
    eps = cfg.eps
    if cfg.use_log:
        f, g, log_mu, log_nu = _log_potentials(C, eps, cfg.iters)
        return torch.exp((f[:, None] + g[None, :] - C) / eps + log_mu[:, None] + log_nu[None, :])
    K = torch.exp(-C / eps)
    mu = torch.full((n,), 1.0 / n, dtype=C.dtype)
    nu = torch.full((m,), 1.0 / m, dtype=C.dtype)
    v = torch.ones(m, dtype=C.dtype)
    for _ in range(cfg.iters):
        u = mu / (K @ v)
        v = nu / (K.T @ u)
        if not (torch.isfinite(u).all() and torch.isfinite(v).all()):
            raise NumericError(f"Sinkhorn scalings overflowed at eps={eps}; use log_domain=True")
    return u[:, None] * K * v[None, :]


def sinkhorn_cost(a, b, cfg: SinkhornConfig) -> torch.Tensor:
    # Finitely many iterations are not symmetric in (a, b); average both orders.
    a, b = _cloud(a), _cloud(b)
    C = sq_cost(a, b)
    forward_ = (sinkhorn_plan(a, b, cfg) * C).sum()
    backward_ = (sinkhorn_plan(b, a, cfg) * C.T).sum()
    return 0.5 * (forward_ + backward_)


def sinkhorn_divergence(a, b, cfg: SinkhornConfig = SinkhornConfig()) -> torch.Tensor:
    """Entropic OT transport cost <P, C> with squared Euclidean cost.

    The plan comes from ``cfg.iters`` unrolled iterations, so gradients flow
    through the iterations into both clouds.
    With ``cfg.debiased`` the self terms are subtracted,
    S(a, b) - (S(a, a) + S(b, b)) / 2, which vanishes for a == b.
    """
    ab = sinkhorn_cost(a, b, cfg)
    if not cfg.debiased:
        return ab
    return ab - 0.5 * (sinkhorn_cost(a, a, cfg) + sinkhorn_cost(b, b, cfg))


LOSSES = {
    "w2_marginal_sum": lambda a, b, cfg=None: w2_marginal_sum(a, b),
    "sinkhorn": lambda a, b, cfg=None: sinkhorn_divergence(a, b, cfg or SinkhornConfig()),
}


def distance(name: str, a, b, cfg: SinkhornConfig | None = None) -> torch.Tensor:
    try:
        fn = LOSSES[name]
    except KeyError:
        raise ConfigError(f"unknown distribution loss {name!r}; choose from {sorted(LOSSES)}") from None
    return fn(a, b, cfg)
