"""Tiny tanh-MLP substrate with analytic input jets.

Networks are stored as a flat parameter tensor plus an :class:`MLPSpec` that
knows how to slice it into layers.  :func:`jet` pushes (value, input Jacobian,
input Hessian) through the layers in closed form, so every derivative stays on
the autograd tape and parameter gradients of PDE residuals come from a single
``torch.autograd.grad`` call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch

from .errors import ConfigError, NumericError

DTYPE = torch.float64


def as_tensor(x, dtype=DTYPE):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_layers: Tuple[int, ...]
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("input_dim and output_dim must be positive")
        if not self.hidden_layers:
            raise ConfigError("an MLP needs at least one hidden layer")
        if any(w < 1 for w in self.hidden_layers):
            raise ConfigError(f"hidden widths must be >= 1, got {self.hidden_layers}")
        if self.activation != "tanh":
            raise ConfigError("only the tanh activation is supported")

    @property
    def widths(self) -> List[int]:
        return [self.input_dim, *self.hidden_layers, self.output_dim]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def unflatten(self, params: torch.Tensor) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        if params.ndim != 1 or params.numel() != self.n_params:
            raise ConfigError(
                f"parameter vector has {params.numel()} entries, spec needs {self.n_params}"
            )
        layers = []
        k = 0
        for o, i in self.layer_shapes:
            W = params[k:k + o * i].view(o, i)
            k += o * i
            b = params[k:k + o]
            k += o
            layers.append((W, b))
        return layers


def flatten(layers: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    return torch.cat([t.reshape(-1) for W, b in layers for t in (W, b)])


def init_params(spec: MLPSpec, generator: torch.Generator | None = None, seed: int | None = None):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    chunks = []
    for o, i in spec.layer_shapes:
        bound = 1.0 / math.sqrt(i)
        W = (torch.rand(o, i, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound
        chunks += [W.reshape(-1), torch.zeros(o, dtype=DTYPE)]
    return torch.cat(chunks)


def forward(spec: MLPSpec, params: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Plain evaluation on a batch ``z`` of shape (B, input_dim)."""
    z = as_tensor(z)
    if z.shape[-1] != spec.input_dim:
        raise ConfigError(f"input has {z.shape[-1]} columns, spec expects {spec.input_dim}")
    layers = spec.unflatten(params)
    h = z
    for W, b in layers[:-1]:
        h = torch.tanh(h @ W.T + b)
    W, b = layers[-1]
    return h @ W.T + b


@dataclass
class Jet:
    """Derivatives of a scalar network u(x, t) at a batch of points.

    ``value`` and ``dt`` have shape (B,), ``grad_x`` (B, d) and ``hess`` is
    (B, d) in diagonal mode or (B, d, d) in full mode.
    """

    value: torch.Tensor
    dt: torch.Tensor
    grad_x: torch.Tensor
    hess: torch.Tensor
    mode: str = field(default="diagonal")


def jet(spec: MLPSpec, params: torch.Tensor, x, t, mode: str = "diagonal") -> Jet:
    """Batched jet of the first network output with respect to (x, t).

    ``x`` is (B, d) or (d,), ``t`` is (B,) or a scalar.  The network input is
    ``concat(x, t)`` so ``spec.input_dim`` must be d + 1.
    """
    if mode not in ("diagonal", "full"):
        raise ConfigError(f"unknown jet mode {mode!r}")
    x = as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    B, d = x.shape
    if d + 1 != spec.input_dim:
        raise ConfigError(f"x has dimension {d} but spec.input_dim is {spec.input_dim}")
    t = as_tensor(t).reshape(-1)
    if t.numel() == 1 and B > 1:
        t = t.expand(B)
    if not (torch.isfinite(x).all() and torch.isfinite(t).all()):
        raise NumericError("jet requested at a non-finite point")
    z = torch.cat([x, t[:, None]], dim=1)

    # v: (B, n); J: (B, n, d+1); H: (B, n, d) or (B, n, d, d)
    v = z
    J = torch.eye(d + 1, dtype=DTYPE).expand(B, d + 1, d + 1)
    H = None
    layers = spec.unflatten(params)
    for li, (W, b) in enumerate(layers):
        a = v @ W.T + b
        Ja = torch.einsum("oi,bij->boj", W, J)
        if H is None:
            Ha = None
        elif mode == "diagonal":
            Ha = torch.einsum("oi,bij->boj", W, H)
        else:
            Ha = torch.einsum("oi,bijk->bojk", W, H)
        if li == len(layers) - 1:
            v, J, H = a, Ja, Ha
            break
        s = torch.tanh(a)
        ds = 1.0 - s * s
        dds = -2.0 * s * ds
        Jx = Ja[:, :, :d]
        if mode == "diagonal":
            H = dds[:, :, None] * Jx * Jx
        else:
            H = dds[:, :, None, None] * Jx[:, :, :, None] * Jx[:, :, None, :]
        if Ha is not None:
            H = H + (ds[:, :, None] * Ha if mode == "diagonal" else ds[:, :, None, None] * Ha)
        v = s
        J = ds[:, :, None] * Ja

    out = Jet(value=v[:, 0], dt=J[:, 0, d], grad_x=J[:, 0, :d], hess=H[:, 0], mode=mode)
    if single:
        out = Jet(out.value[0], out.dt[0], out.grad_x[0], out.hess[0], mode)
    return out


def eval_with_jet(spec: MLPSpec, params: torch.Tensor, x, t, mode: str = "diagonal") -> Jet:
    """Jet at a single point (x: d-vector, t: scalar)."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ConfigError("eval_with_jet takes a single d-vector; use jet() for batches")
    return jet(spec, params, x, t, mode)


def loss_gradient(loss: torch.Tensor, params, retain_graph: bool = False):
    """Gradient of a scalar loss with respect to ``params`` (a tensor or list)."""
    if loss.ndim != 0:
        raise ConfigError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()!r}", value=loss.detach())
    single = isinstance(params, torch.Tensor)
    plist = [params] if single else list(params)
    grads = torch.autograd.grad(loss, plist, retain_graph=retain_graph, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(plist, grads)]
    return grads[0] if single else grads


@dataclass
class OptimizerState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: torch.Tensor, **kw) -> "OptimizerState":
        return cls(torch.zeros_like(params.detach()), torch.zeros_like(params.detach()), **kw)


def adam_update(state: OptimizerState, params: torch.Tensor, grad: torch.Tensor):
    """One bias-corrected Adam step; returns (new_params, new_state)."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ConfigError("params, grad and optimizer moments must share a shape")
    with torch.no_grad():
        step = state.step + 1
        m = state.beta1 * state.m + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
        m_hat = m / (1.0 - state.beta1 ** step)
        v_hat = v / (1.0 - state.beta2 ** step)
        new = params.detach() - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(m, v, step, state.lr, state.beta1, state.beta2, state.eps)
    return new.requires_grad_(params.requires_grad), new_state


class Adam:
    """Stateful wrapper around :func:`adam_update` for a list of flat tensors."""

    def __init__(self, params: List[torch.Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.states = [OptimizerState.zeros_like(p, lr=lr, **kw) for p in self.params]

    def step(self, grads: List[torch.Tensor]):
        for k, (p, g) in enumerate(zip(self.params, grads)):
            new, self.states[k] = adam_update(self.states[k], p, g)
            with torch.no_grad():
                p.copy_(new)
