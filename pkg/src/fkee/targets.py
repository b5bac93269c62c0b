"""Samplers for the synthetic target distributions used by the experiments."""
from __future__ import annotations

import math

import numpy as np
import torch

from .gradengine import DTYPE

MIXED_VAR = 2.0  # variance of the Gaussian part of each coordinate


def mixed_3d(n: int, seed: int) -> torch.Tensor:
    """Y = (N(1,2) + Beta(4,2), N(-1,2) + Gamma(1, scale 2), N(3,2) + Geometric(0.5))."""
    rng = np.random.default_rng(seed)
    s = math.sqrt(MIXED_VAR)
    y = np.stack([
        rng.normal(1.0, s, n) + rng.beta(4.0, 2.0, n),
        rng.normal(-1.0, s, n) + rng.gamma(1.0, 2.0, n),
        rng.normal(3.0, s, n) + rng.geometric(0.5, n),
    ], axis=1)
    return torch.from_numpy(y).to(DTYPE)


def mixed_3d_mean() -> np.ndarray:
    return np.array([1.0 + 4.0 / 6.0, -1.0 + 2.0, 3.0 + 2.0])
