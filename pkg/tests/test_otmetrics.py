import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fkee.errors import ConfigError, NumericError
from fkee.gradengine import DTYPE
from fkee.otmetrics import (
    SinkhornConfig,
    distance,
    sinkhorn_divergence,
    sinkhorn_dual,
    w2_1d,
    w2_marginal_sum,
)


def brute_force_sq_cost(a, b):
    """Min over all assignments of the mean squared Euclidean cost."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    n = a.shape[0]
    return min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1)) for p in itertools.permutations(range(n)))


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def test_w2_1d_examples():
    x = t([0.3, -1.0, 2.0])
    assert w2_1d(x, x).item() == 0.0
    assert w2_1d(t([0.0]), t([2.0])).item() == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        w2_1d(t([]).reshape(0, 1), t([]).reshape(0, 1))
    with pytest.raises(ConfigError):
        w2_1d(t([1.0, 2.0]), t([1.0]))


def test_w2_1d_matches_brute_force_exactly():
    rng = np.random.default_rng(0)
    for n in range(1, 7):
        for _ in range(5):
            a = rng.normal(size=(n, 1))
            b = rng.normal(size=(n, 1)) * 2 + 1
            assert w2_1d(t(a), t(b)).item() ** 2 == pytest.approx(brute_force_sq_cost(a, b), rel=1e-12, abs=1e-15)


def test_w2_1d_gaussian_closed_form():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 1, size=10_000)
    b = rng.normal(2, 1, size=10_000)
    # W2^2 = (m1 - m2)^2 + (s1 - s2)^2 = 4
    assert w2_1d(t(a), t(b)).item() == pytest.approx(2.0, abs=0.1)


def test_w2_gradient_through_sort():
    a = t([[0.0], [3.0], [1.0]]).requires_grad_(True)
    b = t([[1.0], [2.0], [4.0]])
    loss = w2_1d(a, b) ** 2
    loss.backward()
    # sorted pairs (0,1), (1,2), (3,4): each gap is -1, d/da_i = 2 * gap / n
    assert torch.allclose(a.grad, t([[-2 / 3], [-2 / 3], [-2 / 3]]))
    z = t([[1.0], [2.0]]).requires_grad_(True)
    w2_1d(z, z.detach().clone()).backward()
    assert torch.all(torch.isfinite(z.grad))


def test_w2_marginal_sum_examples():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(50, 2))
    assert w2_marginal_sum(t(a), t(a)).item() == 0.0
    assert w2_marginal_sum(t(a), t(a + [1.0, -1.0])).item() == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        w2_marginal_sum(t(a), t(a[:, :1]))


def test_w2_marginal_sum_product_gaussians():
    rng = np.random.default_rng(3)
    n = 10_000
    a = rng.normal([0, 1, -1], [1, 1, 2], size=(n, 3))
    b = rng.normal([1, 1, 0], [1, 3, 2], size=(n, 3))
    expected = 1.0 + 2.0 + 1.0  # per coordinate sqrt((dm)^2 + (ds)^2)
    assert w2_marginal_sum(t(a), t(b)).item() == pytest.approx(expected, rel=0.05)


def test_sinkhorn_single_points():
    p, q = t([[0.0, 1.0]]), t([[2.0, -1.0]])
    for eps in (1e-3, 0.1, 10.0):
        assert sinkhorn_divergence(p, q, SinkhornConfig(eps=eps, iters=3)).item() == pytest.approx(8.0)


def test_sinkhorn_debiased_self_distance():
    a = t(np.random.default_rng(4).normal(size=(8, 2)))
    assert abs(sinkhorn_divergence(a, a, SinkhornConfig(eps=0.1, iters=50, debiased=True)).item()) <= 1e-8


def test_sinkhorn_close_to_assignment_on_five_points():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = rng.uniform(size=(5, 2))
        b = rng.uniform(size=(5, 2))
        exact = brute_force_sq_cost(a, b)
        approx = sinkhorn_divergence(t(a), t(b), SinkhornConfig(eps=1e-3, iters=500)).item()
        assert approx == pytest.approx(exact, rel=0.02)


def test_sinkhorn_scaling_mode_overflow_is_reported():
    a = t([[0.0], [5.0]])
    b = t([[10.0], [-3.0]])
    with pytest.raises(NumericError, match="log_domain"):
        sinkhorn_divergence(a, b, SinkhornConfig(eps=1e-3, iters=10, log_domain=False))


def test_sinkhorn_modes_agree_at_moderate_eps():
    rng = np.random.default_rng(6)
    a, b = t(rng.normal(size=(6, 2))), t(rng.normal(size=(6, 2)))
    lg = sinkhorn_divergence(a, b, SinkhornConfig(eps=0.5, iters=100, log_domain=True))
    sc = sinkhorn_divergence(a, b, SinkhornConfig(eps=0.5, iters=100, log_domain=False))
    assert lg.item() == pytest.approx(sc.item(), rel=1e-10)


def test_sinkhorn_dual_is_monotone_in_iterations():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a, b = t(rng.normal(size=(6, 2))), t(rng.normal(size=(7, 2)) + 0.5)
        for eps in (0.05, 0.5):
            vals = [sinkhorn_dual(a, b, SinkhornConfig(eps=eps, iters=k)).item() for k in range(1, 25)]
            assert np.all(np.diff(vals) >= -1e-12)


def test_sinkhorn_gradients_flow_to_both_clouds():
    rng = np.random.default_rng(8)
    a = t(rng.normal(size=(4, 2))).requires_grad_(True)
    b = t(rng.normal(size=(4, 2))).requires_grad_(True)
    sinkhorn_divergence(a, b, SinkhornConfig(eps=0.1, iters=30)).backward()
    assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0


def test_distance_dispatch():
    a = t([[0.0], [1.0]])
    assert distance("w2_marginal_sum", a, a + 1).item() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        distance("kl", a, a)


clouds = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-5, 5), min_size=n, max_size=n),
        st.lists(st.floats(-5, 5), min_size=n, max_size=n),
    )
)


@settings(max_examples=60, deadline=None)
@given(clouds)
def test_symmetry_and_nonnegativity(pair):
    a, b = (t(np.array(v)[:, None]) for v in pair)
    for fn in (w2_1d, w2_marginal_sum,
               lambda x, y: sinkhorn_divergence(x, y, SinkhornConfig(eps=0.5, iters=20))):
        ab, ba = fn(a, b).item(), fn(b, a).item()
        assert ab >= 0
        assert ab == pytest.approx(ba, abs=1e-10)
    assert w2_1d(a, a).item() == 0.0
    assert w2_marginal_sum(b, b).item() == 0.0
    assert sinkhorn_divergence(a, a, SinkhornConfig(eps=0.5, iters=20, debiased=True)).item() == 0.0
