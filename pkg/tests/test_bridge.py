import math

import numpy as np
import pytest
import torch
from scipy.integrate import quad
from scipy.stats import norm

from fkee.bridge import (
    BridgeModel,
    ChainMarginals,
    FitConfig,
    GaussianKernel,
    budget_advisor,
    chain_loss,
    fit,
    gaussian_l2_sq,
    langevin_kernel,
    resample,
    terminal_loss,
    transition_density_loss,
)
from fkee.errors import ConfigError, NumericError
from fkee.gradengine import DTYPE
from fkee.otmetrics import w2_marginal_sum
from fkee.sdesim import NoiseSource, TimeGrid, gaussian_score
from fkee.targets import mixed_3d

B2_GRID = TimeGrid.from_horizon(0.2, 0.025)


def point_cloud(c, n):
    return torch.tensor([c], dtype=DTYPE).repeat(n, 1)


def b2_fit(n=500, data_seed=0, fit_seed=0):
    y = mixed_3d(n, data_seed)
    model = BridgeModel.create(3, B2_GRID, seed=fit_seed, x0=y.mean(0))
    return y, *fit(model, "terminal", y, FitConfig(epochs=300, lr=1e-3, seed=fit_seed))


@pytest.fixture(scope="module")
def b2():
    return b2_fit()


def test_constant_model_outputs():
    m = BridgeModel.constant(2, B2_GRID, x0=[0.0, 0.0], drift=0.7, diffusion=0.3)
    x = torch.randn(5, 2, dtype=DTYPE)
    assert torch.allclose(m.drift(x, 0.1), torch.full((5, 2), 0.7, dtype=DTYPE))
    assert torch.allclose(m.diffusion(x, 0.1), torch.full((5, 2), 0.3, dtype=DTYPE))
    assert torch.all(BridgeModel.create(2, B2_GRID, seed=3).diffusion(x * 100, 0.0) >= 1e-4)


def test_terminal_loss_zero_on_point_mass():
    m = BridgeModel.constant(2, B2_GRID, x0=[1.0, -2.0], diffusion=0.0)
    m.floor = 0.0
    loss = terminal_loss(m, point_cloud([1.0, -2.0], 16), NoiseSource(0))
    assert loss.item() == 0.0


@pytest.mark.parametrize("floor", [1e-2, 1e-4, 1e-6])
def test_terminal_loss_tends_to_offset(floor):
    delta = 0.3
    m = BridgeModel.constant(1, B2_GRID, x0=[delta], floor=floor)
    loss = terminal_loss(m, point_cloud([0.0], 200), NoiseSource(1)).item()
    assert abs(loss - delta) <= 5 * floor * math.sqrt(B2_GRID.T)


def test_data_count_must_match():
    m = BridgeModel.constant(1, B2_GRID, x0=[0.0])
    with pytest.raises(ConfigError):
        terminal_loss(m, torch.zeros(4, 1, dtype=DTYPE), NoiseSource(0).increments(3, B2_GRID, 1))


def test_theta3_gradient_nonzero_above_floor():
    m = BridgeModel.constant(2, B2_GRID, x0=[0.5, 0.5])
    loss = terminal_loss(m, point_cloud([0.0, 1.0], 32), NoiseSource(0))
    (g,) = torch.autograd.grad(loss, m.x0)
    assert loss.item() > 0.1
    assert g.abs().min().item() > 0


def test_chain_self_match_and_reduction():
    m = BridgeModel.create(2, B2_GRID, seed=4)
    noise = NoiseSource(11).increments(40, B2_GRID, 2)
    with torch.no_grad():
        states = m.simulate(noise, 40, record=False).states
    times = [0.05, 0.1, 0.2]
    targets = ChainMarginals(times, [states[:, B2_GRID.index_of(t)] for t in times])
    assert chain_loss(m, targets, noise).item() == 0.0
    data = mixed_3d(40, 1)[:, :2]
    single = ChainMarginals([B2_GRID.T], [data])
    assert chain_loss(m, single, noise).item() == pytest.approx(terminal_loss(m, data, noise).item(), abs=1e-14)
    with pytest.raises(ConfigError):
        chain_loss(m, ChainMarginals([0.03], [data]), noise)


def test_chain_marginals_validation():
    c = torch.zeros(5, 1, dtype=DTYPE)
    with pytest.raises(ConfigError):
        ChainMarginals([0.1, 0.1], [c, c])
    with pytest.raises(ConfigError):
        ChainMarginals([0.1, 0.2], [c, torch.zeros(4, 1, dtype=DTYPE)])


def test_gaussian_l2_matches_quadrature():
    for m1, m2, s in [(0.0, 1.0, 1.0), (0.3, -0.4, 0.5), (2.0, 2.0, 0.2), (1.0, -1.5, 2.0)]:
        numeric = quad(lambda y: (norm.pdf(y, m1, s) - norm.pdf(y, m2, s)) ** 2, -40, 40, points=[m1, m2])[0]
        closed = (1 / (2 * s * math.sqrt(math.pi))) * 2 * (1 - math.exp(-(m1 - m2) ** 2 / (4 * s * s)))
        got = gaussian_l2_sq(torch.tensor([[m1]], dtype=DTYPE), torch.tensor([[[s * s]]], dtype=DTYPE),
                             torch.tensor([[m2]], dtype=DTYPE), torch.tensor([[[s * s]]], dtype=DTYPE)).item()
        assert got == pytest.approx(closed, rel=1e-10, abs=1e-14)
        assert got == pytest.approx(numeric, rel=1e-7, abs=1e-12)


def test_transition_loss_zero_on_matching_kernel():
    h = B2_GRID.h
    m = BridgeModel.constant(1, B2_GRID, x0=[0.2], drift=0.0, diffusion=1.0)
    # model step: N(x, h); a target with the same kernel
    target = GaussianKernel(lambda x, t: x, lambda x, t: torch.full_like(x, h))
    anchors = torch.linspace(-2, 2, 9, dtype=DTYPE)[:, None]
    assert transition_density_loss(m, target, anchors, [0.2]).item() == pytest.approx(0.0, abs=1e-12)
    assert transition_density_loss(m, target, anchors, [0.5]).item() == pytest.approx(0.09, abs=1e-12)
    with pytest.raises(ConfigError):
        transition_density_loss(m, lambda x, t: x, anchors, [0.2])


def test_transition_fit_improves_on_random_init():
    h = B2_GRID.h
    kernel = langevin_kernel(gaussian_score(1.0), h)
    anchors = torch.from_numpy(np.random.default_rng(0).normal(1.0, 1.0, (200, 1)))
    model = BridgeModel.create(1, B2_GRID, hidden=(16,), seed=2)
    before = transition_density_loss(model, kernel, anchors, [0.0]).item()
    model, rep = fit(model, "transition", (kernel, anchors), FitConfig(epochs=200, lr=1e-2), x0_target=[0.0])
    assert rep.final_loss < 0.5 * before
    assert rep.trace[-1] < rep.trace[0]


def test_infinite_threshold_stops_immediately():
    m = BridgeModel.create(1, B2_GRID, seed=0)
    before = [p.detach().clone() for p in m.parameters()]
    m, rep = fit(m, "terminal", point_cloud([1.0], 8), FitConfig(epochs=50, threshold=math.inf))
    assert rep.epochs_run == 0 and rep.trace == [] and rep.stop_reason == "threshold reached"
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_unknown_objective_and_groups():
    m = BridgeModel.create(1, B2_GRID, seed=0)
    with pytest.raises(ConfigError):
        fit(m, "nope", point_cloud([1.0], 4))
    with pytest.raises(ConfigError):
        m.parameters(("drift", "bias"))


def test_nonfinite_loss_aborts_with_trace():
    m = BridgeModel.constant(1, B2_GRID, x0=[0.0])
    data = point_cloud([1.0], 4)
    data[0, 0] = math.nan
    with pytest.raises(NumericError) as exc:
        fit(m, "terminal", data, FitConfig(epochs=5))
    assert exc.value.value == []


def test_point_mass_theta3_converges():
    m = BridgeModel.constant(2, B2_GRID, x0=[1.2, -0.2])
    data = point_cloud([1.5, -0.5], 64)
    m, rep = fit(m, "terminal", data, FitConfig(epochs=300, lr=1e-2, trainable=("x0",)))
    assert rep.epochs_run <= 300
    assert torch.allclose(m.x0.detach(), torch.tensor([1.5, -0.5], dtype=DTYPE), atol=1e-2)


def test_b2_recipe_loss_drops_tenfold(b2):
    _, _, rep = b2
    assert rep.epochs_run == 300 and len(rep.trace) == 300
    assert rep.final_loss <= 0.1 * rep.trace[0]


def test_b2_resampled_means(b2):
    y, model, _ = b2
    r = resample(model, 500, seed=7)
    gap = (r.mean(0) - y.mean(0)).abs() / y.std(0)
    assert torch.all(gap <= 0.15), gap


def test_b2_resample_seeds_differ_in_sample_not_law(b2):
    _, model, _ = b2
    a, b = resample(model, 500, seed=1), resample(model, 500, seed=2)
    assert not torch.equal(a, b)
    baseline = w2_marginal_sum(mixed_3d(500, 100), mixed_3d(500, 101)).item()
    assert w2_marginal_sum(a, b).item() <= 2 * baseline + 0.1


def test_resample_point_mass():
    m = BridgeModel.constant(2, B2_GRID, x0=[0.4, -1.0])
    r = resample(m, 300, seed=0)
    assert torch.all((r - torch.tensor([0.4, -1.0], dtype=DTYPE)).abs() <= 3 * 1e-4 * math.sqrt(B2_GRID.T) * 4)


def test_budget_advisor_examples():
    a = budget_advisor(0.0, 1.0, 0.1, 100)
    assert a.feasible and a.h == pytest.approx(0.01) and a.T == pytest.approx(1.0)
    one = budget_advisor(1.0, 1.0, 0.05, 1)
    assert one.steps == 1 and one.T == pytest.approx(one.h)
    fixed = budget_advisor(1.0, 1.0, 0.05, 10, horizon=1.0)
    assert not fixed.feasible


def test_budget_advisor_against_grid_search():
    L, C, eps, M0 = 1.0, 1.0, 0.05, 1000
    adv = budget_advisor(L, C, eps, M0)
    hs = np.logspace(-8, 0, 8001)
    best = None
    for h in hs:
        # smallest horizon k = 1 is the easiest for the error bound
        if C * math.sqrt(h) * math.exp(4 * L * L * h) <= eps:
            best = h
    assert adv.feasible and best is not None
    assert best <= adv.h * (1 + 1e-12) and adv.h <= best * 10 ** (8 / 8000) * (1 + 1e-12)
    assert C * math.sqrt(adv.h) * math.exp(4 * L * L * adv.T) <= eps * (1 + 1e-9)
    assert adv.steps <= M0
    # a longer horizon at this h would break one of the two constraints
    T_next = (adv.steps + 1) * adv.h
    assert adv.steps == M0 or C * math.sqrt(adv.h) * math.exp(4 * L * L * T_next) > eps


@pytest.mark.slow
def test_resampling_consistency_in_data_size():
    sizes, seeds = [50, 200, 500], range(5)
    fresh = mixed_3d(500, 999)
    means = []
    for n in sizes:
        dist = []
        for s in seeds:
            _, model, _ = b2_fit(n, data_seed=10 + s, fit_seed=s)
            dist.append(w2_marginal_sum(resample(model, 500, seed=s), fresh).item())
        means.append(float(np.mean(dist)))
    assert means[0] > means[1] > means[2], means
