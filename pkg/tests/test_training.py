import math

import numpy as np
import pytest
import torch
from scipy.integrate import trapezoid

from sahp.data import Sequence, split_dataset
from sahp.model import DTYPE, IntensityStates, SAHPConfig, SAHPNetwork, decaying_intensity
from sahp.simulation import simulate_dataset, synthetic_spec
from sahp.training import (
    TrainConfig, gradient, mc_compensator, sequence_nll, stratified_points, train,
    warmup_rate,
)

SOFTPLUS_INV_1 = math.log(math.e - 1.0)  # softplus(x) = 1


class ConstantStub:
    """Every type has the constant intensity ``softplus(level)``."""

    def __init__(self, U, level):
        self.U, self.level = U, level

    def __call__(self, types, times, generator=None):
        B, L = types.shape
        full = torch.full((B, L, self.U), self.level, dtype=DTYPE)
        return IntensityStates(full, full.clone(), torch.ones_like(full))


def gen(seed):
    return torch.Generator().manual_seed(seed)


def test_stub_nll_on_window():
    nll = sequence_nll(ConstantStub(1, SOFTPLUS_INV_1), Sequence([0, 0], [0.5, 1.0], 1.0), 10, gen(0))
    assert float(nll) == pytest.approx(0.5, abs=1e-12)


def test_single_event_is_compensator_only():
    nll = sequence_nll(ConstantStub(2, SOFTPLUS_INV_1), Sequence([1], [0.5], 3.0), 10, gen(0))
    assert float(nll) == pytest.approx(2 * 2.5, abs=1e-12)
    with pytest.raises(ValueError):
        sequence_nll(ConstantStub(1, 0.0), Sequence([], [], 1.0))


@pytest.mark.parametrize("n", [1, 3, 10])
def test_constant_integrand_exact_and_linear(n):
    c = 1.7
    level = torch.tensor([[math.log(math.expm1(c / 2))] * 2], dtype=DTYPE)  # two types, total c
    starts, ends = torch.tensor([0.3], dtype=DTYPE), torch.tensor([2.3], dtype=DTYPE)
    est = mc_compensator(level, level, torch.ones_like(level), starts, ends, n, gen(1))
    assert float(est) == pytest.approx(c * 2.0, rel=1e-14)
    est2 = mc_compensator(level, level, torch.ones_like(level), starts * 2, ends * 2, n, gen(1))
    assert float(est2) == pytest.approx(2 * float(est), rel=1e-14)
    with pytest.raises(ValueError):
        mc_compensator(level, level, level, starts, ends, 0)


def decay_case():
    mu = torch.tensor([[0.2, -1.0]], dtype=DTYPE)
    eta = torch.tensor([[2.5, 1.0]], dtype=DTYPE)
    gamma = torch.tensor([[1.3, 0.4]], dtype=DTYPE)
    starts, ends = torch.tensor([1.0], dtype=DTYPE), torch.tensor([4.0], dtype=DTYPE)
    grid = torch.linspace(1.0, 4.0, 100_000, dtype=DTYPE)
    lam = decaying_intensity(mu[0], eta[0], gamma[0], (grid - 1.0)[:, None]).sum(-1)
    return (mu, eta, gamma, starts, ends), trapezoid(lam.numpy(), grid.numpy())


def test_decaying_integrand_vs_quadrature():
    args, exact = decay_case()
    est = float(mc_compensator(*args, 10_000, gen(2)))
    assert abs(est - exact) / exact < 0.01


def test_mc_unbiased():
    args, exact = decay_case()
    draws = np.array([float(mc_compensator(*args, 10, gen(s))) for s in range(200)])
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - exact) <= 2 * se + 1e-12


def test_stratified_points_cover_subintervals():
    starts, ends = torch.tensor([0.0, 5.0], dtype=DTYPE), torch.tensor([1.0, 9.0], dtype=DTYPE)
    pts = stratified_points(starts, ends, 4, gen(3))
    frac = (pts - starts[:, None]) / (ends - starts)[:, None]
    assert torch.all((frac >= torch.arange(4) / 4) & (frac < (torch.arange(4) + 1) / 4))


def small_net(seed=0, K=8, U=2, dropout=0.0):
    return SAHPNetwork(SAHPConfig(U, K, 2, 2, dropout), gen(seed))


def test_seed_invariance_at_large_n():
    seq = Sequence([0, 1, 0, 1], [0.4, 1.1, 1.5, 2.8], 4.0)
    n = small_net()
    with torch.no_grad():
        a = float(sequence_nll(n, seq, 10_000, gen(1)))
        b = float(sequence_nll(n, seq, 10_000, gen(2)))
    assert abs(a - b) / abs(a) < 0.005


def test_gradient_set():
    n = small_net()
    g = gradient(n, [Sequence([0, 1, 0], [0.5, 1.2, 2.0], 3.0)], 10, gen(0))
    assert "omega" not in g and set(g) == {k for k, _ in n.named_parameters()}
    assert torch.any(g["type_embedding"] != 0)
    with pytest.raises(ValueError):
        gradient(n, [], 10)


def test_warmup_exact():
    for s in range(1, 101):
        assert warmup_rate(s, 3e-3, 100) == 3e-3 * s / 100
    assert warmup_rate(250, 3e-3, 100) == 3e-3
    assert warmup_rate(1, 1e-4, 0) == 1e-4


def test_config_validation():
    for kw in (dict(mc_samples=0), dict(learning_rate=0.0), dict(early_stop_delta=-1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


@pytest.fixture(scope="module")
def tiny_data():
    ds = split_dataset(simulate_dataset(synthetic_spec(), 30.0, 40, 0), (0.6, 0.2, 0.2), 0)
    scale = lambda xs: [Sequence(s.types, s.times / 5.0, s.horizon / 5.0) for s in xs]  # noqa: E731
    return scale(ds.split("train")), scale(ds.split("val"))


def test_training_deterministic(tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(learning_rate=3e-3, warmup_steps=5, batch_size=8, max_epochs=2, seed=4)
    a, ha = train(SAHPNetwork(SAHPConfig(2, 8, 2, 1, 0.1), gen(1)), tr, va, cfg)
    b, hb = train(SAHPNetwork(SAHPConfig(2, 8, 2, 1, 0.1), gen(1)), tr, va, cfg)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_time"} for r in h]  # noqa: E731
    assert str(strip(ha)) == str(strip(hb))


def test_infinite_delta_stops_after_patience_plus_one(tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(learning_rate=1e-3, warmup_steps=0, batch_size=8, max_epochs=50,
                      early_stop_delta=math.inf, patience=2)
    _, hist = train(small_net(), tr, va, cfg)
    assert hist[-1]["epoch"] == 3


def test_training_requires_data(tiny_data):
    tr, _ = tiny_data
    with pytest.raises(ValueError):
        train(small_net(), tr, [], TrainConfig())


def test_learnability_on_synthetic():
    from sahp.estimator import SAHP

    ds = split_dataset(simulate_dataset(synthetic_spec(), 156.0, 200, 3), (0.8, 0.1, 0.1), 0)
    est = SAHP(num_types=2, learning_rate=3e-3, warmup_steps=20, max_epochs=3, random_state=0).fit(ds)
    vals = [r["val_nll_per_event"] for r in est.history_]
    assert min(vals[1:]) < vals[0]
