import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sahp.model import (
    DTYPE, IntensityState, SAHPConfig, SAHPNetwork, angular_frequencies, intensity_at, load_checkpoint,
    masked_attention, pad_batch, positional_encoding, save_checkpoint, softplus,
)
from sahp.data import Sequence


def net(U=2, K=8, H=2, L=2, seed=0, **kw):
    return SAHPNetwork(SAHPConfig(U, K, H, L, dropout=0.0, **kw), torch.Generator().manual_seed(seed))


def random_seq(rng, U, n):
    times = np.cumsum(rng.uniform(0.05, 2.0, n))
    return Sequence(rng.integers(0, U, n), times, times[-1] + 1.0)


def states_of(network, seq):
    types, times, _, _ = pad_batch([seq])
    with torch.no_grad():
        return network(types, times)


# -- config and intensity -----------------------------------------------------

@pytest.mark.parametrize("kw", [dict(model_dim=7), dict(model_dim=8, num_heads=3), dict(num_layers=0),
                                dict(dropout=1.0), dict(encoding="learned"), dict(num_types=0)])
def test_config_validation(kw):
    args = dict(num_types=2)
    args.update(kw)
    with pytest.raises(ValueError):
        SAHPConfig(**args)


def test_intensity_limits_random_states():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mu, eta = rng.normal(0, 3, 2)
        gamma = rng.uniform(0.01, 5.0)
        start = rng.uniform(0, 100)
        s = IntensityState(mu, eta, gamma, start)
        assert intensity_at(s, start) - softplus(eta) == 0.0
        far = intensity_at(s, start + 50.0 / gamma)
        assert abs(far - softplus(mu)) < 1e-9 * (1 + abs(softplus(mu)))


def test_intensity_shape_and_errors():
    s = IntensityState(1.0, -2.0, 0.7, 3.0)
    t = np.linspace(3.0, 20.0, 200)
    lam = intensity_at(s, t)
    assert np.all(lam > 0) and np.all(np.diff(lam) > 0)  # eta < mu: increasing
    with pytest.raises(ValueError):
        intensity_at(s, 2.9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(1e-3, 10), st.floats(0, 100))
def test_intensity_positive(mu, eta, gamma, dt):
    assert intensity_at(IntensityState(mu, eta, gamma, 0.0), dt) > 0


def test_heads_at_zero():
    s = net().intensity_params(torch.zeros(8))
    assert s.mu == 0.0 and s.eta == 0.0 and s.gamma == pytest.approx(math.log(2), abs=1e-15)


# -- positional encoding ------------------------------------------------------

def test_encoding_origin():
    omega = angular_frequencies(8)
    pe = positional_encoding(omega, omega.clone(), 0, 0.0)
    assert torch.equal(pe[0::2], torch.zeros(4, dtype=DTYPE)) and torch.equal(pe[1::2], torch.ones(4, dtype=DTYPE))


def test_zero_time_scale_equals_conventional():
    omega = angular_frequencies(16)
    for i, t in [(1, 0.3), (5, 17.2), (40, 1e3)]:
        shifted = positional_encoding(omega, torch.zeros(16, dtype=DTYPE), i, t, "time_shifted")
        assert torch.equal(shifted, positional_encoding(omega, omega, i, t, "conventional"))


def test_encoding_is_shifted_position():
    omega = angular_frequencies(16)
    w = torch.linspace(0.01, 0.5, 16, dtype=DTYPE)
    i, t = 4, 2.7
    pe = positional_encoding(omega, w, i, t)
    shifted_pos = i + w * t / omega
    conv = torch.where(torch.arange(16) % 2 == 0, torch.sin(omega * shifted_pos), torch.cos(omega * shifted_pos))
    assert torch.allclose(pe, conv, atol=1e-12)


def test_embed_event():
    n = net()
    with torch.no_grad():
        n.type_embedding.zero_()
    assert torch.equal(n.embed_event(1, 3, 2.0), n.encode(3, 2.0))
    assert torch.equal(n.embed_event(0, 3, 2.0), n.embed_event(0, 3, 2.0))
    assert not torch.equal(n.embed_event(0, 3, 2.0), n.embed_event(0, 3, 2.5))
    conv = net(encoding="conventional")
    assert torch.equal(conv.embed_event(0, 3, 2.0), conv.embed_event(0, 3, 2.5))
    with pytest.raises(ValueError):
        n.embed_event(2, 1, 0.0)


# -- attention ----------------------------------------------------------------

def test_single_key_returns_its_value():
    g = torch.Generator().manual_seed(1)
    q = torch.randn(3, 4, generator=g, dtype=DTYPE)
    k = torch.randn(1, 4, generator=g, dtype=DTYPE)
    v = torch.randn(1, 4, generator=g, dtype=DTYPE)
    out, w = masked_attention(q, k, v, torch.ones(3, 1, dtype=torch.bool))
    assert torch.allclose(out, v.expand(3, 4), atol=0, rtol=0) and torch.equal(w, torch.ones(3, 1, dtype=DTYPE))


def test_orthogonal_query_averages_values():
    k = torch.tensor([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], dtype=DTYPE)
    v = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]], dtype=DTYPE)
    q = torch.tensor([[0.0, 1.0]], dtype=DTYPE)
    out, _ = masked_attention(q, k, v, torch.ones(1, 3, dtype=torch.bool))
    assert torch.allclose(out, v.mean(0, keepdim=True), atol=1e-15)


def test_attention_weights_normalised_over_valid_positions():
    rng = np.random.default_rng(2)
    n = net(U=3, K=8, H=2, L=3)
    s = random_seq(rng, 3, 9)
    types, times, _, _ = pad_batch([s])
    with torch.no_grad():
        st_ = n(types, times, return_attention=True)
    for w in st_.attention:
        assert torch.all(w >= 0)
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-12)
        assert torch.all(w.triu(1) == 0)


# -- causality and symmetries ------------------------------------------------

def test_causal_mask_bit_identical():
    rng = np.random.default_rng(3)
    n = net(U=3)
    for _ in range(50):
        L = int(rng.integers(2, 12))
        s = random_seq(rng, 3, L)
        i = int(rng.integers(1, L))  # keep the first i events
        tail_types = rng.integers(0, 3, L - i)
        tail_times = s.times[i - 1] + np.cumsum(rng.uniform(0.05, 3.0, L - i))
        mutated = Sequence(np.r_[s.types[:i], tail_types], np.r_[s.times[:i], tail_times], tail_times[-1] + 1)
        a, b = states_of(n, s), states_of(n, mutated)
        for x, y in ((a.mu, b.mu), (a.eta, b.eta), (a.gamma, b.gamma)):
            assert torch.equal(x[:, :i], y[:, :i])


def test_truncated_prefix_matches():
    rng = np.random.default_rng(4)
    n = net(U=2)
    for _ in range(20):
        s = random_seq(rng, 2, 10)
        full = states_of(n, s)
        i = int(rng.integers(1, 10))
        states = n.all_type_intensity_states(s.types[:i], s.times[:i])
        for u, st_ in enumerate(states):
            assert st_.start == s.times[i - 1]
            assert abs(st_.mu - float(full.mu[0, i - 1, u])) <= 1e-12
            assert abs(st_.eta - float(full.eta[0, i - 1, u])) <= 1e-12
            assert abs(st_.gamma - float(full.gamma[0, i - 1, u])) <= 1e-12
    with pytest.raises(ValueError):
        n.all_type_intensity_states([], [])


def test_padding_does_not_leak():
    rng = np.random.default_rng(5)
    n = net(U=2)
    short, long_ = random_seq(rng, 2, 4), random_seq(rng, 2, 11)
    types, times, _, _ = pad_batch([short, long_])
    with torch.no_grad():
        batch = n(types, times)
    alone = states_of(n, short)
    # different batch shapes may change floating-point reduction order
    assert torch.allclose(batch.mu[0, :4], alone.mu[0], rtol=0, atol=1e-12)


def test_conventional_mode_time_scale_invariant():
    rng = np.random.default_rng(6)
    conv, shifted = net(encoding="conventional"), net()
    s = random_seq(rng, 2, 8)
    scaled = Sequence(s.types, s.times * 3.7, s.horizon * 3.7)
    a, b = states_of(conv, s), states_of(conv, scaled)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.eta, b.eta) and torch.equal(a.gamma, b.gamma)
    c, d = states_of(shifted, s), states_of(shifted, scaled)
    assert not torch.allclose(c.mu, d.mu)


def test_type_equivariance():
    rng = np.random.default_rng(7)
    n = net(U=3)
    perm = np.array([2, 0, 1])  # new label of old type u is perm[u]
    m = net(U=3)
    m.load_state_dict(n.state_dict())
    with torch.no_grad():
        m.type_embedding[torch.as_tensor(perm)] = n.type_embedding.clone()
    s = random_seq(rng, 3, 7)
    relabelled = Sequence(perm[s.types], s.times, s.horizon)
    a, b = states_of(n, s), states_of(m, relabelled)
    assert torch.allclose(a.mu, b.mu[..., perm], atol=1e-12)
    assert torch.allclose(a.gamma, b.gamma[..., perm], atol=1e-12)


def test_single_type_state():
    n = net(U=1)
    states = n.all_type_intensity_states([0, 0], [1.0, 2.0])
    assert len(states) == 1 and states[0].gamma > 0 and states[0].start == 2.0


def test_omega_fixed_and_time_scale_initialised():
    n = net(K=16)
    names = dict(n.named_parameters())
    assert "omega" not in names and "time_scale" in names
    assert torch.equal(n.time_scale.detach(), n.omega)


def test_checkpoint_round_trip(tmp_path):
    n = net(U=3, K=8, H=4, L=1, seed=9)
    p = tmp_path / "m.npz"
    save_checkpoint(n, p, {"note": 1})
    m, extra = load_checkpoint(p)
    assert extra == {"note": 1} and m.config == n.config
    for (k1, v1), (k2, v2) in zip(n.named_parameters(), m.named_parameters()):
        assert k1 == k2 and torch.equal(v1, v2)


def test_seeded_initialisation_reproducible():
    a, b = net(seed=3), net(seed=3)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
