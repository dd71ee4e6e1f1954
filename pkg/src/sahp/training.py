"""Monte Carlo likelihood, gradients and the optimisation loop for the
self-attentive Hawkes network."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .hawkes import NumericalError
from .model import DTYPE, IntensityStates, SAHPNetwork, decaying_intensity, pad_batch

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "step", "train_nll_per_event", "val_nll_per_event", "learning_rate", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_steps: int = 500
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_delta: float = 1e-3
    patience: int = 5
    mc_samples: int = 10
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.early_stop_delta >= 0:
            raise ValueError("early_stop_delta must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1 or self.warmup_steps < 0:
            raise ValueError("batch_size, max_epochs, patience and warmup_steps must be positive")


def warmup_rate(step: int, learning_rate: float, warmup_steps: int) -> float:
    """Learning rate for the ``step``-th update (1-based): linear ramp from 0
    over ``warmup_steps`` updates, constant afterwards."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return learning_rate
    return learning_rate * step / warmup_steps


def stratified_points(starts, ends, n, generator=None):
    """``n`` uniform draws per interval, one in each of ``n`` equal
    sub-intervals. Shapes: ``starts``/``ends`` (...,) -> (..., n)."""
    u = torch.rand((*starts.shape, n), generator=generator, dtype=DTYPE)
    frac = (torch.arange(n, dtype=DTYPE) + u) / n
    return starts[..., None] + (ends - starts)[..., None] * frac


def mc_compensator(mu, eta, gamma, starts, ends, n_samples, generator=None):
    """Monte Carlo estimate of the total-intensity integral over a set of
    intervals.

    ``mu``/``eta``/``gamma`` are ``(..., U)`` intensity parameters for the
    intervals ``(starts, ends]`` of shape ``(...)``. Each interval contributes
    its length times the sample mean of the summed intensity.
    """
    return interval_integrals(mu, eta, gamma, starts, ends, n_samples, generator).sum()


def interval_integrals(mu, eta, gamma, starts, ends, n_samples, generator=None):
    """Per-interval Monte Carlo integrals, shape ``(...)``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    tau = stratified_points(starts, ends, n_samples, generator)  # (..., n)
    elapsed = (tau - starts[..., None])[..., None]  # (..., n, 1)
    lam = decaying_intensity(mu[..., None, :], eta[..., None, :], gamma[..., None, :], elapsed)
    return (ends - starts) * lam.sum(-1).mean(-1)


def nll_from_states(states: IntensityStates, types, times, lengths, horizons, n_samples, generator=None):
    """Per-sequence NLL over the window after each sequence's first event.

    Returns ``(nll, counted)`` where ``nll`` is a ``(B,)`` tensor and
    ``counted`` the number of log-intensity terms per sequence.
    """
    B, L = types.shape
    rows = torch.arange(L)
    valid = rows[None, :] < lengths[:, None]  # (B, L)
    # intervals: row r spans (t_r, t_{r+1}] or (t_last, horizon]
    nxt = torch.cat([times[:, 1:], times[:, -1:]], dim=1)
    is_last = rows[None, :] == (lengths[:, None] - 1)
    ends = torch.where(is_last, horizons[:, None].to(DTYPE), nxt)
    ends = torch.where(valid, ends, times)
    comp = interval_integrals(states.mu, states.eta, states.gamma, times, ends, n_samples, generator).sum(1)

    if L > 1:
        has_next = valid[:, 1:]  # event r+1 exists
        nxt_type = types[:, 1:]
        elapsed = (times[:, 1:] - times[:, :-1])
        pick = lambda x: x[:, :-1].gather(2, nxt_type[..., None]).squeeze(-1)  # noqa: E731
        lam = decaying_intensity(pick(states.mu), pick(states.eta), pick(states.gamma), elapsed)
        log_lam = torch.where(has_next, torch.log(torch.where(has_next, lam, torch.ones_like(lam))), 0.0)
        event_term = log_lam.sum(1)
    else:
        event_term = torch.zeros(B, dtype=DTYPE)
    counted = torch.clamp(lengths - 1, min=0)
    return comp - event_term, counted


def sequence_nll(model, seq, n_samples=10, generator=None, dropout_generator=None) -> torch.Tensor:
    """Negative log-likelihood of one sequence; the first event is treated as
    given history. ``model`` maps padded ``(types, times)`` to
    ``IntensityStates``."""
    if len(seq) < 1:
        raise ValueError("sequence must contain at least one event")
    types, times, lengths, horizons = pad_batch([seq])
    states = model(types, times, dropout_generator)
    nll, _ = nll_from_states(states, types, times, lengths, horizons, n_samples, generator)
    if not torch.isfinite(nll).all():
        raise NumericalError("non-finite intensity in sequence likelihood")
    return nll[0]


def batch_nll(network, sequences, n_samples, generator=None, dropout_generator=None):
    types, times, lengths, horizons = pad_batch(sequences)
    states = network(types, times, dropout_generator)
    return nll_from_states(states, types, times, lengths, horizons, n_samples, generator)


def gradient(network: SAHPNetwork, sequences, n_samples=10, generator=None, dropout_generator=None):
    """Gradient of the summed sequence NLL with respect to every trainable
    tensor, by reverse-mode differentiation with the MC sample locations
    held fixed by ``generator``."""
    if not sequences:
        raise ValueError("batch must be non-empty")
    nll, _ = batch_nll(network, sequences, n_samples, generator, dropout_generator)
    params = dict(network.named_parameters())
    grads = torch.autograd.grad(nll.sum(), list(params.values()))
    out = dict(zip(params, grads))
    for name, g in out.items():
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}")
    return out


def _named_generators(seed):
    root = np.random.SeedSequence(seed)
    names = ("shuffle", "dropout", "mc", "val_mc")
    seeds = [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in root.spawn(len(names))]
    return dict(zip(names, seeds))


def _batches(n, batch_size, rng, lengths):
    """Shuffled batches with similar lengths grouped to limit padding."""
    order = rng.permutation(n)
    chunk = batch_size * 8
    batches = []
    for start in range(0, n, chunk):
        block = order[start : start + chunk]
        block = block[np.argsort(lengths[block], kind="stable")]
        batches.extend(block[i : i + batch_size] for i in range(0, len(block), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


@torch.no_grad()
def nll_per_event(network, sequences, n_samples=10, seed=0, batch_size=32) -> float:
    """Per-event NLL with dropout off and a fixed MC seed."""
    gen = torch.Generator().manual_seed(int(seed))
    total, events = 0.0, 0
    order = np.argsort([len(s) for s in sequences], kind="stable")
    for i in range(0, len(order), batch_size):
        batch = [sequences[j] for j in order[i : i + batch_size]]
        nll, counted = batch_nll(network, batch, n_samples, gen)
        total += float(nll.sum())
        events += int(counted.sum())
    return total / max(events, 1)


def train(network: SAHPNetwork, train_seqs, val_seqs, config: TrainConfig = TrainConfig(), callback=None):
    """Adam with linear warm-up and early stopping on validation NLL.

    Returns the network restored to its best-validation parameters and the
    per-epoch history (epoch 0 is the untrained model).
    """
    train_seqs = [s for s in train_seqs if len(s) >= 2]
    val_seqs = [s for s in val_seqs if len(s) >= 1]
    if not train_seqs or not val_seqs:
        raise ValueError("training and validation splits must be non-empty")
    seeds = _named_generators(config.seed)
    shuffle_rng = np.random.default_rng(seeds["shuffle"])
    dropout_gen = torch.Generator().manual_seed(seeds["dropout"])
    mc_gen = torch.Generator().manual_seed(seeds["mc"])
    lengths = np.array([len(s) for s in train_seqs])

    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
    started = time.perf_counter()
    history = []

    def record(epoch, step, train_nll, val_nll, lr):
        row = {
            "epoch": epoch, "step": step, "train_nll_per_event": train_nll,
            "val_nll_per_event": val_nll, "learning_rate": lr,
            "wall_time": time.perf_counter() - started,
        }
        history.append(row)
        logger.info("epoch %d step %d train %.5f val %.5f", epoch, step, train_nll, val_nll)
        if callback is not None:
            callback(row)

    network.eval()
    val0 = nll_per_event(network, val_seqs, config.mc_samples, seeds["val_mc"])
    record(0, 0, math.nan, val0, 0.0)

    best_val, reference, wait, step = None, None, 0, 0
    best_state = copy.deepcopy(network.state_dict())
    for epoch in range(1, config.max_epochs + 1):
        network.train()
        total, events = 0.0, 0
        for batch_idx in _batches(len(train_seqs), config.batch_size, shuffle_rng, lengths):
            batch = [train_seqs[i] for i in batch_idx]
            step += 1
            lr = warmup_rate(step, config.learning_rate, config.warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            nll, counted = batch_nll(network, batch, config.mc_samples, mc_gen, dropout_gen)
            if not torch.isfinite(nll).all():
                bad = int(batch_idx[int(torch.nonzero(~torch.isfinite(nll))[0])])
                raise NumericalError(f"non-finite loss at step {step}, training sequence {bad}")
            loss = nll.sum() / counted.sum()
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(network.parameters(), config.grad_clip)
            optimizer.step()
            total += float(nll.detach().sum())
            events += int(counted.sum())

        network.eval()
        val = nll_per_event(network, val_seqs, config.mc_samples, seeds["val_mc"])
        record(epoch, step, total / events, val, lr)
        if best_val is None or val < best_val:
            best_val = val
            best_state = copy.deepcopy(network.state_dict())
        if reference is None or val < reference - config.early_stop_delta:
            reference, wait = val, 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    network.load_state_dict(best_state)
    network.eval()
    return network, history


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
