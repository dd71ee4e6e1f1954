"""Scikit-learn style wrapper around the self-attentive Hawkes network."""
from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .data import Dataset, Sequence
from .model import SAHPConfig, SAHPNetwork, load_checkpoint, pad_batch, save_checkpoint, softplus
from .training import TrainConfig, nll_per_event, train
from .validation import check_is_fitted, check_random_state_seed, check_sequences

# Per-type event rate, in model time units, targeted by time_unit="auto".
AUTO_TARGET_RATE = 5.0


def auto_time_unit(sequences, num_types) -> float:
    """Time unit that puts the average per-type event rate at
    ``AUTO_TARGET_RATE`` events per model time unit."""
    events = sum(len(s) for s in sequences)
    span = sum(s.horizon for s in sequences)
    if events == 0 or span <= 0:
        return 1.0
    return AUTO_TARGET_RATE * num_types * span / events


def rescale(seq: Sequence, unit: float) -> Sequence:
    return Sequence(seq.types, seq.times / unit, seq.horizon / unit)


class SAHPIntensity:
    """Per-type intensities of a trained network on one sequence, in data
    time units."""

    def __init__(self, mu, eta, gamma, seq: Sequence, unit: float):
        self.mu, self.eta, self.gamma = mu, eta, gamma  # (L, U), model units
        self.seq = seq
        self.unit = unit
        self.num_types = mu.shape[1]

    def interval_start(self, k: int) -> float:
        return float(self.seq.times[k - 1])

    def __call__(self, k: int, t) -> np.ndarray:
        if not 1 <= k <= len(self.seq):
            raise IndexError(f"interval {k} out of range")
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        elapsed = (t - self.seq.times[k - 1]) / self.unit
        r = k - 1
        mu, eta, gamma = self.mu[r][:, None], self.eta[r][:, None], self.gamma[r][:, None]
        d = np.exp(-gamma * elapsed)
        return softplus(eta * d + mu * (1.0 - d)) / self.unit


class SAHP(BaseEstimator):
    """Self-attentive Hawkes process.

    Network hyper-parameters mirror ``SAHPConfig`` and optimisation settings
    mirror ``TrainConfig``. ``time_unit`` divides every timestamp before it
    reaches the network ("auto" derives it from the training data);
    intensities and likelihoods are always reported in the data's own units.
    ``random_state`` seeds initialisation, shuffling, dropout and Monte Carlo
    draws through independent sub-streams.
    """

    def __init__(self, num_types=None, model_dim=16, num_heads=2, num_layers=2, dropout=0.1,
                 encoding="time_shifted", scale_similarity=False, time_unit="auto",
                 learning_rate=1e-4, warmup_steps=500, batch_size=16, max_epochs=100,
                 early_stop_delta=1e-3, patience=5, mc_samples=10, random_state=0):
        self.num_types = num_types
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.num_layers = num_layers
        self.dropout = dropout
        self.encoding = encoding
        self.scale_similarity = scale_similarity
        self.time_unit = time_unit
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_delta = early_stop_delta
        self.patience = patience
        self.mc_samples = mc_samples
        self.random_state = random_state

    # -- configuration -------------------------------------------------------

    def _model_config(self, U) -> SAHPConfig:
        return SAHPConfig(U, self.model_dim, self.num_heads, self.num_layers, self.dropout,
                          self.encoding, self.scale_similarity)

    def _seeds(self):
        init, fit = check_random_state_seed(self.random_state).spawn(2)
        return int(init.generate_state(1)[0]), int(fit.generate_state(1)[0])

    def _resolve_unit(self, sequences, U) -> float:
        if self.time_unit == "auto":
            return auto_time_unit(sequences, U)
        unit = float(self.time_unit)
        if not (unit > 0 and math.isfinite(unit)):
            raise ValueError("time_unit must be a positive number or 'auto'")
        return unit

    # -- fitting ---------------------------------------------------------------

    def fit(self, X, y=None, validation=None, callback=None):
        """Train on ``X``. Validation data is ``validation`` when given,
        otherwise the ``val`` split of a split ``Dataset``."""
        if validation is None:
            if not (isinstance(X, Dataset) and X.splits is not None):
                raise ValueError("validation data required: pass validation= or a split Dataset")
            train_seqs, U = check_sequences(X, self.num_types, split="train")
            val_seqs, _ = check_sequences(X, U, split="val")
        else:
            train_seqs, U = check_sequences(X, self.num_types)
            val_seqs, _ = check_sequences(validation, U)
        if not train_seqs or not val_seqs:
            raise ValueError("training and validation splits must be non-empty")
        unit = self._resolve_unit(train_seqs, U)
        init_seed, fit_seed = self._seeds()
        network = SAHPNetwork(self._model_config(U), torch.Generator().manual_seed(init_seed))
        config = TrainConfig(self.learning_rate, self.warmup_steps, self.batch_size, self.max_epochs,
                             self.early_stop_delta, self.patience, self.mc_samples, fit_seed)
        offset = math.log(unit)

        def to_data_units(row):
            # per-event NLL shifts by log(unit) under the time change
            out = dict(row)
            for key in ("train_nll_per_event", "val_nll_per_event"):
                out[key] = row[key] + offset
            return out

        history = []

        def record(row):
            history.append(to_data_units(row))
            if callback is not None:
                callback(history[-1])

        network, _ = train(network, [rescale(s, unit) for s in train_seqs],
                           [rescale(s, unit) for s in val_seqs], config, record)
        self.network_ = network
        self.num_types_ = U
        self.time_unit_ = unit
        self.history_ = history
        return self

    # -- inference -------------------------------------------------------------

    @torch.no_grad()
    def _states(self, seq: Sequence, return_attention=False):
        check_is_fitted(self, "network_")
        if len(seq) == 0:
            raise ValueError("sequence must contain at least one event")
        s = rescale(seq, self.time_unit_)
        types, times, _, _ = pad_batch([s])
        self.network_.eval()
        return self.network_(types, times, return_attention=return_attention)

    def bind(self, seq: Sequence) -> SAHPIntensity:
        st = self._states(seq)
        return SAHPIntensity(st.mu[0].numpy(), st.eta[0].numpy(), st.gamma[0].numpy(), seq, self.time_unit_)

    def intensity_states(self, seq: Sequence):
        """Per-type ``IntensityState`` objects (model units) for the interval
        after the last event of ``seq``."""
        check_is_fitted(self, "network_")
        s = rescale(seq, self.time_unit_)
        return self.network_.all_type_intensity_states(s.types, s.times)

    def attention_weights(self, seq: Sequence) -> np.ndarray:
        """``(L, U, L)`` attention of each per-type query row to history
        events, averaged over layers and heads."""
        st = self._states(seq, return_attention=True)
        stacked = torch.stack([w[0] for w in st.attention])  # (layers, H, U, L, L)
        return stacked.mean(dim=(0, 1)).permute(1, 0, 2).numpy()

    def predict(self, X, **quadrature):
        """Next-event prediction after the last event of each sequence."""
        from .evaluation import predict_next

        check_is_fitted(self, "network_")
        sequences, _ = check_sequences(X, self.num_types_)
        return [predict_next(self, s, **quadrature) for s in sequences]

    def nll_per_event(self, X, n_mc=None, seed=0) -> float:
        """Monte Carlo per-event NLL in data units (first event of each
        sequence taken as given)."""
        check_is_fitted(self, "network_")
        sequences, _ = check_sequences(X, self.num_types_)
        n = self.mc_samples if n_mc is None else n_mc
        scaled = [rescale(s, self.time_unit_) for s in sequences if len(s) >= 1]
        return nll_per_event(self.network_, scaled, n, seed) + math.log(self.time_unit_)

    def score(self, X, y=None) -> float:
        """Mean log-likelihood per event."""
        return -self.nll_per_event(X)

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "network_")
        params = {k: v for k, v in self.get_params().items()}
        save_checkpoint(self.network_, path, {"time_unit": self.time_unit_, "estimator": params})

    @classmethod
    def load(cls, path) -> "SAHP":
        network, extra = load_checkpoint(path)
        est = cls(**extra.get("estimator", {}))
        est.network_ = network
        est.num_types_ = network.config.num_types
        est.time_unit_ = float(extra.get("time_unit", 1.0))
        est.history_ = []
        return est
