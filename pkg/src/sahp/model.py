"""Self-attentive Hawkes network: event embeddings, time-shifted positional
encoding, masked multi-head attention and the per-interval intensity."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64
ENCODING_MODES = ("time_shifted", "conventional")


@dataclass(frozen=True)
class SAHPConfig:
    num_types: int
    model_dim: int = 16
    num_heads: int = 2
    num_layers: int = 2
    dropout: float = 0.1
    encoding: str = "time_shifted"
    scale_similarity: bool = False

    def __post_init__(self):
        if self.num_types < 1:
            raise ValueError("num_types must be >= 1")
        if self.model_dim < 2 or self.model_dim % 2:
            raise ValueError("model_dim must be even")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ValueError("num_heads must divide model_dim")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.encoding not in ENCODING_MODES:
            raise ValueError(f"encoding must be one of {ENCODING_MODES}")


@dataclass(frozen=True)
class IntensityState:
    """Parameters of one type's intensity on an inter-event interval."""

    mu: float
    eta: float
    gamma: float
    start: float


def softplus(x):
    return np.logaddexp(0.0, x)


def intensity_at(state: IntensityState, t):
    """``softplus(mu + (eta - mu) * exp(-gamma * (t - start)))`` for
    ``t >= start``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < state.start):
        raise ValueError("t precedes the interval start")
    # written as a convex blend so both limits are exact in floating point
    d = np.exp(-state.gamma * (t - state.start))
    out = softplus(state.eta * d + state.mu * (1.0 - d))
    return float(out) if out.ndim == 0 else out


def decaying_intensity(mu, eta, gamma, elapsed):
    """Torch version of :func:`intensity_at`; broadcasts over all arguments."""
    d = torch.exp(-gamma * elapsed)
    return F.softplus(eta * d + mu * (1.0 - d), threshold=30.0)


def angular_frequencies(model_dim: int) -> torch.Tensor:
    k = torch.arange(model_dim, dtype=DTYPE)
    return 1.0 / torch.pow(torch.tensor(10000.0, dtype=DTYPE), 2 * torch.div(k, 2, rounding_mode="floor") / model_dim)


def positional_encoding(omega, time_scale, position, t, encoding="time_shifted"):
    """Sinusoidal code of an event at ``position`` and timestamp ``t``.

    Dimension ``k`` has phase ``omega_k * position + time_scale_k * t``; even
    dimensions take the sine, odd ones the cosine. The conventional encoding
    drops the time term.
    """
    position = torch.as_tensor(position, dtype=DTYPE)[..., None]
    phase = omega * position
    if encoding == "time_shifted":
        phase = phase + time_scale * torch.as_tensor(t, dtype=DTYPE)[..., None]
    even = torch.arange(omega.shape[-1]) % 2 == 0
    return torch.where(even, torch.sin(phase), torch.cos(phase))


def _dropout(x, p, generator):
    if p == 0.0 or generator is None:
        return x
    drop = torch.rand(x.shape, generator=generator, dtype=torch.float32) < p
    return x.masked_fill(drop, 0.0) * (1.0 / (1.0 - p))


def masked_attention(q, k, v, mask, scale=False, dropout=0.0, generator=None):
    """Embedded-Gaussian attention: weights ``exp(q.k)`` normalised over the
    unmasked keys (softmax with masked scores set to -inf).

    Returns the mixed values and the weights.
    """
    scores = q @ k.transpose(-1, -2)
    if scale:
        scores = scores / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores.masked_fill(~mask, -math.inf), dim=-1)
    return _dropout(weights, dropout, generator) @ v, weights


class AttentionBlock(nn.Module):
    """Masked multi-head attention plus a position-wise feed-forward layer,
    each with a residual connection and post-layer normalisation.

    Every stream (the event history and the per-type queries) attends to
    keys and values computed from the history stream only.
    """

    def __init__(self, model_dim, num_heads, dropout=0.1, scale_similarity=False):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.dropout = dropout
        self.scale_similarity = scale_similarity
        self.query = nn.Linear(model_dim, model_dim, bias=False, dtype=DTYPE)
        self.key = nn.Linear(model_dim, model_dim, bias=False, dtype=DTYPE)
        self.value = nn.Linear(model_dim, model_dim, bias=False, dtype=DTYPE)
        self.output = nn.Linear(model_dim, model_dim, dtype=DTYPE)
        self.norm_attn = nn.LayerNorm(model_dim, dtype=DTYPE)
        self.hidden = nn.Linear(model_dim, 4 * model_dim, dtype=DTYPE)
        self.project = nn.Linear(4 * model_dim, model_dim, dtype=DTYPE)
        self.norm_ff = nn.LayerNorm(model_dim, dtype=DTYPE)

    def forward(self, streams, mask, generator=None, queries_only=False):
        # streams: (B, S, L, K); stream 0 is the history. mask: (L, L) bool.
        # With queries_only the history stream is not updated (last layer).
        hist = streams[:, 0]
        if queries_only:
            streams = streams[:, 1:]
        B, S, L, K = streams.shape
        H, d = self.num_heads, self.head_dim
        # all streams share keys, so fold them into the query axis
        q = self.query(streams).view(B, S * L, H, d).transpose(1, 2)
        k = self.key(hist).view(B, L, H, d).transpose(1, 2)
        v = self.value(hist).view(B, L, H, d).transpose(1, 2)
        mixed, weights = masked_attention(
            q, k, v, mask.repeat(S, 1), self.scale_similarity, self.dropout, generator
        )
        mixed = mixed.transpose(1, 2).reshape(B, S, L, K)
        weights = weights.view(B, H, S, L, L)
        x = self.norm_attn(streams + self.output(mixed))
        ff = self.project(F.gelu(self.hidden(x)))
        return self.norm_ff(x + _dropout(ff, self.dropout, generator)), weights


@dataclass
class IntensityStates:
    """Batched intensity parameters: row ``r`` of each ``(B, L, U)`` tensor
    governs the interval after the first ``r + 1`` events."""

    mu: torch.Tensor
    eta: torch.Tensor
    gamma: torch.Tensor
    attention: list | None = None

    def at(self, b: int, r: int, u: int, start: float) -> IntensityState:
        return IntensityState(
            float(self.mu[b, r, u]), float(self.eta[b, r, u]), float(self.gamma[b, r, u]), start
        )


class SAHPNetwork(nn.Module):
    def __init__(self, config: SAHPConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        U, K = config.num_types, config.model_dim
        omega = angular_frequencies(K)
        self.register_buffer("omega", omega)
        self.type_embedding = nn.Parameter(torch.empty(U, K, dtype=DTYPE))
        self.time_scale = nn.Parameter(omega.clone())
        self.layers = nn.ModuleList(
            AttentionBlock(K, config.num_heads, config.dropout, config.scale_similarity)
            for _ in range(config.num_layers)
        )
        self.w_mu = nn.Parameter(torch.empty(K, dtype=DTYPE))
        self.w_eta = nn.Parameter(torch.empty(K, dtype=DTYPE))
        self.w_gamma = nn.Parameter(torch.empty(K, dtype=DTYPE))
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator=None):
        K = self.config.model_dim

        def uniform_(t, bound):
            t.copy_((torch.rand(t.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)

        uniform_(self.type_embedding, 1.0)
        for layer in self.layers:
            for lin in (layer.query, layer.key, layer.value, layer.output, layer.hidden, layer.project):
                fan_in, fan_out = lin.weight.shape[1], lin.weight.shape[0]
                uniform_(lin.weight, math.sqrt(6.0 / (fan_in + fan_out)))
                if lin.bias is not None:
                    lin.bias.zero_()
            for norm in (layer.norm_attn, layer.norm_ff):
                norm.weight.fill_(1.0)
                norm.bias.zero_()
        for w in (self.w_mu, self.w_eta, self.w_gamma):
            uniform_(w, 1.0 / math.sqrt(K))

    def encode(self, positions, times):
        return positional_encoding(self.omega, self.time_scale, positions, times, self.config.encoding)

    def embed_event(self, v, position, t):
        if not 0 <= int(v) < self.config.num_types:
            raise ValueError(f"event type {v} out of range")
        return self.type_embedding[int(v)] + self.encode(position, t)

    def heads(self, h):
        """Intensity parameters ``(mu, eta, gamma)`` from hidden vectors."""
        return F.gelu(h @ self.w_mu), F.gelu(h @ self.w_eta), F.softplus(h @ self.w_gamma)

    def forward(self, types, times, generator=None, return_attention=False) -> IntensityStates:
        """Intensity parameters for every prefix of a padded batch.

        ``types`` and ``times`` are ``(B, L)``. For prefix length ``r + 1`` the
        type-``u`` query is ``embedding[u] + pe(r + 2, times[r])`` and it may
        attend to events ``0..r`` only. Padding must sit at the end of each
        row; the causal mask keeps it out of every valid row. Dropout is
        applied only when ``generator`` is given.
        """
        types = torch.as_tensor(types)
        times = torch.as_tensor(times, dtype=DTYPE)
        B, L = types.shape
        U = self.config.num_types
        pos = torch.arange(1, L + 1, dtype=DTYPE).expand(B, L)
        history = self.type_embedding[types] + self.encode(pos, times)
        queries = self.type_embedding[None, :, None, :] + self.encode(pos + 1, times)[:, None]
        streams = torch.cat([history[:, None], queries.expand(B, U, L, -1)], dim=1)
        mask = torch.ones(L, L, dtype=torch.bool).tril()
        attention = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            streams, weights = layer(streams, mask, generator, queries_only=i == last)
            if return_attention:
                attention.append(weights if i == last else weights[:, :, 1:])
        h = streams.transpose(1, 2)  # (B, L, U, K)
        mu, eta, gamma = self.heads(h)
        return IntensityStates(mu, eta, gamma, attention if return_attention else None)

    def encode_history(self, types, times, query, generator=None):
        """Hidden vector for an arbitrary query vector attending to a whole
        (unpadded) history given as 1-d ``types``/``times``."""
        types = torch.as_tensor(types)
        times = torch.as_tensor(times, dtype=DTYPE)
        if types.numel() == 0:
            raise ValueError("history must contain at least one event")
        L = types.shape[0]
        pos = torch.arange(1, L + 1, dtype=DTYPE)
        history = self.type_embedding[types] + self.encode(pos, times)
        # the free query sits at the last row so it sees the whole history
        q_row = history.clone()
        q_row[-1] = torch.as_tensor(query, dtype=DTYPE)
        streams = torch.stack([history, q_row])[None]
        mask = torch.ones(L, L, dtype=torch.bool).tril()
        for layer in self.layers:
            streams, _ = layer(streams, mask, generator)
        return streams[0, 1, -1]

    @torch.no_grad()
    def intensity_params(self, h, start=0.0) -> IntensityState:
        mu, eta, gamma = self.heads(torch.as_tensor(h, dtype=DTYPE))
        return IntensityState(float(mu), float(eta), float(gamma), float(start))

    @torch.no_grad()
    def all_type_intensity_states(self, types, times) -> list[IntensityState]:
        """One state per type for the interval after the whole given prefix."""
        types = torch.tensor(np.asarray(types, dtype=np.int64)).reshape(1, -1)
        times = torch.tensor(np.asarray(times, dtype=np.float64)).reshape(1, -1)
        if types.shape[1] == 0:
            raise ValueError("prefix must contain at least one event")
        states = self(types, times)
        r = types.shape[1] - 1
        start = float(times[0, r])
        return [states.at(0, r, u, start) for u in range(self.config.num_types)]

    def parameter_arrays(self) -> dict:
        return {name: p.detach().cpu().numpy().copy() for name, p in self.named_parameters()}


def pad_batch(sequences):
    """Right-padded ``types``/``times`` tensors plus lengths and horizons.
    Padded times repeat the last event time."""
    L = max((len(s) for s in sequences), default=0)
    B = len(sequences)
    types = np.zeros((B, L), dtype=np.int64)
    times = np.zeros((B, L))
    for b, s in enumerate(sequences):
        n = len(s)
        types[b, :n] = s.types
        times[b, :n] = s.times
        if n:
            times[b, n:] = s.times[-1]
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    horizons = np.array([s.horizon for s in sequences])
    return (torch.from_numpy(types), torch.from_numpy(times),
            torch.from_numpy(lengths), torch.from_numpy(horizons))


# -- checkpoints -------------------------------------------------------------

_MANIFEST = "__manifest__"


def save_checkpoint(network: SAHPNetwork, path, extra: dict | None = None) -> None:
    """Write an ``.npz`` container: one float64 array per trainable tensor
    plus a JSON manifest with the config and array names/shapes/dtypes."""
    arrays = network.parameter_arrays()
    manifest = {
        "format": "sahp-checkpoint/1",
        "config": asdict(network.config),
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()],
        "extra": extra or {},
    }
    arrays[_MANIFEST] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[SAHPNetwork, dict]:
    with np.load(Path(path), allow_pickle=False) as npz:
        manifest = json.loads(npz[_MANIFEST].tobytes().decode("utf-8"))
        config = SAHPConfig(**manifest["config"])
        network = SAHPNetwork(config)
        state = {}
        for entry in manifest["tensors"]:
            arr = npz[entry["name"]]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"shape mismatch for {entry['name']}")
            state[entry["name"]] = torch.from_numpy(arr.copy())
    missing = set(dict(network.named_parameters())) - set(state)
    if missing:
        raise ValueError(f"checkpoint is missing tensors {sorted(missing)}")
    with torch.no_grad():
        for name, p in network.named_parameters():
            p.copy_(state[name])
    return network, manifest.get("extra", {})
