"""Multivariate Hawkes ground truth: parametric kernels and Ogata thinning."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, Sequence


# -- kernels ---------------------------------------------------------------

@dataclass(frozen=True)
class Exponential:
    alpha: float
    gamma: float

    def __post_init__(self):
        if not (self.alpha >= 0 and self.gamma > 0):
            raise ValueError("Exponential kernel needs alpha >= 0 and gamma > 0")

    def _value(self, t):
        return self.alpha * np.exp(-self.gamma * t)

    _sup = _value

    def integral(self):
        return self.alpha / self.gamma


@dataclass(frozen=True)
class PowerLaw:
    """``scale * (offset + t) ** -exponent``."""

    scale: float
    offset: float
    exponent: float

    def __post_init__(self):
        if not (self.scale >= 0 and self.offset > 0 and self.exponent > 0):
            raise ValueError("PowerLaw kernel needs scale >= 0, offset > 0, exponent > 0")

    def _value(self, t):
        return self.scale * np.power(self.offset + t, -self.exponent)

    _sup = _value

    def integral(self):
        if self.exponent <= 1:
            return math.inf
        return self.scale * self.offset ** (1 - self.exponent) / (self.exponent - 1)


@dataclass(frozen=True)
class SumExponential:
    terms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        terms = tuple((float(a), float(g)) for a, g in self.terms)
        for a, g in terms:
            if not (a >= 0 and g > 0):
                raise ValueError("SumExponential terms need alpha >= 0 and gamma > 0")
        object.__setattr__(self, "terms", terms)

    def _value(self, t):
        out = np.zeros_like(t)
        for a, g in self.terms:
            out = out + a * np.exp(-g * t)
        return out

    _sup = _value

    def integral(self):
        return sum(a / g for a, g in self.terms)


@dataclass(frozen=True)
class BoundedSine:
    """``max(0, sin(t) / divisor)`` on ``[0, support]``, zero afterwards."""

    divisor: float
    support: float

    def __post_init__(self):
        if not (self.divisor > 0 and self.support > 0):
            raise ValueError("BoundedSine kernel needs divisor > 0 and support > 0")

    def _value(self, t):
        return np.where(t <= self.support, np.maximum(0.0, np.sin(t) / self.divisor), 0.0)

    def _sup(self, delta):
        hi = self.support
        # first sine crest at or after delta
        crest = np.pi / 2 + 2 * np.pi * np.ceil((delta - np.pi / 2) / (2 * np.pi))
        peak = np.where(crest <= hi, 1.0, np.maximum(np.sin(delta), np.sin(hi)))
        return np.where(delta > hi, 0.0, np.maximum(0.0, peak) / self.divisor)

    def integral(self):
        # positive half-waves of sin on [0, support]
        full, rest = divmod(self.support, 2 * math.pi)
        return (2 * full + (1 - math.cos(min(rest, math.pi)))) / self.divisor


@dataclass(frozen=True)
class Zero:
    def _value(self, t):
        return np.zeros_like(t)

    _sup = _value

    def integral(self):
        return 0.0


KernelSpec = Exponential | PowerLaw | SumExponential | BoundedSine | Zero

_KINDS = {
    "exponential": Exponential,
    "power_law": PowerLaw,
    "sum_exponential": SumExponential,
    "bounded_sine": BoundedSine,
    "zero": Zero,
}


def kernel_eval(spec: KernelSpec, t):
    """Kernel value at lag ``t`` (scalar or array); zero for negative lags."""
    arr = np.asarray(t, dtype=np.float64)
    pos = arr >= 0
    out = np.where(pos, spec._value(np.where(pos, arr, 0.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def kernel_sup_tail(spec: KernelSpec, delta: float) -> float:
    """``sup_{t >= delta} kernel(t)``; used as the thinning bound."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    return float(spec._sup(np.float64(delta)))


def kernel_to_dict(spec: KernelSpec) -> dict:
    kind = next(k for k, cls in _KINDS.items() if isinstance(spec, cls))
    out = {"kind": kind}
    if isinstance(spec, SumExponential):
        out["terms"] = [list(t) for t in spec.terms]
    elif not isinstance(spec, Zero):
        out.update(spec.__dict__)
    return out


def kernel_from_dict(obj: dict) -> KernelSpec:
    obj = dict(obj)
    try:
        cls = _KINDS[obj.pop("kind")]
    except KeyError as exc:
        raise ValueError(f"unknown or missing kernel kind in {obj!r}") from exc
    return cls(**obj)


# -- process definition ----------------------------------------------------

@dataclass(frozen=True)
class HawkesSpec:
    """Ground-truth multivariate Hawkes process.

    ``kernels[u][v]`` is the effect of a past type-``v`` event on the type-``u``
    intensity.
    """

    base: tuple[float, ...]
    kernels: tuple[tuple[KernelSpec, ...], ...]
    num_types: int = field(init=False)

    def __post_init__(self):
        base = tuple(float(b) for b in self.base)
        kernels = tuple(tuple(row) for row in self.kernels)
        U = len(base)
        if U < 1:
            raise ValueError("at least one event type is required")
        if any(not (math.isfinite(b) and b >= 0) for b in base):
            raise ValueError("base intensities must be finite and >= 0")
        if len(kernels) != U or any(len(row) != U for row in kernels):
            raise ValueError(f"kernels must be a {U}x{U} matrix")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "num_types", U)

    def branching_matrix(self) -> np.ndarray:
        return np.array([[k.integral() for k in row] for row in self.kernels])

    def stationary_rates(self) -> np.ndarray:
        """Long-run per-type event rates ``(I - G)^-1 mu`` (subcritical only)."""
        G = self.branching_matrix()
        return np.linalg.solve(np.eye(self.num_types) - G, np.array(self.base))

    def to_dict(self) -> dict:
        return {
            "num_types": self.num_types,
            "base": list(self.base),
            "kernels": [[kernel_to_dict(k) for k in row] for row in self.kernels],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "HawkesSpec":
        spec = cls(obj["base"], [[kernel_from_dict(k) for k in row] for row in obj["kernels"]])
        if "num_types" in obj and int(obj["num_types"]) != spec.num_types:
            raise ValueError("num_types does not match the base vector length")
        return spec


def save_spec(spec: HawkesSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_spec(path) -> HawkesSpec:
    return HawkesSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def synthetic_spec() -> HawkesSpec:
    """The two-type benchmark process (power-law, exponential, two-term
    exponential and bounded-sine kernels)."""
    return HawkesSpec(
        base=(0.1, 0.2),
        kernels=(
            (PowerLaw(0.2, 0.5, 1.3), Exponential(0.03, 0.3)),
            (SumExponential(((0.05, 0.2), (0.16, 0.8))), BoundedSine(8.0, 4.0)),
        ),
    )


# -- intensities -----------------------------------------------------------

def _history_arrays(history):
    if isinstance(history, Sequence):
        return history.types, history.times
    types = np.array([e[0] if not hasattr(e, "type_id") else e.type_id for e in history], dtype=np.int64)
    times = np.array([e[1] if not hasattr(e, "time") else e.time for e in history], dtype=np.float64)
    return types, times


def _excitation(spec: HawkesSpec, u: int, types, times, t: float) -> float:
    total = 0.0
    for v in range(spec.num_types):
        lags = t - times[types == v]
        if lags.size:
            total += float(np.sum(kernel_eval(spec.kernels[u][v], lags)))
    return total


def true_intensity(spec: HawkesSpec, history, t: float, u: int) -> float:
    """Intensity of type ``u`` at ``t`` given events strictly before ``t``."""
    types, times = _history_arrays(history)
    if times.size and not np.all(times < t):
        raise ValueError("history must lie strictly before t")
    return spec.base[u] + _excitation(spec, u, types, times, t)


def intensity_trace(spec: HawkesSpec, seq: Sequence, grid) -> np.ndarray:
    """``(U, len(grid))`` intensities, each using only events strictly before
    the grid time (left limits at event times)."""
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted")
    if grid.size and (grid[0] < 0 or grid[-1] > seq.horizon):
        raise ValueError("grid must lie within [0, horizon]")
    out = np.empty((spec.num_types, grid.size))
    out[:] = np.asarray(spec.base)[:, None]
    # lag matrix restricted to strictly earlier events
    lags = grid[:, None] - seq.times[None, :]
    for u in range(spec.num_types):
        for v in range(spec.num_types):
            cols = seq.types == v
            if not np.any(cols):
                continue
            lv = lags[:, cols]
            vals = np.where(lv > 0, kernel_eval(spec.kernels[u][v], np.where(lv > 0, lv, -1.0)), 0.0)
            out[u] += vals.sum(axis=1)
    return out


def write_trace_csv(path, grid, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time"] + [f"lambda_{u}" for u in range(trace.shape[0])])
        for k, t in enumerate(grid):
            writer.writerow([repr(float(t))] + [repr(float(x)) for x in trace[:, k]])


# -- simulation ------------------------------------------------------------

def simulate_thinning(spec: HawkesSpec, horizon: float, seed) -> Sequence:
    """Draw one realisation on ``(0, horizon]`` by Ogata's modified thinning.

    The dominating rate at the current time ``s`` is the sum over types of
    the base rate plus each past event's kernel supremum over the remaining
    lag range, so it stays valid for non-monotone kernels.
    """
    if not horizon > 0:
        raise ValueError("horizon must be > 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = spec.num_types
    base = np.asarray(spec.base)
    types: list[int] = []
    times: list[float] = []
    # per past-type arrays of event times, kept as python lists for appends
    by_type = [[] for _ in range(U)]
    active = [[(u, spec.kernels[u][v]) for u in range(U) if not isinstance(spec.kernels[u][v], Zero)]
              for v in range(U)]
    s = 0.0
    while True:
        bound = float(base.sum())
        for v in range(U):
            if by_type[v] and active[v]:
                lags = s - np.asarray(by_type[v])
                for _, k in active[v]:
                    bound += float(np.sum(k._sup(lags)))
        if bound <= 0:
            break
        s += rng.exponential(1.0 / bound)
        if s > horizon:
            break
        lam = base.copy()
        for v in range(U):
            if by_type[v] and active[v]:
                lags = s - np.asarray(by_type[v])
                for u, k in active[v]:
                    lam[u] += float(np.sum(k._value(lags)))
        total = float(lam.sum())
        if rng.uniform() * bound <= total and total > 0:
            u = int(rng.choice(U, p=lam / total)) if U > 1 else 0
            types.append(u)
            times.append(s)
            by_type[u].append(s)
    return Sequence(np.array(types, dtype=np.int64), np.array(times, dtype=np.float64), horizon)


def simulate_dataset(spec: HawkesSpec, horizon: float, n_sequences: int, seed: int) -> Dataset:
    """Independent sequences, one child seed per sequence."""
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    seqs = [simulate_thinning(spec, horizon, np.random.default_rng(c)) for c in children]
    return Dataset(spec.num_types, seqs)
