"""Exponential-kernel multivariate Hawkes baseline with closed-form likelihood."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from .data import Sequence
from .validation import check_sequences, check_is_fitted


class InfeasibleParametersError(ValueError):
    """Intensity is non-positive at an observed event."""


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient during optimisation."""


@dataclass(frozen=True)
class HawkesParams:
    """``excitation[u, v]`` and ``decay[u, v]`` describe the effect of a past
    type-``v`` event on type ``u``."""

    base: np.ndarray
    excitation: np.ndarray
    decay: np.ndarray

    def __post_init__(self):
        base = np.array(self.base, dtype=np.float64).reshape(-1)
        U = base.size
        exc = np.array(self.excitation, dtype=np.float64).reshape(U, U)
        dec = np.array(self.decay, dtype=np.float64).reshape(U, U)
        if not (np.all(np.isfinite(base)) and np.all(np.isfinite(exc)) and np.all(np.isfinite(dec))):
            raise ValueError("Hawkes parameters must be finite")
        if np.any(base < 0) or np.any(exc < 0):
            raise ValueError("base and excitation must be non-negative")
        if np.any(dec <= 0):
            raise ValueError("decay must be strictly positive")
        for name, arr in (("base", base), ("excitation", exc), ("decay", dec)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_types(self) -> int:
        return self.base.size

    def to_dict(self) -> dict:
        return {
            "num_types": self.num_types,
            "base": self.base.tolist(),
            "excitation": self.excitation.tolist(),
            "decay": self.decay.tolist(),
        }

    @classmethod
    def from_dict(cls, obj) -> "HawkesParams":
        return cls(obj["base"], obj["excitation"], obj["decay"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "HawkesParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def hp_intensity(params: HawkesParams, history, t: float, u: int) -> float:
    if isinstance(history, Sequence):
        types, times = history.types, history.times
    else:
        types = np.array([e.type_id for e in history], dtype=np.int64)
        times = np.array([e.time for e in history], dtype=np.float64)
    if times.size and not np.all(times < t):
        raise ValueError("history must lie strictly before t")
    a = params.excitation[u, types]
    g = params.decay[u, types]
    return float(params.base[u] + np.sum(a * np.exp(-g * (t - times))))


def _pad(sequences):
    N = len(sequences)
    L = max((len(s) for s in sequences), default=0)
    types = np.zeros((N, L), dtype=np.int64)
    times = np.zeros((N, L))
    mask = np.zeros((N, L), dtype=bool)
    for n, s in enumerate(sequences):
        types[n, : len(s)] = s.types
        times[n, : len(s)] = s.times
        if len(s):
            times[n, len(s):] = s.times[-1]  # zero gaps past the end
        mask[n, : len(s)] = True
    horizon = np.array([s.horizon for s in sequences])
    return types, times, mask, horizon


def _loglik_terms(params: HawkesParams, sequences, skip_first=False, with_grad=False):
    """Per-sequence log-likelihoods and (optionally) the gradient of their sum
    with respect to (base, excitation, decay).

    Runs the usual exponential-kernel recursion over event positions,
    vectorised across sequences.
    """
    mu, alpha, gamma = params.base, params.excitation, params.decay
    U = mu.size
    types, times, mask, horizon = _pad(sequences)
    N, L = types.shape
    eye = np.eye(U)

    loglik = np.zeros(N)
    g_mu = np.zeros(U)
    g_alpha = np.zeros((U, U))
    g_gamma = np.zeros((U, U))

    R = np.zeros((N, U, U))  # sum_j exp(-gamma_uv (t_k - t_j)) over past type-v events
    D = np.zeros((N, U, U))  # its derivative with respect to gamma_uv
    for k in range(L):
        m = mask[:, k]
        if k > 0:
            dt = (times[:, k] - times[:, k - 1])[:, None, None]
            S = R + eye[types[:, k - 1]][:, None, :]
            decay = np.exp(-gamma[None] * dt)
            R = decay * S
            D = decay * (D - dt * S)
        if k == 0 and skip_first:
            continue
        v = types[:, k]
        Rv = R[np.arange(N), v]  # (N, U) over source types
        lam = mu[v] + np.einsum("nw,nw->n", alpha[v], Rv)
        if np.any(m & ~(lam > 0)):
            n_bad = int(np.flatnonzero(m & ~(lam > 0))[0])
            raise InfeasibleParametersError(
                f"non-positive intensity at event {k} of sequence {n_bad}"
            )
        lam = np.where(m, lam, 1.0)
        loglik += np.where(m, np.log(lam), 0.0)
        if with_grad:
            w = np.where(m, 1.0 / lam, 0.0)
            np.add.at(g_mu, v, w)
            np.add.at(g_alpha, v, w[:, None] * Rv)
            Dv = D[np.arange(N), v]
            np.add.at(g_gamma, v, w[:, None] * alpha[v] * Dv)

    # compensator, closed form
    n_events = mask.sum(axis=1)
    first = times[:, 0] if times.shape[1] else np.zeros(len(horizon))
    start = np.where(skip_first & (n_events > 0), first, 0.0)
    if skip_first:
        span = np.where(n_events > 0, horizon - start, 0.0)
    else:
        span = horizon
    comp = span * mu.sum()
    rem = np.where(mask, horizon[:, None] - times, 0.0)  # (N, L)
    A = alpha[:, types]  # (U, N, L)
    G = gamma[:, types]
    E = np.exp(-G * rem[None])
    one_minus = np.where(mask[None], 1.0 - E, 0.0)
    comp = comp + np.sum(A / G * one_minus, axis=(0, 2))
    loglik -= comp

    if not with_grad:
        return loglik
    g_mu -= span.sum()
    dA = one_minus / G  # d comp / d alpha per (u, n, j)
    dG = np.where(mask[None], A * (-(1.0 - E) / G**2 + rem[None] * E / G), 0.0)
    for v in range(U):
        sel = (types == v) & mask
        g_alpha[:, v] -= dA[:, sel].sum(axis=1)
        g_gamma[:, v] -= dG[:, sel].sum(axis=1)
    return loglik, (g_mu, g_alpha, g_gamma)


def hp_compensator(params: HawkesParams, seq: Sequence) -> float:
    """Integral of the total intensity over ``[0, horizon]``."""
    T = seq.horizon
    a = params.excitation[:, seq.types]
    g = params.decay[:, seq.types]
    return float(params.base.sum() * T + np.sum(a / g * (1.0 - np.exp(-g * (T - seq.times)))))


def hp_loglik(params: HawkesParams, seq: Sequence, skip_first: bool = False) -> float:
    """Exact log-likelihood of ``seq``.

    With ``skip_first`` the first event is treated as given history: its
    log-intensity and the compensator before it are left out.
    """
    return float(_loglik_terms(params, [seq], skip_first=skip_first)[0])


def hp_loglik_grad(params: HawkesParams, sequences, skip_first: bool = False):
    """Total log-likelihood and its gradient with respect to the log
    parameters ``(log base, log excitation, log decay)``."""
    if isinstance(sequences, Sequence):
        sequences = [sequences]
    ll, (g_mu, g_alpha, g_gamma) = _loglik_terms(params, sequences, skip_first, with_grad=True)
    return float(ll.sum()), (g_mu * params.base, g_alpha * params.excitation, g_gamma * params.decay)


def counted_events(sequences, skip_first=False) -> int:
    return sum(max(len(s) - 1, 0) if skip_first else len(s) for s in sequences)


@dataclass
class FitResult:
    params: HawkesParams
    nll: float
    n_iter: int
    converged: bool
    history: list  # (iteration, per-event NLL)


def hp_fit(sequences, init: HawkesParams, max_iter=1000, tol=1e-6, shared_decay=False) -> FitResult:
    """Maximum likelihood in log-parameter space with L-BFGS and exact
    gradients. The objective is the per-event negative log-likelihood."""
    sequences = [s for s in sequences]
    if not sequences:
        raise ValueError("no training sequences")
    if not isinstance(init, HawkesParams):
        raise TypeError("init must be HawkesParams")
    U = init.num_types
    n_ev = max(counted_events(sequences), 1)
    floor = 1e-12  # keep log() finite for zero initial entries

    def unpack(z):
        log_mu = z[:U]
        log_a = z[U : U + U * U].reshape(U, U)
        if shared_decay:
            log_g = np.full((U, U), z[-1])
        else:
            log_g = z[U + U * U :].reshape(U, U)
        return HawkesParams(np.exp(log_mu), np.exp(log_a), np.exp(log_g))

    def objective(z):
        with np.errstate(over="raise", invalid="raise"):
            try:
                p = unpack(z)
                ll, (gm, ga, gg) = hp_loglik_grad(p, sequences)
            except (FloatingPointError, ValueError) as exc:
                raise NumericalError(f"non-finite objective: {exc}") from exc
        gg_flat = np.array([gg.sum()]) if shared_decay else gg.ravel()
        grad = -np.concatenate([gm, ga.ravel(), gg_flat]) / n_ev
        f = -ll / n_ev
        if not (math.isfinite(f) and np.all(np.isfinite(grad))):
            raise NumericalError("non-finite loss or gradient during fitting")
        return f, grad

    z0 = [np.log(np.maximum(init.base, floor)), np.log(np.maximum(init.excitation, floor)).ravel()]
    if shared_decay:
        z0.append([np.log(init.decay).mean()])
    else:
        z0.append(np.log(init.decay).ravel())
    z0 = np.concatenate(z0)

    history = [(0, objective(z0)[0])]

    def callback(intermediate_result):
        history.append((len(history), float(intermediate_result.fun)))

    res = minimize(
        objective,
        z0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-10},
    )
    return FitResult(unpack(res.x), float(res.fun), int(res.nit), bool(res.success), history)


class HawkesIntensity:
    """Closed-form intensities of a fitted exponential Hawkes process on
    every inter-event interval of one sequence."""

    def __init__(self, params: HawkesParams, seq: Sequence):
        self.params = params
        self.seq = seq
        self.num_types = params.num_types
        U, L = params.num_types, len(seq)
        # carry[k-1, u, v]: kernel sums at t_k including the event at t_k
        carry = np.zeros((L, U, U))
        eye = np.eye(U)
        acc = np.zeros((U, U))
        for k in range(L):
            if k > 0:
                acc = acc * np.exp(-params.decay * (seq.times[k] - seq.times[k - 1]))
            acc = acc + eye[seq.types[k]][None, :]
            carry[k] = acc
        self._carry = carry

    def interval_start(self, k: int) -> float:
        return float(self.seq.times[k - 1])

    def __call__(self, k: int, t) -> np.ndarray:
        """``(U, len(t))`` intensities at times in the interval following the
        first ``k`` events."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        lag = t - self.seq.times[k - 1]
        p = self.params
        w = p.excitation * self._carry[k - 1]
        return p.base[:, None] + np.einsum("uv,uvn->un", w, np.exp(-p.decay[:, :, None] * lag))


class ExpHawkes(BaseEstimator):
    """Multivariate Hawkes process with exponential kernels, fitted by
    maximum likelihood.

    Parameters
    ----------
    num_types : int or None
        Number of event types; inferred from the data when None.
    init_base : float or None
        Starting base rate; None uses the average event count per type and
        unit time.
    init_excitation, init_decay : float
        Starting values for every excitation / decay entry.
    shared_decay : bool
        Fit a single decay rate shared by all type pairs.
    max_iter, tol : optimiser stopping rules (iterations, relative NLL change).

    Attributes
    ----------
    params_ : HawkesParams
    n_iter_ : int
    history_ : list of (iteration, per-event NLL)
    """

    def __init__(self, num_types=None, init_base=None, init_excitation=0.1, init_decay=1.0,
                 shared_decay=False, max_iter=1000, tol=1e-6):
        self.num_types = num_types
        self.init_base = init_base
        self.init_excitation = init_excitation
        self.init_decay = init_decay
        self.shared_decay = shared_decay
        self.max_iter = max_iter
        self.tol = tol

    def _initial_params(self, sequences, U):
        if self.init_decay is not None and self.init_decay <= 0:
            raise ValueError("init_decay must be > 0")
        if self.init_base is None:
            base = float(np.mean([len(s) / (U * s.horizon) for s in sequences]))
        else:
            base = float(self.init_base)
        return HawkesParams(
            np.full(U, base), np.full((U, U), float(self.init_excitation)),
            np.full((U, U), float(self.init_decay)),
        )

    def fit(self, X, y=None, init: HawkesParams | None = None):
        sequences, U = check_sequences(X, self.num_types)
        if not sequences:
            raise ValueError("empty training data")
        init = init if init is not None else self._initial_params(sequences, U)
        result = hp_fit(sequences, init, self.max_iter, self.tol, self.shared_decay)
        self.params_ = result.params
        self.n_iter_ = result.n_iter
        self.history_ = result.history
        self.converged_ = result.converged
        self.num_types_ = U
        return self

    def loglik(self, X, skip_first=False) -> np.ndarray:
        """Exact per-sequence log-likelihoods."""
        check_is_fitted(self, "params_")
        sequences, _ = check_sequences(X, self.num_types_)
        return _loglik_terms(self.params_, sequences, skip_first=skip_first)

    def score(self, X, y=None) -> float:
        """Mean log-likelihood per event."""
        sequences, _ = check_sequences(X, getattr(self, "num_types_", self.num_types))
        return float(self.loglik(sequences).sum() / max(counted_events(sequences), 1))

    def bind(self, seq: Sequence) -> HawkesIntensity:
        check_is_fitted(self, "params_")
        return HawkesIntensity(self.params_, seq)

    def predict(self, X, **quadrature):
        """Next-event prediction after the last event of each sequence."""
        from .evaluation import predict_next

        sequences, _ = check_sequences(X, self.num_types_)
        return [predict_next(self, s, **quadrature) for s in sequences]

    @classmethod
    def from_params(cls, params: HawkesParams, **kwargs) -> "ExpHawkes":
        est = cls(num_types=params.num_types, **kwargs)
        est.params_ = params
        est.num_types_ = params.num_types
        est.n_iter_ = 0
        est.history_ = []
        est.converged_ = True
        return est
