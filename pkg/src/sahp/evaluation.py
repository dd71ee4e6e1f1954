"""Next-event prediction and evaluation metrics for intensity models.

Every function here works with any *bound intensity*: an object returned by
``model.bind(seq)`` that is callable as ``f(k, t) -> (U, len(t))`` giving the
per-type intensities at times ``t`` inside the interval that follows the
first ``k`` events of ``seq``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad, trapezoid
from sklearn.metrics import f1_score

from .data import Sequence
from .simulation import HawkesSpec, intensity_trace, kernel_eval


class PredictionError(RuntimeError):
    """Quadrature could not capture the next-event distribution."""


@dataclass
class PredictionResult:
    predicted_time: float
    type_scores: np.ndarray
    predicted_type: int
    captured_mass: float = 1.0


@dataclass
class EvalReport:
    nll_per_event: float
    macro_f1: float
    rmse_scaled: float
    qq_pairs: list | None = None  # per type: (P, 2) array of (true, estimated) quantiles
    attention_map: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "nll_per_event": self.nll_per_event,
            "macro_f1": self.macro_f1,
            "rmse_scaled": self.rmse_scaled,
            "qq_pairs": None if self.qq_pairs is None else [np.asarray(q).tolist() for q in self.qq_pairs],
            "attention_map": None if self.attention_map is None else np.asarray(self.attention_map).tolist(),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class TrueIntensity:
    """Bound intensity of a known generating process."""

    def __init__(self, spec: HawkesSpec, seq: Sequence):
        self.spec = spec
        self.seq = seq
        self.num_types = spec.num_types

    def interval_start(self, k: int) -> float:
        return float(self.seq.times[k - 1])

    def __call__(self, k: int, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        types, times = self.seq.types[:k], self.seq.times[:k]
        out = np.repeat(np.asarray(self.spec.base, dtype=np.float64)[:, None], t.size, axis=1)
        lags = t[:, None] - times[None, :]
        for u in range(self.num_types):
            for v in range(self.num_types):
                cols = types == v
                if np.any(cols):
                    out[u] += kernel_eval(self.spec.kernels[u][v], lags[:, cols]).sum(axis=1)
        return out


class TrueModel:
    """Adapter letting a ``HawkesSpec`` be evaluated like a fitted model."""

    def __init__(self, spec: HawkesSpec):
        self.spec = spec
        self.num_types_ = spec.num_types

    def bind(self, seq: Sequence) -> TrueIntensity:
        return TrueIntensity(self.spec, seq)


# -- next-event distribution ----------------------------------------------

def next_event_density(model, prefix: Sequence, t: float) -> float:
    """Density of the next event time at ``t`` given ``prefix``."""
    k = len(prefix)
    if k < 1:
        raise ValueError("prefix must contain at least one event")
    start = float(prefix.times[-1])
    if not t > start:
        raise ValueError("t must be after the last prefix event")
    f = model.bind(prefix)

    def total(s):
        return float(f(k, np.array([s])).sum())

    integral, _ = quad(total, start, t, limit=200, epsabs=1e-13, epsrel=1e-11)
    return total(t) * math.exp(-integral)


def _quadrature_grid(width, n_grid):
    uniform = np.linspace(0.0, width, n_grid)
    geometric = np.geomspace(width * 1e-7, width, n_grid)
    return np.unique(np.concatenate([uniform, geometric]))


def predict_interval(f, k, start, n_grid=2000, survival_tol=1e-9, max_doublings=60):
    """Expected next-event time and type probabilities after the first ``k``
    events.

    Trapezoidal quadrature on a mixed uniform/geometric grid starting at the
    interval start; the grid end is doubled until the survival probability
    drops below ``survival_tol`` and the captured mass is renormalised.
    """
    lam0 = float(f(k, np.array([start])).sum())
    width = 5.0 / lam0 if lam0 > 0 else 1.0
    for _ in range(max_doublings):
        grid = _quadrature_grid(width, n_grid)
        lam = f(k, start + grid)  # (U, M)
        total = lam.sum(axis=0)
        survival = np.exp(-cumulative_trapezoid(total, grid, initial=0.0))
        if survival[-1] < survival_tol:
            break
        width *= 2.0
    else:
        raise PredictionError(
            f"next-event distribution not captured within {max_doublings} grid doublings"
        )
    density = total * survival
    mass = trapezoid(density, grid)
    offset = trapezoid(grid * density, grid) / mass
    per_type = trapezoid(lam * survival, grid, axis=1)
    scores = per_type / per_type.sum()
    return PredictionResult(start + offset, scores, int(np.argmax(scores)), float(mass))


def predict_next(model, prefix: Sequence, n_grid=2000, survival_tol=1e-9) -> PredictionResult:
    """Predicted time and type of the event following ``prefix``."""
    k = len(prefix)
    if k < 1:
        raise ValueError("prefix must contain at least one event")
    return predict_interval(model.bind(prefix), k, float(prefix.times[-1]), n_grid, survival_tol)


# -- likelihood --------------------------------------------------------------

def sequence_loglik(f, seq: Sequence, n_mc=10, rng=None):
    """Log-likelihood after the first event (first event given) with a
    stratified Monte Carlo compensator. Returns ``(loglik, counted_events)``."""
    L = len(seq)
    if L < 1:
        return 0.0, 0
    rng = np.random.default_rng(rng)
    times = seq.times
    ends = np.append(times[1:], seq.horizon)
    event_term = 0.0
    comp = 0.0
    for k in range(1, L + 1):
        a, b = times[k - 1], ends[k - 1]
        if k < L:
            lam = f(k, np.array([b]))[seq.types[k], 0]
            if not lam > 0:
                raise FloatingPointError(f"non-positive intensity at event {k}")
            event_term += math.log(lam)
        if b > a:
            tau = a + (b - a) * (np.arange(n_mc) + rng.uniform(size=n_mc)) / n_mc
            comp += (b - a) * float(f(k, tau).sum(axis=0).mean())
    return event_term - comp, L - 1


# -- metrics ----------------------------------------------------------------

def scaled_errors(predicted, starts, truth):
    """``((pred - start) - (truth - start)) / (truth - start)`` with
    zero-length true intervals dropped; returns ``(errors, n_skipped)``."""
    predicted, starts, truth = (np.asarray(x, dtype=np.float64) for x in (predicted, starts, truth))
    gap = truth - starts
    ok = gap > 0
    return ((predicted - starts)[ok] - gap[ok]) / gap[ok], int(np.count_nonzero(~ok))


def macro_f1(y_true, y_pred, num_types) -> float:
    """Unweighted mean of per-type F1 over all ``num_types`` types; types
    absent from both truth and predictions count as 0."""
    return float(f1_score(y_true, y_pred, labels=list(range(num_types)), average="macro", zero_division=0))


def qq_data(true_values, estimated_values, percentiles=None) -> np.ndarray:
    """Paired empirical quantiles ``(q_true, q_est)`` of two samples."""
    if percentiles is None:
        percentiles = np.arange(1, 100)
    p = np.asarray(percentiles, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 100):
        raise ValueError("percentiles must lie strictly inside (0, 100)")
    if np.any(np.diff(p) < 0):
        raise ValueError("percentiles must be sorted")
    a = np.asarray(true_values, dtype=np.float64).ravel()
    b = np.asarray(estimated_values, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    return np.column_stack([np.percentile(a, p), np.percentile(b, p)])


def qq_deviation(pairs, lo=5, hi=95) -> float:
    """Mean absolute ``q_est - q_true`` over integer percentiles lo..hi of a
    1..99 QQ table."""
    pairs = np.asarray(pairs)
    rows = slice(lo - 1, hi)
    return float(np.mean(np.abs(pairs[rows, 1] - pairs[rows, 0])))


def event_intensities(model, sequences):
    """Estimated per-type intensities at every event after the first (left
    limits), pooled over sequences: ``(U, n_events)``."""
    cols = []
    for seq in sequences:
        if len(seq) < 2:
            continue
        f = model.bind(seq)
        cols.extend(f(k, np.array([seq.times[k]]))[:, 0] for k in range(1, len(seq)))
    return np.array(cols).T


def true_event_intensities(spec: HawkesSpec, sequences):
    """Ground-truth counterpart of :func:`event_intensities`."""
    parts = [intensity_trace(spec, s, s.times[1:]) for s in sequences if len(s) >= 2]
    return np.concatenate(parts, axis=1)


def qq_by_type(spec: HawkesSpec, model, sequences, percentiles=None):
    est = event_intensities(model, sequences)
    true = true_event_intensities(spec, sequences)
    return [qq_data(true[u], est[u], percentiles) for u in range(spec.num_types)]


def attention_map(model, sequences, num_types=None):
    """Type-to-type attention matrix.

    For each event after the first, the query of its own type is taken and
    its attention (averaged over layers and heads) to each history event is
    added to the cell (query type, key type). Cells are divided by the
    number of contributing (query, key) pairs and rows are normalised.
    ``model.attention_weights(seq)`` must return an ``(L, U, L)`` array.

    Returns ``(matrix, uniform_rows)`` where ``uniform_rows`` lists query
    types that never occurred and were filled uniformly.
    """
    U = num_types if num_types is not None else model.num_types_
    acc = np.zeros((U, U))
    pairs = np.zeros((U, U))
    for seq in sequences:
        L = len(seq)
        if L < 2:
            continue
        w = np.asarray(model.attention_weights(seq))
        for r in range(L - 1):
            u = seq.types[r + 1]
            keys = seq.types[: r + 1]
            np.add.at(acc[u], keys, w[r, u, : r + 1])
            np.add.at(pairs[u], keys, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(pairs > 0, acc / np.where(pairs > 0, pairs, 1.0), 0.0)
    totals = mean.sum(axis=1)
    uniform_rows = [int(u) for u in np.flatnonzero(~(totals > 0))]
    out = np.empty_like(mean)
    for u in range(U):
        out[u] = 1.0 / U if u in uniform_rows else mean[u] / totals[u]
    return out, uniform_rows


def evaluate(model, sequences, n_mc=10, seed=0, truth: HawkesSpec | None = None,
             with_attention=False, n_grid=2000) -> EvalReport:
    """Per-event NLL, macro-F1 and scaled RMSE of next-event predictions on
    ``sequences``; QQ tables when the true process is given and the
    attention map when requested."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("evaluation split is empty")
    U = model.num_types_
    rng = np.random.default_rng(seed)
    total_ll, counted = 0.0, 0
    y_true, y_pred, pred_t, starts, truth_t = [], [], [], [], []
    min_mass = 1.0
    for seq in sequences:
        f = model.bind(seq)
        ll, n = sequence_loglik(f, seq, n_mc, rng)
        total_ll += ll
        counted += n
        for k in range(1, len(seq)):
            res = predict_interval(f, k, float(seq.times[k - 1]), n_grid)
            min_mass = min(min_mass, res.captured_mass)
            y_true.append(int(seq.types[k]))
            y_pred.append(res.predicted_type)
            pred_t.append(res.predicted_time)
            starts.append(seq.times[k - 1])
            truth_t.append(seq.times[k])
    errors, skipped = scaled_errors(pred_t, starts, truth_t)
    report = EvalReport(
        nll_per_event=-total_ll / max(counted, 1),
        macro_f1=macro_f1(y_true, y_pred, U) if y_true else 0.0,
        rmse_scaled=float(np.sqrt(np.mean(errors**2))) if errors.size else 0.0,
        diagnostics={
            "counted_events": counted,
            "predictions": len(y_true),
            "skipped_zero_intervals": skipped,
            "min_captured_mass": min_mass,
        },
    )
    if truth is not None:
        report.qq_pairs = qq_by_type(truth, model, sequences)
        report.diagnostics["qq_mean_abs_deviation"] = [qq_deviation(q) for q in report.qq_pairs]
    if with_attention:
        report.attention_map, uniform = attention_map(model, sequences, U)
        report.diagnostics["attention_uniform_rows"] = uniform
    return report


def write_qq_csv(path, qq_pairs, percentiles=None) -> None:
    if percentiles is None:
        percentiles = np.arange(1, 100)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["type", "percentile", "q_true", "q_est"])
        for u, pairs in enumerate(qq_pairs):
            for p, (a, b) in zip(percentiles, np.asarray(pairs)):
                writer.writerow([u, repr(float(p)), repr(float(a)), repr(float(b))])


def write_matrix_csv(path, matrix) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_type"] + [f"key_{v}" for v in range(matrix.shape[1])])
        for u, row in enumerate(matrix):
            writer.writerow([u] + [repr(float(x)) for x in row])
