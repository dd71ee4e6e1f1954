"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_is_fitted  # noqa: F401  (re-exported)

from .data import DataError, Dataset, Sequence, validate_sequence


def _as_sequence(obj) -> Sequence:
    if isinstance(obj, Sequence):
        return obj
    if isinstance(obj, dict):
        events = obj["events"]
        types = [e["type"] for e in events]
        times = [e["time"] for e in events]
        horizon = obj.get("horizon", times[-1] if times else 0.0)
        return Sequence(types, times, horizon)
    if isinstance(obj, tuple) and len(obj) in (2, 3):
        types, times = obj[0], obj[1]
        horizon = obj[2] if len(obj) == 3 else (times[-1] if len(times) else 0.0)
        return Sequence(types, times, horizon)
    raise TypeError(f"cannot interpret {type(obj).__name__} as an event sequence")


def check_sequences(X, num_types=None, split=None, min_events=0):
    """Coerce ``X`` into a list of validated ``Sequence`` objects.

    ``X`` may be a ``Dataset`` (optionally restricted to ``split``), a single
    ``Sequence``, or an iterable of sequences, ``(types, times[, horizon])``
    tuples or JSON-style dicts. Returns ``(sequences, num_types)``; the type
    count is inferred from the data when not given.
    """
    if isinstance(X, Dataset):
        if num_types is not None and num_types != X.num_types:
            raise DataError(f"expected {num_types} event types, dataset has {X.num_types}")
        num_types = X.num_types
        sequences = X.split(split) if split is not None else list(X.sequences)
    elif isinstance(X, Sequence):
        sequences = [X]
    else:
        sequences = [_as_sequence(x) for x in X]

    if num_types is None:
        top = max((int(s.types.max()) for s in sequences if len(s)), default=0)
        num_types = top + 1
    num_types = int(num_types)
    for idx, seq in enumerate(sequences):
        problems = validate_sequence(seq, num_types)
        if problems:
            raise DataError(f"sequence {idx}: {'; '.join(problems)}")
        if len(seq) < min_events:
            raise DataError(f"sequence {idx}: needs at least {min_events} events")
    return sequences, num_types


def check_random_state_seed(seed) -> np.random.SeedSequence:
    """Root seed sequence for named sub-streams."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if seed is None:
        return np.random.SeedSequence()
    return np.random.SeedSequence(int(seed))
