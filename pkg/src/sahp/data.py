"""Event, sequence and dataset containers with JSONL I/O and splitting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Raised for malformed or invalid dataset content."""


@dataclass(frozen=True)
class Event:
    type_id: int
    time: float


@dataclass(frozen=True, eq=False)
class Sequence:
    """Time-ordered typed events observed on ``(0, horizon]``.

    Stored as two parallel numpy arrays; ``Event`` views are produced on
    iteration.
    """

    types: np.ndarray
    times: np.ndarray
    horizon: float

    def __post_init__(self):
        types = np.asarray(self.types, dtype=np.int64).reshape(-1)
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if types.shape != times.shape:
            raise DataError("types and times must have the same length")
        types.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "types", types)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "horizon", float(self.horizon))

    @classmethod
    def from_events(cls, events, horizon=None) -> "Sequence":
        events = list(events)
        types = [e.type_id if isinstance(e, Event) else e[0] for e in events]
        times = [e.time if isinstance(e, Event) else e[1] for e in events]
        if horizon is None:
            horizon = times[-1] if times else 0.0
        return cls(np.array(types, dtype=np.int64), np.array(times, dtype=np.float64), horizon)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self):
        for v, t in zip(self.types.tolist(), self.times.tolist()):
            yield Event(v, t)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Sequence(self.types[idx], self.times[idx], self.horizon)
        return Event(int(self.types[idx]), float(self.times[idx]))

    def __eq__(self, other):
        if not isinstance(other, Sequence):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and np.array_equal(self.types, other.types)
            and np.array_equal(self.times, other.times)
        )

    def __repr__(self):
        return f"Sequence(n_events={len(self)}, horizon={self.horizon:g})"

    def prefix(self, k: int) -> "Sequence":
        """First ``k`` events, keeping the horizon."""
        return Sequence(self.types[:k], self.times[:k], self.horizon)

    def counting_process(self, u: int, t: float) -> int:
        """Number of type-``u`` events at or before ``t``."""
        return int(np.count_nonzero((self.types == u) & (self.times <= t)))


def validate_sequence(seq: Sequence, num_types: int) -> list[str]:
    """Return every violated sequence invariant; an empty list means valid."""
    violations = []
    if not (math.isfinite(seq.horizon) and seq.horizon > 0):
        violations.append(f"horizon must be finite and > 0, got {seq.horizon}")
    times, types = seq.times, seq.types
    bad = np.flatnonzero(~np.isfinite(times) | (times < 0))
    if bad.size:
        violations.append(f"time negative or non-finite at index {bad[0]}")
    bad = np.flatnonzero((types < 0) | (types >= num_types))
    if bad.size:
        violations.append(f"type out of range at index {bad[0]}")
    bad = np.flatnonzero(~(np.diff(times) > 0))
    if bad.size:
        violations.append(f"not strictly increasing at index {bad[0] + 1}")
    bad = np.flatnonzero(~((times > 0) & (times <= seq.horizon)))
    if bad.size:
        violations.append(f"time outside (0, horizon] at index {bad[0]}")
    return violations


@dataclass
class Dataset:
    num_types: int
    sequences: list[Sequence]
    splits: dict[int, str] | None = None
    _stats: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if int(self.num_types) < 1:
            raise DataError("num_types must be >= 1")
        self.num_types = int(self.num_types)
        self.sequences = list(self.sequences)
        for idx, seq in enumerate(self.sequences):
            problems = validate_sequence(seq, self.num_types)
            if problems:
                raise DataError(f"sequence {idx}: {'; '.join(problems)}")
        if self.splits is not None:
            if set(self.splits) != set(range(len(self.sequences))):
                raise DataError("split labels must cover every sequence index exactly once")
            unknown = set(self.splits.values()) - set(SPLITS)
            if unknown:
                raise DataError(f"unknown split labels {sorted(unknown)}")

    def __len__(self):
        return len(self.sequences)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_types == other.num_types
            and self.splits == other.splits
            and len(self.sequences) == len(other.sequences)
            and all(a == b for a, b in zip(self.sequences, other.sequences))
        )

    def split(self, name: str) -> list[Sequence]:
        if self.splits is None:
            raise DataError("dataset has no split labels")
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [s for i, s in enumerate(self.sequences) if self.splits[i] == name]

    def statistics(self) -> dict:
        """Per-dataset summary in the shape of the usual dataset table."""
        if self._stats is None:
            lengths = np.array([len(s) for s in self.sequences], dtype=np.int64)
            counts = np.zeros(self.num_types, dtype=np.int64)
            for s in self.sequences:
                counts += np.bincount(s.types, minlength=self.num_types)
            stats = {
                "num_types": self.num_types,
                "num_sequences": len(self.sequences),
                "min_length": int(lengths.min()) if lengths.size else 0,
                "mean_length": float(lengths.mean()) if lengths.size else 0.0,
                "max_length": int(lengths.max()) if lengths.size else 0,
                "num_events": int(lengths.sum()),
                "type_counts": counts.tolist(),
            }
            if self.splits is not None:
                stats["split_sizes"] = {
                    name: sum(1 for v in self.splits.values() if v == name) for name in SPLITS
                }
            self._stats = stats
        return dict(self._stats)


def load_dataset(path, expected_types: int | None = None) -> Dataset:
    """Read a JSONL dataset file.

    The first line is a header ``{"num_types": U}``; every following
    non-blank line is one sequence ``{"horizon": T, "events": [...]}``. A
    sequence may carry an optional ``"split"`` label. A missing horizon
    defaults to the last event time.
    """
    path = Path(path)
    sequences, labels = [], []
    header = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: parse error: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            if header is None:
                if "num_types" not in obj:
                    raise DataError(f"{path}:{lineno}: header must contain 'num_types'")
                header = obj
                continue
            try:
                events = obj["events"]
                types = [int(e["type"]) for e in events]
                times = [float(e["time"]) for e in events]
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed sequence: {exc!r}") from exc
            horizon = obj.get("horizon")
            if horizon is None:
                horizon = times[-1] if times else 0.0
            seq = Sequence(types, times, float(horizon))
            problems = validate_sequence(seq, int(header["num_types"]))
            if problems:
                raise DataError(
                    f"{path}:{lineno}: sequence {len(sequences)}: {'; '.join(problems)}"
                )
            sequences.append(seq)
            labels.append(obj.get("split"))
    if header is None:
        raise DataError(f"{path}: empty file, missing header")
    num_types = int(header["num_types"])
    if expected_types is not None and num_types != expected_types:
        raise DataError(f"{path}: expected {expected_types} event types, file declares {num_types}")
    splits = None
    if any(lbl is not None for lbl in labels):
        if any(lbl is None for lbl in labels):
            raise DataError(f"{path}: split labels must be given for all sequences or none")
        splits = dict(enumerate(labels))
    return Dataset(num_types, sequences, splits)


def save_dataset(dataset: Dataset, path) -> None:
    lines = [json.dumps({"num_types": dataset.num_types})]
    for idx, seq in enumerate(dataset.sequences):
        obj = {
            "horizon": seq.horizon,
            "events": [{"type": v, "time": t} for v, t in zip(seq.types.tolist(), seq.times.tolist())],
        }
        if dataset.splits is not None:
            obj["split"] = dataset.splits[idx]
        lines.append(json.dumps(obj))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def split_dataset(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Assign train/val/test labels by a seeded shuffle.

    Val and test sizes are ``floor(fraction * n)``; the remainder goes to
    train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(not (f > 0) for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise DataError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(dataset.sequences)
    n_val = math.floor(fractions[1] * n)
    n_test = math.floor(fractions[2] * n)
    n_train = n - n_val - n_test

    # Order by content first so the assignment depends on the multiset of
    # sequences, not on their input order.
    keys = [(s.horizon, s.times.tobytes(), s.types.tobytes()) for s in dataset.sequences]
    canonical = sorted(range(n), key=lambda i: keys[i])
    perm = np.random.default_rng(seed).permutation(n)
    order = [canonical[p] for p in perm]

    splits = {}
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return Dataset(dataset.num_types, dataset.sequences, splits)
