"""Event sequences, datasets and JSON Lines I/O.

File layout: first line ``{"num_marks": K}`` (optionally with ``"name"``),
then one object per sequence::

    {"times": [0.5, 1.2], "marks": [0, 2], "t_end": 2.0}

``t_start`` is optional and defaults to 0.  Marks are 0-based.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ValidationError(ValueError):
    """A sequence or dataset breaks the point-process assumptions."""


class ParseError(ValueError):
    """A JSONL line could not be decoded."""


def _frozen(values, dtype):
    arr = np.array(values, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EventSequence:
    times: np.ndarray
    marks: np.ndarray
    t_end: float
    t_start: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times, np.float64))
        object.__setattr__(self, "marks", _frozen(self.marks, np.int64))
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "t_start", float(self.t_start))
        self.validate()

    def validate(self, num_marks: int | None = None) -> None:
        t, k = self.times, self.marks
        if len(t) != len(k):
            raise ValidationError(f"{len(t)} times but {len(k)} marks")
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise ValidationError("window bounds must be finite")
        if self.t_end < self.t_start:
            raise ValidationError(f"t_end {self.t_end} < t_start {self.t_start}")
        if len(t):
            if not np.all(np.isfinite(t)):
                raise ValidationError("non-finite event time")
            if np.any(np.diff(t) <= 0):
                i = int(np.argmax(np.diff(t) <= 0))
                raise ValidationError(
                    f"times not strictly increasing at index {i + 1} ({t[i]!r} -> {t[i + 1]!r})"
                )
            if t[0] < self.t_start or t[-1] > self.t_end:
                raise ValidationError("event time outside the observation window")
            if k.min() < 0:
                raise ValidationError("negative mark")
            if num_marks is not None and k.max() >= num_marks:
                raise ValidationError(f"mark {int(k.max())} out of range for K={num_marks}")

    def __len__(self):
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (
            self.t_start == other.t_start
            and self.t_end == other.t_end
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.marks, other.marks)
        )

    __hash__ = None

    @property
    def inter_arrivals(self) -> np.ndarray:
        return np.diff(self.times, prepend=self.t_start)

    def truncate(self, t: float) -> "EventSequence":
        """Events strictly before ``t``; the window keeps its end."""
        n = int(np.searchsorted(self.times, t, side="left"))
        return EventSequence(self.times[:n], self.marks[:n], self.t_end, self.t_start)

    def to_json(self) -> dict:
        rec = {"times": self.times.tolist(), "marks": self.marks.tolist(), "t_end": self.t_end}
        if self.t_start != 0.0:
            rec["t_start"] = self.t_start
        return rec


@dataclass(frozen=True, eq=False)
class Dataset:
    sequences: tuple
    num_marks: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if int(self.num_marks) < 1:
            raise ValidationError("num_marks must be >= 1")
        object.__setattr__(self, "num_marks", int(self.num_marks))
        for i, seq in enumerate(self.sequences):
            try:
                seq.validate(self.num_marks)
            except ValidationError as err:
                raise ValidationError(f"sequence {i}: {err}") from None

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_marks == other.num_marks
            and self.name == other.name
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.sequences, other.sequences))
        )

    __hash__ = None

    @property
    def num_events(self) -> int:
        return sum(len(s) for s in self.sequences)

    def mean_inter_arrival(self) -> float:
        gaps = [s.inter_arrivals for s in self.sequences if len(s)]
        if not gaps:
            return float(np.mean([s.t_end - s.t_start for s in self.sequences]))
        return float(np.concatenate(gaps).mean())


def counting_process(seq: EventSequence, t: float, num_marks: int | None = None) -> np.ndarray:
    """Per-mark counts of events with time <= t."""
    if not seq.t_start <= t <= seq.t_end:
        raise ValueError(f"t={t} outside window [{seq.t_start}, {seq.t_end}]")
    k = num_marks if num_marks is not None else (int(seq.marks.max()) + 1 if len(seq) else 1)
    n = int(np.searchsorted(seq.times, t, side="right"))
    return np.bincount(seq.marks[:n], minlength=k).astype(np.int64)


def load_jsonl(path, num_marks: int | None = None) -> Dataset:
    """Read a dataset; ``num_marks`` comes from the header line or the argument."""
    path = Path(path)
    header = {}
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}:{lineno}: {err.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            if "times" not in obj:
                if "num_marks" in obj and not records and not header:
                    header = obj
                    continue
                raise ParseError(f"{path}:{lineno}: missing field 'times'")
            records.append((lineno, obj))
    if num_marks is None:
        if "num_marks" not in header:
            sidecar = path.with_suffix(path.suffix + ".meta.json")
            if sidecar.exists():
                header = json.loads(sidecar.read_text())
        if "num_marks" not in header:
            raise ParseError(f"{path}: no num_marks header")
        num_marks = int(header["num_marks"])
    seqs = []
    for lineno, obj in records:
        for key in ("marks", "t_end"):
            if key not in obj:
                raise ParseError(f"{path}:{lineno}: missing field {key!r}")
        marks = obj["marks"]
        if any(not isinstance(m, int) or isinstance(m, bool) for m in marks):
            raise ValidationError(f"{path}:{lineno}: marks must be integers")
        try:
            seq = EventSequence(obj["times"], marks, obj["t_end"], obj.get("t_start", 0.0))
            seq.validate(num_marks)
        except ValidationError as err:
            raise ValidationError(f"{path}:{lineno}: {err}") from None
        except (TypeError, ValueError) as err:
            raise ParseError(f"{path}:{lineno}: {err}") from None
        seqs.append(seq)
    return Dataset(seqs, num_marks, header.get("name", ""))


def _num(x: float) -> str:
    # 17 significant digits always round-trip an IEEE double
    return format(float(x), ".17g")


def _sequence_line(seq: EventSequence) -> str:
    times = ", ".join(_num(t) for t in seq.times)
    marks = ", ".join(str(int(k)) for k in seq.marks)
    line = f'{{"times": [{times}], "marks": [{marks}], "t_end": {_num(seq.t_end)}'
    if seq.t_start != 0.0:
        line += f', "t_start": {_num(seq.t_start)}'
    return line + "}"


def dumps_jsonl(dataset: Dataset) -> str:
    header = {"num_marks": dataset.num_marks}
    if dataset.name:
        header["name"] = dataset.name
    lines = [json.dumps(header)] + [_sequence_line(s) for s in dataset.sequences]
    return "\n".join(lines) + "\n"


def save_jsonl(dataset: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_jsonl(dataset))
    tmp.replace(path)
