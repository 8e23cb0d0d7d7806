"""Evaluation: likelihood decomposition, next-event prediction and calibration.

Anything exposing ``num_marks`` and ``intensity_after(seq, n, delta) -> (Q, K)``
can be scored (trained models, ground-truth simulator parameters,
``ConstantIntensity``).  ``n`` counts the conditioning events and ``delta`` is
measured from the last of them (from ``t_start`` when ``n == 0``).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .events import Dataset, EventSequence
from .model import S2P2Model, batch_log_likelihood, condition, make_batch, query
from .simulate import make_rng

log = logging.getLogger(__name__)

SURVIVAL_FLOOR = 1e-4
PCE_DEFINITION = (
    "mean over B equal-width bins of |fraction of compensator transforms u=1-exp(-integral) in bin - 1/B|"
)


@dataclass(frozen=True)
class ConstantIntensity:
    """Homogeneous marked Poisson process with per-mark rates."""

    rates: tuple

    def __post_init__(self):
        rates = tuple(float(r) for r in np.atleast_1d(self.rates))
        if not rates or min(rates) <= 0:
            raise ValueError("rates must be positive")
        object.__setattr__(self, "rates", rates)

    @property
    def num_marks(self) -> int:
        return len(self.rates)

    def intensity_after(self, seq, n, delta) -> np.ndarray:
        delta = np.atleast_1d(np.broadcast_arrays(np.asarray(n), np.asarray(delta, dtype=np.float64))[1])
        return np.tile(np.asarray(self.rates), (delta.size, 1))

    def log_likelihood(self, seq: EventSequence) -> float:
        r = np.asarray(self.rates)
        return float(np.log(r[seq.marks]).sum() - r.sum() * (seq.t_end - seq.t_start))

    @classmethod
    def fit(cls, dataset: Dataset) -> "ConstantIntensity":
        """Maximum-likelihood rates (with a tiny floor for unseen marks)."""
        span = sum(s.t_end - s.t_start for s in dataset)
        counts = np.zeros(dataset.num_marks)
        for s in dataset:
            counts += np.bincount(s.marks, minlength=dataset.num_marks)
        return cls(tuple(np.maximum(counts, 1e-3) / span))


def bind(source, seq: EventSequence):
    """``f(n, delta) -> (Q, K)`` for one sequence, conditioning a model only once."""
    if isinstance(source, S2P2Model):
        cond = condition(source, seq)
        return lambda n, delta: query(source, cond, n, delta)
    return lambda n, delta: np.asarray(source.intensity_after(seq, n, delta))


def _interval_starts(seq: EventSequence) -> np.ndarray:
    return np.concatenate([[seq.t_start], seq.times])


# --- calibration ---------------------------------------------------------------------


@dataclass
class CalibrationCurve:
    edges: np.ndarray
    frequency: np.ndarray  # empirical fraction (PCE) or accuracy (ECE) per bin
    nominal: np.ndarray  # 1/B (PCE) or mean confidence (ECE) per bin
    counts: np.ndarray

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "frequency", "nominal", "count"])
            for i in range(len(self.counts)):
                w.writerow([self.edges[i], self.edges[i + 1], self.frequency[i], self.nominal[i], int(self.counts[i])])


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    # equal-width bins on [0, 1]; the top edge belongs to the last bin
    return np.minimum((np.clip(x, 0.0, 1.0) * bins).astype(np.intp), bins - 1)


def compensator_increments(source, seq: EventSequence, points: int = 64) -> np.ndarray:
    """Integral of the total intensity over each inter-event interval (trapezoid)."""
    n = len(seq)
    if n == 0:
        return np.empty(0)
    f = bind(source, seq)
    gaps = seq.inter_arrivals
    frac = np.linspace(0.0, 1.0, points)
    delta = gaps[:, None] * frac[None, :]
    idx = np.repeat(np.arange(n), points)
    lam = f(idx, delta.ravel()).sum(axis=1).reshape(n, points)
    return np.trapezoid(lam, delta, axis=1)


def pce(source, dataset, bins: int = 20, points: int = 64):
    """Time calibration error from compensator transforms of every event."""
    u = []
    for seq in dataset:
        u.append(1.0 - np.exp(-compensator_increments(source, seq, points)))
    u = np.concatenate(u) if u else np.empty(0)
    if u.size == 0:
        raise ValueError("pce needs at least one event")
    counts = np.bincount(_bin_index(u, bins), minlength=bins)
    frac = counts / u.size
    curve = CalibrationCurve(np.linspace(0.0, 1.0, bins + 1), frac, np.full(bins, 1.0 / bins), counts)
    return float(np.mean(np.abs(frac - 1.0 / bins))), curve


def mark_scores(source, seq: EventSequence) -> np.ndarray:
    """Left-limit intensities ``(N, K)`` at every event time."""
    if len(seq) == 0:
        return np.empty((0, source.num_marks))
    f = bind(source, seq)
    return f(np.arange(len(seq)), seq.inter_arrivals)


def predict_marks(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the smallest index
    return np.argmax(scores, axis=-1)


def next_mark_prediction(source, seq: EventSequence, n: int, t_true: float) -> int:
    """Most intense mark just before ``t_true`` given the first ``n`` events."""
    base = _interval_starts(seq)[n]
    if t_true <= base:
        raise ValueError("t_true must follow the last conditioning event")
    return int(predict_marks(bind(source, seq)(n, t_true - base))[0])


def top_n_hits(scores: np.ndarray, marks: np.ndarray, n: int) -> np.ndarray:
    n = min(n, scores.shape[-1])
    # stable sort on -score keeps ties in index order
    ranked = np.argsort(-scores, axis=-1, kind="stable")[:, :n]
    return (ranked == marks[:, None]).any(axis=1)


def ece(source, dataset, bins: int = 20):
    conf, correct = [], []
    for seq in dataset:
        s = mark_scores(source, seq)
        if len(s) == 0:
            continue
        conf.append(s.max(axis=1) / s.sum(axis=1))
        correct.append(predict_marks(s) == seq.marks)
    if not conf:
        raise ValueError("ece needs at least one event")
    conf = np.concatenate(conf)
    correct = np.concatenate(correct).astype(np.float64)
    idx = _bin_index(conf, bins)
    counts = np.bincount(idx, minlength=bins)
    safe = np.maximum(counts, 1)
    acc = np.bincount(idx, weights=correct, minlength=bins) / safe
    mean_conf = np.bincount(idx, weights=conf, minlength=bins) / safe
    value = float(np.sum(counts / conf.size * np.abs(acc - mean_conf)))
    return value, CalibrationCurve(np.linspace(0.0, 1.0, bins + 1), acc, mean_conf, counts)


# --- next-event time -------------------------------------------------------------------


def hybrid_grid(horizon: float, points: int = 256, geometric: int = 64) -> np.ndarray:
    """``points`` nodes on ``[0, horizon]``: a linear grid plus geometric nodes near 0."""
    lin = np.linspace(0.0, horizon, points - geometric)
    geo = horizon * np.geomspace(1e-6, 1.0 / (points - geometric), geometric, endpoint=False)
    return np.union1d(lin, geo)


def survival_expectation(lam_total: np.ndarray, grid: np.ndarray):
    """Trapezoid survival integral on per-row grids.

    Returns ``(E[delta], truncated, stop_time)``; the integral runs up to the
    first node where the survival drops below the floor.
    """
    h = np.diff(grid, axis=-1)
    steps = 0.5 * (lam_total[..., 1:] + lam_total[..., :-1]) * h
    cum = np.concatenate([np.zeros(lam_total.shape[:-1] + (1,)), np.cumsum(steps, axis=-1)], axis=-1)
    surv = np.exp(-cum)
    below = surv < SURVIVAL_FLOOR
    truncated = below.any(axis=-1)
    stop = np.where(truncated, np.argmax(below, axis=-1), grid.shape[-1] - 1)
    keep = np.arange(grid.shape[-1]) <= stop[..., None]
    seg = np.where(keep[..., 1:], 0.5 * (surv[..., 1:] + surv[..., :-1]) * h, 0.0)
    stop_time = np.take_along_axis(np.broadcast_to(grid, surv.shape), stop[..., None], axis=-1)[..., 0]
    return seg.sum(axis=-1), truncated, stop_time


def expected_next_time(source, seq: EventSequence, n: int, horizon: float, points: int = 256) -> float:
    """Mean waiting time after the first ``n`` events via the survival integral."""
    return float(expected_next_times(source, seq, horizon, points, indices=np.array([n]))[0])


def expected_next_times(source, seq: EventSequence, horizon: float, points: int = 256, indices=None) -> np.ndarray:
    """Expected waiting times after each conditioning prefix in ``indices`` (default ``0..N-1``).

    Each prediction keeps its own horizon: doubled (at most 10 times) while
    the survival stays above the floor, then shrunk once to 1.5x the
    truncation point so the nodes cover the mass that matters.
    """
    f = bind(source, seq)
    if indices is None:
        indices = np.arange(len(seq))
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size == 0:
        return np.empty(0)
    unit = hybrid_grid(1.0, points)
    h = np.full(indices.size, float(horizon))
    refined = np.zeros(indices.size, dtype=bool)
    result = np.full(indices.size, np.nan)
    todo = np.arange(indices.size)
    for _ in range(12):
        grid = h[todo, None] * unit[None, :]
        lam = f(np.repeat(indices[todo], unit.size), grid.ravel()).sum(axis=1).reshape(grid.shape)
        value, truncated, stop_time = survival_expectation(lam, grid)
        early = truncated & ~refined[todo]
        done = truncated & ~early
        result[todo[done]] = value[done]
        h[todo[early]] = 1.5 * stop_time[early]
        refined[todo[early]] = True
        grow = ~truncated
        h[todo[grow]] *= 2.0
        todo = todo[~done]
        if todo.size == 0:
            break
    if todo.size:
        log.warning("survival above %.0e after horizon doubling for %d predictions", SURVIVAL_FLOOR, todo.size)
        result[todo] = value[~done]
    return result


# --- likelihood --------------------------------------------------------------------------


def model_log_likelihoods(model: S2P2Model, dataset, mc_points: int = 10, seed: int = 0, batch_size: int = 64):
    """Per-sequence ``(total, time_ll, mark_ll)`` arrays with seeded MC draws."""
    seqs = list(dataset)
    out = np.zeros((3, len(seqs)))
    for j, start in enumerate(range(0, len(seqs), batch_size)):
        chunk = seqs[start : start + batch_size]
        total, time_ll, mark_ll, _ = batch_log_likelihood(
            model, make_batch(chunk, model.num_marks), mc_points, make_rng(seed, j)
        )
        out[:, start : start + len(chunk)] = [total.data, time_ll.data, mark_ll.data]
    return out


def likelihood_ratio_vs_oracle(model_ll, oracle_ll, num_events: int) -> float:
    """``100 * exp(mean per-event model LL - mean per-event oracle LL)`` in percent."""
    if num_events <= 0:
        raise ValueError("need at least one event")
    gap = (np.sum(model_ll) - np.sum(oracle_ll)) / num_events
    return 100.0 * math.exp(gap)


@dataclass
class EvalReport:
    per_event_total_ll: float
    time_ll: float
    mark_ll: float
    rmse_next_time: float
    mark_accuracy: float
    top_n_accuracy: float
    top_n: int
    pce: float
    ece: float
    likelihood_ratio_vs_oracle: Optional[float]
    num_sequences: int
    num_events: int
    mc_points: int
    pce_definition: str = PCE_DEFINITION
    oracle_per_event_ll: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json() + "\n")
        tmp.replace(path)


def evaluate(
    model: S2P2Model,
    dataset: Dataset,
    mc_points: int = 10,
    oracle_ll=None,
    horizon: Optional[float] = None,
    bins: int = 20,
    top_n: int = 3,
    seed: int = 0,
    curves_dir=None,
) -> EvalReport:
    """Full metric suite for a trained model on one dataset.

    ``horizon`` defaults to 20 mean inter-arrival times of ``dataset``.
    """
    n_events = dataset.num_events
    if n_events == 0:
        raise ValueError("evaluation needs at least one event")
    lls = model_log_likelihoods(model, dataset, mc_points, seed)
    if horizon is None:
        horizon = 20.0 * dataset.mean_inter_arrival()

    sq_err, hits, topn = [], [], []
    for seq in dataset:
        if len(seq) == 0:
            continue
        pred = expected_next_times(model, seq, horizon)
        sq_err.append((pred - seq.inter_arrivals) ** 2)
        scores = mark_scores(model, seq)
        hits.append(predict_marks(scores) == seq.marks)
        topn.append(top_n_hits(scores, seq.marks, top_n))
    pce_value, pce_curve = pce(model, dataset, bins)
    ece_value, ece_curve = ece(model, dataset, bins)
    if curves_dir is not None:
        pce_curve.write_csv(Path(curves_dir) / "pce_curve.csv")
        ece_curve.write_csv(Path(curves_dir) / "ece_curve.csv")

    ratio = oracle_per_event = None
    if oracle_ll is not None:
        oracle_ll = np.asarray(oracle_ll, dtype=np.float64)
        if oracle_ll.shape != (len(dataset),):
            raise ValueError(f"oracle has {oracle_ll.size} values for {len(dataset)} sequences")
        ratio = likelihood_ratio_vs_oracle(lls[0], oracle_ll, n_events)
        oracle_per_event = float(oracle_ll.sum() / n_events)
    return EvalReport(
        per_event_total_ll=float(lls[0].sum() / n_events),
        time_ll=float(lls[1].sum() / n_events),
        mark_ll=float(lls[2].sum() / n_events),
        rmse_next_time=float(math.sqrt(np.concatenate(sq_err).mean())),
        mark_accuracy=float(np.concatenate(hits).mean()),
        top_n_accuracy=float(np.concatenate(topn).mean()),
        top_n=top_n,
        pce=pce_value,
        ece=ece_value,
        likelihood_ratio_vs_oracle=ratio,
        num_sequences=len(dataset),
        num_events=n_events,
        mc_points=mc_points,
        oracle_per_event_ll=oracle_per_event,
    )
