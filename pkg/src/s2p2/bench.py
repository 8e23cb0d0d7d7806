"""Timing of conditioning and likelihood evaluation against sequence length."""

from __future__ import annotations

import statistics
import time

import numpy as np

from . import scan as scan_mod
from .autodiff import Tensor
from .events import EventSequence
from .llh import discretize, effective_lambda
from .model import S2P2Model, batch_log_likelihood, make_batch, run_stack
from .simulate import make_rng

SCAN_TOL = 1e-10


def synthetic_sequence(n: int, num_marks: int, seed: int) -> EventSequence:
    """``n`` unit-rate Poisson events with uniform marks."""
    rng = make_rng(seed, n)
    times = np.cumsum(rng.exponential(1.0, size=n))
    marks = rng.integers(0, num_marks, size=n)
    return EventSequence(times, marks, float(times[-1]) + 1.0 if n else 1.0)


def scan_inputs(model: S2P2Model, seq: EventSequence):
    """First-layer scan operands ``(a, b, x0)`` exactly as conditioning builds them."""
    layer = model.layers[0]
    batch = make_batch([seq], model.num_marks)
    lam = effective_lambda(layer, None).data
    a, _ = discretize(Tensor(np.broadcast_to(lam, batch.dt.shape + (layer.P,))), Tensor(batch.dt[..., None]))
    emb = model.mark_embedding.data.T[batch.marks] * batch.event_mask[..., None]
    b = emb @ layer.E().data.T
    return a.data, b, layer.x0().data


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_length(model: S2P2Model, n: int, mode: str, repeats: int, seed: int = 0, mc_points: int = 2) -> dict:
    """One CSV row; raises ``AssertionError`` if the two scan kernels disagree."""
    seq = synthetic_sequence(n, model.num_marks, seed)
    a, b, x0 = scan_inputs(model, seq)
    ref = scan_mod.scan_sequential(a, b, x0)
    fast = scan_mod.scan(a, b, x0)
    err = float(np.max(np.abs(fast - ref))) if ref.size else 0.0
    if not err < SCAN_TOL:
        raise AssertionError(f"scan mismatch {err:.3g} at N={n}")

    batch = make_batch([seq], model.num_marks)
    if mode == "condition":
        def run():
            return run_stack(model, batch)
    elif mode == "loglik":
        rng = make_rng(seed)

        def run():
            return batch_log_likelihood(model, batch, mc_points, rng)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    run()  # warm-up (compilation, caches)
    _, ops_seq = scan_mod.scan_sequential(a, b, x0, return_ops=True)
    _, ops_par = scan_mod.scan_blelloch(a, b, x0, return_ops=True)
    return {
        "length": n,
        "mode": mode,
        "median_seconds": _median_time(run, repeats),
        "kernel": "blelloch" if n >= scan_mod.PARALLEL_THRESHOLD else "sequential",
        "scan_sequential_seconds": _median_time(lambda: scan_mod.scan_sequential(a, b, x0), repeats),
        "scan_parallel_seconds": _median_time(lambda: scan_mod.scan_blelloch(a, b, x0), repeats),
        "ops_sequential": int(ops_seq),
        "ops_parallel": int(ops_par),
        "max_scan_error": err,
    }
