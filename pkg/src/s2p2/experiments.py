"""Simulate, fit and score: the synthetic recovery experiments.

Each ``run_*`` function is deterministic given its seed and returns a plain
dict of headline numbers plus the trained model and training report.
"""

from __future__ import annotations

import time
from dataclasses import asdict
from typing import Optional

import numpy as np

from .evaluate import likelihood_ratio_vs_oracle, model_log_likelihoods
from .events import EventSequence
from .model import S2P2Config, S2P2Model, intensity_trace
from .simulate import make_process, simulate_dataset
from .train import TrainConfig, train

# independent data streams per split
TRAIN_STREAM, VALID_STREAM, TEST_STREAM = 0, 1, 2


def split_seeds(seed: int):
    return (seed, TRAIN_STREAM), (seed, VALID_STREAM), (seed, TEST_STREAM)


def fit_and_score(
    process: str,
    n_train: int,
    n_valid: int,
    n_test: int,
    model_cfg: dict,
    train_cfg: TrainConfig,
    seed: int = 0,
    T: Optional[float] = None,
    process_kwargs: Optional[dict] = None,
    eval_mc_points: int = 100,
    out_dir=None,
    log=None,
):
    """Train on simulated data and compare held-out likelihood with the oracle."""
    proc = make_process(process, **(process_kwargs or {}))
    s_train, s_valid, s_test = split_seeds(seed)
    t0 = time.perf_counter()
    train_set, _ = simulate_dataset(proc, n_train, T, s_train)
    valid_set, _ = simulate_dataset(proc, n_valid, T, s_valid)
    test_set, test_oracle = simulate_dataset(proc, n_test, T, s_test)
    model = S2P2Model.init(S2P2Config(num_marks=proc.params.num_marks, seed=seed, **model_cfg))
    model, report = train(model, train_set, valid_set, train_cfg, out_dir=out_dir, log=log)
    lls = model_log_likelihoods(model, test_set, eval_mc_points, seed=seed)
    n_events = test_set.num_events
    return {
        "process": process,
        "num_parameters": model.num_parameters(),
        "train_events": train_set.num_events,
        "test_events": n_events,
        "model_per_event_ll": float(lls[0].sum() / n_events),
        "oracle_per_event_ll": float(test_oracle.sum() / n_events),
        "likelihood_ratio_pct": likelihood_ratio_vs_oracle(lls[0], test_oracle, n_events),
        "epochs_run": len(report.epochs),
        "best_epoch": report.best_epoch,
        "seconds": time.perf_counter() - t0,
        "model_config": asdict(model.config),
        "model": model,
        "report": report,
        "proc": proc,
        "test_set": test_set,
    }


def run_poisson(n_train=500, T=50.0, seed=0, epochs=30, grid_points=100, log=None):
    """Rate-1 homogeneous Poisson: the learned intensity should be flat at 1."""
    cfg = TrainConfig(epochs=epochs, patience=5, seed=seed)
    res = fit_and_score(
        "hawkes", n_train, n_train // 5, n_train // 5,
        dict(hidden=4, state=4, layers=1), cfg, seed, T,
        process_kwargs=dict(nu=1.0, alpha=0.0, beta=1.0), log=log,
    )
    grid = np.linspace(0.0, T, grid_points)
    lam = intensity_trace(res["model"], EventSequence([], [], T), grid).sum(axis=0)
    res.update(grid=grid, intensity=lam, min_intensity=float(lam.min()), max_intensity=float(lam.max()))
    return res


HAWKES_MODEL = dict(hidden=8, state=8, layers=2)


def run_hawkes(n_train=6000, n_valid=500, n_test=500, seed=0, epochs=6, batch_size=32, model_cfg=None, log=None):
    """The univariate exponential Hawkes process with nu = alpha = 0.5, beta = 1."""
    cfg = TrainConfig(epochs=epochs, patience=3, seed=seed, batch_size=batch_size)
    return fit_and_score(
        "hawkes", n_train, n_valid, n_test, model_cfg or HAWKES_MODEL, cfg, seed,
        process_kwargs=dict(nu=0.5, alpha=0.5, beta=1.0), log=log,
    )


LONG_RANGE_MODEL = dict(hidden=16, state=16, layers=2, timescale_range=(0.01, 1.0))


def run_long_range(n_train=2000, n_valid=300, n_test=500, seed=0, epochs=40, lr=0.01, model_cfg=None, log=None):
    cfg = TrainConfig(epochs=epochs, patience=8, seed=seed, lr=lr)
    return fit_and_score(
        "long-range", n_train, n_valid, n_test, model_cfg or LONG_RANGE_MODEL, cfg, seed, log=log
    )


def run_square_wave(n_train=5000, seed=0, epochs=30, grid_points=1000, log=None):
    """Background-intensity recovery on the square wave, conditioned on an empty history."""
    cfg = TrainConfig(epochs=epochs, patience=5, seed=seed, mc_points=20)
    res = fit_and_score("square-wave", n_train, 500, 500, dict(hidden=8, state=8, layers=2), cfg, seed, log=log)
    proc = res["proc"]
    T = proc.default_T
    grid = np.linspace(0.0, T, grid_points)
    res.update(grid=grid, intensity=intensity_trace(res["model"], EventSequence([], [], T), grid).sum(axis=0),
               truth=proc.params.rate(grid))
    return res


def run_self_correcting(n_train=6000, seed=0, epochs=10, log=None):
    cfg = TrainConfig(epochs=epochs, patience=3, seed=seed)
    return fit_and_score("self-correcting", n_train, 500, 500, HAWKES_MODEL, cfg, seed, T=20.0, log=log)
