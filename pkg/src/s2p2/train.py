"""Maximum-likelihood training with Adam, warmup + cosine decay and early stopping."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .events import Dataset, ValidationError
from .model import S2P2Model, batch_log_likelihood, make_batch
from .simulate import make_rng

VALID_MC_STREAM = 7


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lr: float = 0.01
    warmup_fraction: float = 0.01
    epochs: int = 300
    batch_size: int = 32
    grad_clip_norm: float = 1.0
    mc_points: int = 10
    patience: int = 20
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        for name in ("epochs", "batch_size", "mc_points", "patience"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_nll, valid_nll, lr, seconds
    best_epoch: int = -1
    best_valid_nll: float = math.inf
    best_checkpoint: Optional[str] = None
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with tmp.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_nll", "valid_nll", "lr", "seconds"])
            w.writeheader()
            for row in self.epochs:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
        tmp.replace(path)


# --- schedule and optimizer -------------------------------------------------------


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return max(1, math.ceil(warmup_fraction * total_steps))


def learning_rate(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` over the first steps, then cosine decay to 0.

    ``step`` is 0-based; the last warmup step and the final step hit ``cfg.lr``
    and 0 respectively.
    """
    w = warmup_steps(total_steps, cfg.warmup_fraction)
    if step < w:
        return cfg.lr * (step + 1) / w
    span = total_steps - 1 - w
    if span <= 0:
        return cfg.lr
    progress = min(1.0, (step - w) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads, max_norm: float):
    """Scale all gradients together so their global norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns new arrays and leaves inputs untouched."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        out.append(p - step)
    return out


# --- loop ----------------------------------------------------------------------------


def batch_loss(model: S2P2Model, seqs, mc_points: int, rng):
    """Mean negative log-likelihood per sequence, plus the per-sequence totals."""
    total, *_ = batch_log_likelihood(model, make_batch(seqs, model.num_marks), mc_points, rng)
    return -total.mean(), total


def dataset_nll(model: S2P2Model, dataset, mc_points: int, seed: int, batch_size: int = 64) -> float:
    """Per-event negative log-likelihood with fixed MC draws (deterministic)."""
    seqs = list(dataset)
    n_events = sum(len(s) for s in seqs)
    total = 0.0
    for j, start in enumerate(range(0, len(seqs), batch_size)):
        chunk = seqs[start : start + batch_size]
        ll, *_ = batch_log_likelihood(
            model, make_batch(chunk, model.num_marks), mc_points, make_rng(seed, VALID_MC_STREAM, j)
        )
        total += float(ll.data.sum())
    return -total / max(n_events, 1)


def _diagnose(model: S2P2Model, seqs, idx, mc_points, rng_seed) -> str:
    bad = []
    for local, seq in enumerate(seqs):
        with ad.Tape():
            ll, *_ = batch_log_likelihood(model, make_batch([seq], model.num_marks), mc_points, make_rng(rng_seed))
        if not np.isfinite(ll.data).all():
            bad.append(int(idx[local]))
    norms = {k: float(np.linalg.norm(t.data)) for k, t in model.named_parameters().items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
    shown = ", ".join(f"{k}={v:.3g}" for k, v in worst)
    return f"offending sequence indices {bad or 'unknown'}; largest parameter norms: {shown}"


def train(
    model: S2P2Model,
    train_set: Dataset,
    valid_set: Optional[Dataset],
    cfg: TrainConfig,
    out_dir=None,
    log=None,
):
    """Fit ``model`` in place; returns ``(model, TrainReport)`` with the best weights loaded.

    Early stopping watches the per-event validation NLL (train NLL when no
    validation set is given).  With ``out_dir`` the best checkpoint and the
    CSV log are written there.
    """
    K = model.num_marks
    for name, ds in (("train", train_set), ("valid", valid_set)):
        if ds is not None and ds.num_marks != K:
            raise ValidationError(f"{name} set has K={ds.num_marks}, model has K={K}")
    if len(train_set) == 0:
        raise ValidationError("empty training set")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    seqs = list(train_set)
    n_train = len(seqs)
    n_events = sum(len(s) for s in seqs)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    params = model.parameters()
    opt = AdamState.zeros_like([p.data for p in params])
    shuffle_rng = make_rng(cfg.seed, 1)
    mc_rng = make_rng(cfg.seed, 2)

    report = TrainReport()
    best_state = model.state_dict()
    since_best = 0
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n_train)
        epoch_ll = 0.0
        lr = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [seqs[i] for i in idx]
            rng_state = int(mc_rng.integers(2**62))
            with ad.Tape() as tape:
                loss, per_seq = batch_loss(model, batch, cfg.mc_points, make_rng(rng_state))
            grads = tape.gradient(loss, params)
            finite = np.isfinite(loss.data).all() and all(np.isfinite(g).all() for g in grads)
            if not finite:
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, step {step}: "
                    + _diagnose(model, batch, idx, cfg.mc_points, rng_state)
                )
            grads, _ = clip_gradients(grads, cfg.grad_clip_norm)
            lr = learning_rate(step, total_steps, cfg)
            new = adam_step([p.data for p in params], grads, opt, lr, cfg.betas, cfg.eps)
            for p, arr in zip(params, new):
                p.data = arr
            epoch_ll += float(per_seq.data.sum())
            step += 1
        train_nll = -epoch_ll / max(n_events, 1)
        if valid_set is not None and len(valid_set):
            valid_nll = dataset_nll(model, valid_set, cfg.mc_points, cfg.seed)
        else:
            valid_nll = train_nll
        row = {
            "epoch": epoch,
            "train_nll": train_nll,
            "valid_nll": valid_nll,
            "lr": lr,
            "seconds": time.perf_counter() - t0,
        }
        report.epochs.append(row)
        if log is not None:
            log(row)
        if not math.isfinite(valid_nll):
            raise NumericalError(f"non-finite validation NLL at epoch {epoch}")
        if valid_nll < report.best_valid_nll:
            report.best_valid_nll = valid_nll
            report.best_epoch = epoch
            best_state = model.state_dict()
            since_best = 0
            if out_dir is not None:
                path = out_dir / "best.ckpt.json"
                model.save(path)
                report.best_checkpoint = str(path)
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stopped_early = True
                break
        if out_dir is not None:
            report.write_csv(out_dir / "train_log.csv")

    if out_dir is not None:
        report.write_csv(out_dir / "train_log.csv")
    model.load_state_dict(best_state)
    return model, report
