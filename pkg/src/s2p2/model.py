"""The state-space point process: stacked LLH layers plus a softplus intensity head.

Between layers ``u_next = LayerNorm(GELU(y) + u)``; the first layer sees
``u = 0`` and only the event impulses.  Intensities are read from the final
residual stream as ``s * softplus((W u + b) / s)``.

Batches are padded rectangles of ``S = max_events + 1`` steps: each sequence
contributes its events followed by one terminal step at ``t_end`` (no
impulse) and then zero-length padding steps, which are identity elements of
the scan and carry no weight in the integral.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from . import llh
from .autodiff import Tensor
from .events import EventSequence
from .simulate import make_rng

CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
# added to every intensity: invisible above ~1e-292 but keeps an underflowed softplus positive
INTENSITY_FLOOR = float(np.finfo(np.float64).tiny)


@dataclass
class S2P2Config:
    num_marks: int
    hidden: int = 16
    state: int = 16
    layers: int = 2
    mc_points_per_event: int = 10
    input_dependent: bool = True
    zoh_mode: str = llh.BACKWARD
    seed: int = 0
    timescale_range: Optional[tuple] = None  # opt-in log-spaced eigenvalue scales, see LLHLayerParams.init

    def __post_init__(self):
        if self.timescale_range is not None:
            self.timescale_range = tuple(float(x) for x in self.timescale_range)
        for name in ("num_marks", "hidden", "state", "layers", "mc_points_per_event"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.zoh_mode not in (llh.FORWARD, llh.BACKWARD):
            raise ValueError(f"unknown zoh_mode {self.zoh_mode!r}")


@dataclass(eq=False)
class S2P2Model:
    config: S2P2Config
    mark_embedding: Tensor  # (R, K): column k embeds mark k
    layers: list
    ln_scale: list
    ln_shift: list
    head_W: Tensor
    head_b: Tensor
    head_log_s: Tensor

    @classmethod
    def init(cls, config: S2P2Config) -> "S2P2Model":
        rng = make_rng(config.seed)
        K, H, P = config.num_marks, config.hidden, config.state
        R = H

        def leaf(x):
            return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)

        layers = [
            llh.LLHLayerParams.init(P, H, R, rng, config.input_dependent, config.zoh_mode, config.timescale_range)
            for _ in range(config.layers)
        ]
        return cls(
            config=config,
            mark_embedding=leaf(rng.normal(0.0, 1.0, (R, K))),
            layers=layers,
            ln_scale=[leaf(np.ones(H)) for _ in layers],
            ln_shift=[leaf(np.zeros(H)) for _ in layers],
            head_W=leaf(rng.normal(0.0, 0.1, (K, H))),
            head_b=leaf(np.zeros(K)),
            head_log_s=leaf(np.zeros(K)),
        )

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict:
        out = {"mark_embedding": self.mark_embedding}
        for l, layer in enumerate(self.layers):
            for name, t in layer.tensors().items():
                out[f"layers.{l}.{name}"] = t
            out[f"layers.{l}.ln_scale"] = self.ln_scale[l]
            out[f"layers.{l}.ln_shift"] = self.ln_shift[l]
        out["head_W"] = self.head_W
        out["head_b"] = self.head_b
        out["head_log_s"] = self.head_log_s
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def copy(self) -> "S2P2Model":
        twin = S2P2Model.init(self.config)
        twin.load_state_dict(self.state_dict())
        return twin

    # -- forward pieces --------------------------------------------------------

    def head(self, u: Tensor) -> Tensor:
        """``s * softplus((W u + b) / s)`` with ``s = exp(head_log_s)``."""
        s = ad.exp(self.head_log_s)
        inv_s = ad.exp(-self.head_log_s)
        return s * ad.softplus((u @ self.head_W.T + self.head_b) * inv_s) + INTENSITY_FLOOR

    def _mix(self, l: int, y: Tensor, u: Optional[Tensor]) -> Tensor:
        z = ad.gelu(y) if u is None else ad.gelu(y) + u
        return ad.layer_norm(z, self.ln_scale[l], self.ln_shift[l], LN_EPS)

    def intensity_after(self, seq: EventSequence, n, delta) -> np.ndarray:
        """Intensities at ``t_n + delta`` given the first ``n`` events (oracle protocol)."""
        return query(self, condition(self, seq), n, delta)

    @property
    def num_marks(self) -> int:
        return self.config.num_marks

    # -- checkpoints -------------------------------------------------------------

    def save(self, path) -> None:
        payload = {
            "format": "s2p2-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "parameters": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.state_dict().items()
            },
        }
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(payload))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "S2P2Model":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "s2p2-checkpoint" or "version" not in payload:
            raise ValueError(f"{path}: not a checkpoint file")
        if payload["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload['version']}")
        model = cls.init(S2P2Config(**payload["config"]))
        state = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in payload["parameters"].items()
        }
        model.load_state_dict(state)
        return model


# --- batching -----------------------------------------------------------------


@dataclass(eq=False)
class Batch:
    dt: np.ndarray  # (B, S) interval lengths; terminal step then zeros
    marks: np.ndarray  # (B, S) mark at each step, 0 where there is no event
    event_mask: np.ndarray  # (B, S) True at real events
    lengths: np.ndarray  # (B,) number of events
    t_start: np.ndarray
    t_end: np.ndarray

    @property
    def size(self) -> int:
        return self.dt.shape[0]

    @property
    def steps(self) -> int:
        return self.dt.shape[1]


def make_batch(seqs, num_marks: Optional[int] = None) -> Batch:
    seqs = list(seqs)
    lengths = np.array([len(s) for s in seqs], dtype=np.intp)
    S = int(lengths.max(initial=0)) + 1
    B = len(seqs)
    dt = np.zeros((B, S))
    marks = np.zeros((B, S), dtype=np.intp)
    mask = np.zeros((B, S), dtype=bool)
    for b, seq in enumerate(seqs):
        n = len(seq)
        if num_marks is not None:
            seq.validate(num_marks)
        dt[b, :n] = seq.inter_arrivals
        dt[b, n] = seq.t_end - (seq.times[-1] if n else seq.t_start)
        marks[b, :n] = seq.marks
        mask[b, :n] = True
    return Batch(
        dt, marks, mask, lengths,
        np.array([s.t_start for s in seqs]), np.array([s.t_end for s in seqs]),
    )


# --- conditioning -------------------------------------------------------------


@dataclass(eq=False)
class StackStates:
    """Per-layer tensors from one pass over a batch (row 0 is the window start)."""

    right: list  # x right limits, (B, S + 1, P) each
    lam_eff: list  # (B, S, P)
    u_left: list  # layer inputs at left limits, (B, S + 1, H) or None for layer 1
    u_right: list  # forward ZOH only
    u_top: Tensor  # final residual stream at left limits, (B, S + 1, H)


def run_stack(model: S2P2Model, batch: Batch) -> StackStates:
    """Right limits at every step for every layer (the conditioning pass)."""
    if batch.marks.size and batch.marks.max() >= model.num_marks:
        raise ValueError("mark out of range for this model")
    forward = model.config.zoh_mode == llh.FORWARD
    emb = ad.gather_rows(model.mark_embedding.T, batch.marks) * batch.event_mask[..., None]
    dt = Tensor(batch.dt)
    u_left = u_right = None
    states = StackStates([], [], [], [], None)
    for l, layer in enumerate(model.layers):
        impulses = emb @ layer.E().T
        out = llh.layer_forward(layer, impulses, u_left, dt, u_right if forward else None)
        states.right.append(out.right_limits)
        states.lam_eff.append(out.lam_eff)
        states.u_left.append(u_left)
        states.u_right.append(u_right)
        next_left = model._mix(l, out.y_left, u_left)
        if forward:
            u_right = model._mix(l, out.y_right, u_right)
        u_left = next_left
    states.u_top = u_left
    return states


def evolve_stack(model: S2P2Model, x_prev, lam_prev, u_right_prev, delta) -> Tensor:
    """Final residual stream at ``delta`` after the given right limits, no impulse.

    ``x_prev[l]``/``lam_prev[l]`` broadcast against ``delta[..., None]``.  The
    held input is recomputed from the layer below at the query time (backward
    ZOH) or taken from ``u_right_prev`` (forward ZOH).
    """
    forward = model.config.zoh_mode == llh.FORWARD
    delta = ad.as_tensor(delta)
    d = delta.reshape(delta.shape + (1,))
    u = None
    for l, layer in enumerate(model.layers):
        lam_bar, factor = llh.discretize(lam_prev[l], d)
        x = lam_bar * x_prev[l]
        held = u_right_prev[l] if forward else u
        bu = llh.project_input(layer, held)
        if bu is not None:
            x = x + factor * bu
        y = llh.layer_output(layer, x, u)
        u = model._mix(l, y, u)
    return u


class LogLikelihood(NamedTuple):
    total: float
    time_ll: float
    mark_ll: float
    integral: float


def batch_log_likelihood(model: S2P2Model, batch: Batch, mc_points: int, rng: np.random.Generator):
    """Per-sequence ``(total, time_ll, mark_ll, integral)`` tensors of shape ``(B,)``.

    The integral is the Monte-Carlo estimate with ``mc_points`` uniform draws
    inside every interval, the terminal one included.
    """
    states = run_stack(model, batch)
    lam_events = model.head(states.u_top[:, 1:, :])  # (B, S, K) left limits at each step
    mask = batch.event_mask.astype(np.float64)
    onehot = np.eye(model.num_marks)[batch.marks]
    lam_mark = (lam_events * onehot).sum(axis=-1)
    lam_tot = lam_events.sum(axis=-1)
    log_mark = (ad.log(lam_mark) * mask).sum(axis=-1)
    log_tot = (ad.log(lam_tot) * mask).sum(axis=-1)

    frac = rng.uniform(size=batch.dt.shape + (mc_points,))
    delta = batch.dt[..., None] * frac  # (B, S, M)
    x_prev = [x[:, :-1, None, :] for x in states.right]
    lam_prev = [lam[:, :, None, :] for lam in states.lam_eff]
    u_right_prev = [None if u is None else u[:, :-1, None, :] for u in states.u_right]
    u_q = evolve_stack(model, x_prev, lam_prev, u_right_prev, delta)
    lam_q = model.head(u_q).sum(axis=-1)  # (B, S, M)
    integral = (lam_q.sum(axis=-1) * (batch.dt / mc_points)).sum(axis=-1)

    total = log_mark - integral
    time_ll = log_tot - integral
    mark_ll = log_mark - log_tot
    return total, time_ll, mark_ll, integral


def log_likelihood(model: S2P2Model, seq: EventSequence, mc_points: Optional[int] = None, rng_seed=0) -> LogLikelihood:
    mc_points = mc_points or model.config.mc_points_per_event
    total, time_ll, mark_ll, integral = batch_log_likelihood(
        model, make_batch([seq], model.num_marks), mc_points, make_rng(rng_seed)
    )
    return LogLikelihood(total.item(), time_ll.item(), mark_ll.item(), integral.item())


# --- single-sequence queries ---------------------------------------------------


@dataclass(eq=False)
class ConditionedState:
    """Right limits (``N + 1`` rows, window start first) of every layer for one sequence."""

    seq: EventSequence
    right: list  # per layer, (N + 1, P) complex
    lam_eff: list  # per layer, (N + 1, P): dynamics after each right limit
    u_left: list  # per layer input at event left limits, (N + 1, H); zeros for layer 1
    u_right: list  # forward ZOH only, else None
    u_top: np.ndarray  # final residual stream at left limits, (N + 1, H)

    @property
    def num_events(self) -> int:
        return len(self.seq)


def condition(model: S2P2Model, seq: EventSequence) -> ConditionedState:
    # row-invariant products keep a prefix's states bit-identical to the full sequence's
    with ad.row_invariant():
        states = run_stack(model, make_batch([seq], model.num_marks))
    n = len(seq)
    H = model.config.hidden
    return ConditionedState(
        seq=seq,
        right=[x.data[0, : n + 1] for x in states.right],
        lam_eff=[lam.data[0, : n + 1] for lam in states.lam_eff],
        u_left=[np.zeros((n + 1, H)) if u is None else u.data[0, : n + 1] for u in states.u_left],
        u_right=[None if u is None else u.data[0, : n + 1] for u in states.u_right],
        u_top=states.u_top.data[0, : n + 1],
    )


def query(model: S2P2Model, cond: ConditionedState, n, delta) -> np.ndarray:
    """Intensities ``(Q, K)`` at ``t_n + delta`` from the right limit after event ``n``."""
    n = np.atleast_1d(np.asarray(n, dtype=np.intp))
    delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    n, delta = np.broadcast_arrays(n, delta)
    if np.any(delta < 0):
        raise ValueError("delta must be nonnegative")
    forward = model.config.zoh_mode == llh.FORWARD
    x_prev = [x[n] for x in cond.right]
    lam_prev = [lam[n] for lam in cond.lam_eff]
    u_right = [None] * len(model.layers)
    if forward:
        u_right = [None if l == 0 else cond.u_right[l][n] for l in range(len(model.layers))]
    with ad.row_invariant():
        u = evolve_stack(model, x_prev, lam_prev, u_right, delta)
        return model.head(u).data


def intensity_at(model: S2P2Model, cond: ConditionedState, t: float) -> np.ndarray:
    """Left-limit intensity vector at time ``t`` (pre-event at an event time)."""
    seq = cond.seq
    if not seq.t_start <= t <= seq.t_end:
        raise ValueError(f"t={t} outside window [{seq.t_start}, {seq.t_end}]")
    n = int(np.searchsorted(seq.times, t, side="left"))
    base = seq.times[n - 1] if n else seq.t_start
    return query(model, cond, n, t - base)[0]


def intensity_trace(model: S2P2Model, seq: EventSequence, grid) -> np.ndarray:
    """``K x len(grid)`` left-limit intensities."""
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted")
    if len(grid) and (grid[0] < seq.t_start or grid[-1] > seq.t_end):
        raise ValueError("grid leaves the observation window")
    cond = condition(model, seq)
    n = np.searchsorted(seq.times, grid, side="left")
    base = np.concatenate([[seq.t_start], seq.times])[n]
    return query(model, cond, n, grid - base).T
