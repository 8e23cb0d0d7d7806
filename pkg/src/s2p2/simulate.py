"""Ground-truth point processes: samplers and exact log-likelihoods.

Every parameter class doubles as an intensity oracle through
``intensity_after(seq, n, delta)``: the intensity vector at
``t_n + delta`` given the first ``n`` events of ``seq`` and nothing after
them (``t_0`` is the window start).  Evaluation code treats trained models and
these oracles through that one method.

Random streams come from numpy's Philox4x64-10 counter-based generator keyed
by a ``SeedSequence`` built from the integer seed (plus an optional stream
index), so a run is a pure function of its seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .events import Dataset, EventSequence


def make_rng(seed, *stream) -> np.random.Generator:
    """Philox4x64-10 keyed by ``(seed, *stream)``; nested tuples are flattened."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_flatten_key((seed, *stream)))))


def _flatten_key(key) -> list:
    if isinstance(key, (tuple, list)):
        return [x for part in key for x in _flatten_key(part)]
    return [int(key)]


def _empty(t_end, t_start=0.0):
    return EventSequence(np.empty(0), np.empty(0, dtype=np.int64), t_end, t_start)


def _query_arrays(seq, n, delta):
    n = np.atleast_1d(np.asarray(n, dtype=np.intp))
    delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    n, delta = np.broadcast_arrays(n, delta)
    base = np.concatenate([[seq.t_start], seq.times])
    return n, delta, base[n] + delta


# --- exponential-kernel Hawkes ----------------------------------------------


@dataclass(frozen=True, eq=False)
class ExpHawkesParams:
    """``lambda_k(t) = nu_k + sum_i alpha[k, k_i] exp(-beta[k, k_i] (t - t_i))``."""

    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        nu = np.atleast_1d(np.asarray(self.nu, dtype=np.float64))
        k = len(nu)
        alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (k, k)).copy()
        beta = np.broadcast_to(np.asarray(self.beta, dtype=np.float64), (k, k)).copy()
        if np.any(nu < 0) or np.any(alpha < 0):
            raise ValueError("nu and alpha must be nonnegative")
        if np.any(beta <= 0):
            raise ValueError("beta must be positive")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        if self.branching_ratio() >= 1.0:
            warnings.warn(
                f"Hawkes branching ratio {self.branching_ratio():.3f} >= 1: process is not stationary",
                RuntimeWarning,
                stacklevel=3,
            )

    @property
    def num_marks(self) -> int:
        return len(self.nu)

    def branching_ratio(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha / self.beta))))

    def excitation_states(self, seq: EventSequence) -> np.ndarray:
        """Right-limit excitation ``S[n][k, j]`` after the first ``n`` events."""
        k = self.num_marks
        states = np.zeros((len(seq) + 1, k, k))
        s = np.zeros((k, k))
        prev = seq.t_start
        for i, (t, m) in enumerate(zip(seq.times, seq.marks)):
            s = s * np.exp(-self.beta * (t - prev))
            s[:, m] += self.alpha[:, m]
            states[i + 1] = s
            prev = t
        return states

    def intensity_after(self, seq, n, delta) -> np.ndarray:
        n, delta, _ = _query_arrays(seq, n, delta)
        states = self.excitation_states(seq)[n]
        decay = np.exp(-self.beta[None] * delta[:, None, None])
        return self.nu[None] + (states * decay).sum(axis=2)


def simulate_hawkes(
    params: ExpHawkesParams, T: float, rng_seed, t_start: float = 0.0, max_events: int = 1_000_000
) -> EventSequence:
    """Ogata thinning; the kernels only decay, so the current intensity dominates.

    Raises ``OverflowError`` once ``max_events`` is exceeded (supercritical
    parameters on long windows).
    """
    if T <= t_start:
        return _empty(max(T, t_start), t_start)
    rng = make_rng(rng_seed)
    k = params.num_marks
    s = np.zeros((k, k))
    t = t_start
    times, marks = [], []
    while True:
        lam = params.nu + s.sum(axis=1)
        bound = lam.sum()
        if bound <= 0:
            break
        w = rng.exponential(1.0 / bound)
        s = s * np.exp(-params.beta * w)
        t += w
        if t > T:
            break
        lam = params.nu + s.sum(axis=1)
        total = lam.sum()
        if rng.uniform() * bound <= total:
            m = int(rng.choice(k, p=lam / total)) if k > 1 else 0
            times.append(t)
            marks.append(m)
            s[:, m] += params.alpha[:, m]
            if len(times) > max_events:
                raise OverflowError(f"more than {max_events} events before T={T}; branching ratio {params.branching_ratio():.2f}")
    return EventSequence(times, marks, T, t_start)


def hawkes_loglik_oracle(params: ExpHawkesParams, seq: EventSequence) -> float:
    """Exact log-likelihood; the compensator uses the exponential antiderivative."""
    T, t0 = seq.t_end, seq.t_start
    if len(seq):
        states = params.excitation_states(seq)
        gaps = np.diff(seq.times, prepend=t0)
        prev = states[:-1] * np.exp(-params.beta[None] * gaps[:, None, None])
        lam = params.nu[None] + prev.sum(axis=2)
        log_term = float(np.sum(np.log(lam[np.arange(len(seq)), seq.marks])))
        a = params.alpha[:, seq.marks]
        b = params.beta[:, seq.marks]
        excite = float(np.sum(a / b * -np.expm1(-b * (T - seq.times)[None, :])))
    else:
        log_term, excite = 0.0, 0.0
    return log_term - float(params.nu.sum()) * (T - t0) - excite


def hawkes_compensator_increments(params: ExpHawkesParams, seq: EventSequence) -> np.ndarray:
    """``int lambda_total`` over each inter-event interval (time-change residuals)."""
    if not len(seq):
        return np.empty(0)
    states = params.excitation_states(seq)
    gaps = np.diff(seq.times, prepend=seq.t_start)
    ratio = states[:-1] / params.beta[None]
    return params.nu.sum() * gaps + (ratio * -np.expm1(-params.beta[None] * gaps[:, None, None])).sum(
        axis=(1, 2)
    )


def hawkes_expected_count(nu: float, alpha: float, beta: float, T: float) -> float:
    """``E N(T)`` for a univariate exponential Hawkes process started empty."""
    n = alpha / beta
    kappa = beta * (1.0 - n)
    return nu * T / (1.0 - n) - nu * n / (beta * (1.0 - n) ** 2) * -math.expm1(-kappa * T)


def random_hawkes_params(K: int = 3, rng_seed: int = 0) -> ExpHawkesParams:
    """``nu ~ U[0.1, 0.5]``, ``alpha ~ U[0.5, 0.8]``, ``beta ~ U[0.4, 1.2]``, iid."""
    rng = make_rng(rng_seed)
    nu = rng.uniform(0.1, 0.5, size=K)
    alpha = rng.uniform(0.5, 0.8, size=(K, K))
    beta = rng.uniform(0.4, 1.2, size=(K, K))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return ExpHawkesParams(nu, alpha, beta)


# --- self-correcting ----------------------------------------------------------


@dataclass(frozen=True)
class SelfCorrectingParams:
    """``lambda(t) = exp(a t - b N_t)``."""

    a: float = 1.0
    b: float = 0.5

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("self-correcting coefficients must be positive")

    num_marks = 1

    def intensity_after(self, seq, n, delta) -> np.ndarray:
        n, _, t = _query_arrays(seq, n, delta)
        return np.exp(self.a * t - self.b * n)[:, None]


def simulate_self_correcting(params: SelfCorrectingParams, T: float, rng_seed, t_start: float = 0.0):
    """Thinning in blocks of length ``1/a``; the rate at the block end dominates."""
    if T <= t_start:
        return _empty(max(T, t_start), t_start)
    rng = make_rng(rng_seed)
    block = 1.0 / params.a
    t, n = t_start, 0
    times = []
    while t < T:
        end = min(t + block, T)
        bound = math.exp(params.a * end - params.b * n)
        w = rng.exponential(1.0 / bound)
        if t + w > end:
            t = end
            continue
        t += w
        if rng.uniform() * bound <= math.exp(params.a * t - params.b * n):
            times.append(t)
            n += 1
    return EventSequence(times, np.zeros(len(times), dtype=np.int64), T, t_start)


def self_correcting_loglik_oracle(params: SelfCorrectingParams, seq: EventSequence) -> float:
    a, b = params.a, params.b
    edges = np.concatenate([[seq.t_start], seq.times, [seq.t_end]])
    counts = np.arange(len(edges) - 1)
    # int exp(a s - b n) ds over [lo, hi] = exp(-b n) (e^{a hi} - e^{a lo}) / a
    integral = np.sum(np.exp(a * edges[:-1] - b * counts) * np.expm1(a * np.diff(edges)) / a)
    log_term = np.sum(a * seq.times - b * np.arange(len(seq)))
    return float(log_term - integral)


# --- square-wave inhomogeneous Poisson ----------------------------------------


@dataclass(frozen=True)
class SquareWaveParams:
    """High for the first ``duty`` fraction of each period, low after; ``tail_rate`` from ``t_tail``."""

    low: float = 0.0
    high: float = 1.0
    period: float = 2.0
    duty: float = 0.5
    tail_rate: float = 0.5
    t_tail: float = 7.0

    def __post_init__(self):
        if min(self.low, self.high, self.tail_rate) < 0:
            raise ValueError("square-wave rates must be nonnegative")
        if not 0.0 < self.duty < 1.0 or self.period <= 0:
            raise ValueError("need period > 0 and duty in (0, 1)")

    num_marks = 1

    def rate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        phase = np.mod(t, self.period)
        wave = np.where(phase < self.duty * self.period, self.high, self.low)
        return np.where(t >= self.t_tail, self.tail_rate, wave)

    def cumulative(self, t) -> np.ndarray:
        """``int_0^t rate``."""
        t = np.asarray(t, dtype=np.float64)

        def wave_integral(s):
            on = self.duty * self.period
            full = np.floor(s / self.period)
            within = s - full * self.period
            per = self.high * on + self.low * (self.period - on)
            return full * per + self.high * np.minimum(within, on) + self.low * np.maximum(within - on, 0.0)

        head = wave_integral(np.minimum(t, self.t_tail))
        return head + self.tail_rate * np.maximum(t - self.t_tail, 0.0)

    def intensity_after(self, seq, n, delta) -> np.ndarray:
        _, _, t = _query_arrays(seq, n, delta)
        return self.rate(t)[:, None]


def simulate_square_wave(params: SquareWaveParams, T: float, rng_seed, t_start: float = 0.0):
    if T <= t_start:
        return _empty(max(T, t_start), t_start)
    rng = make_rng(rng_seed)
    bound = max(params.low, params.high, params.tail_rate)
    if bound <= 0:
        return _empty(T, t_start)
    times = []
    t = t_start
    while True:
        t += rng.exponential(1.0 / bound)
        if t > T:
            break
        if rng.uniform() * bound <= params.rate(t):
            times.append(t)
    return EventSequence(times, np.zeros(len(times), dtype=np.int64), T, t_start)


def square_wave_loglik_oracle(params: SquareWaveParams, seq: EventSequence) -> float:
    rates = params.rate(seq.times)
    if np.any(rates <= 0):
        return -math.inf
    integral = params.cumulative(seq.t_end) - params.cumulative(seq.t_start)
    return float(np.sum(np.log(rates)) - integral)


# --- long-range trigger / target ----------------------------------------------

DISTRACTOR, TRIGGER, TARGET = 0, 1, 2


@dataclass(frozen=True)
class LongRangeParams:
    """Distractors and triggers are Poisson; each trigger schedules a target ``N(mean, var)`` later."""

    distractor_rate: float = 1.0
    trigger_rate: float = 0.1
    delay_mean: float = 40.0
    delay_var: float = 0.1
    window: tuple = field(default=(0.0, 100.0))

    def __post_init__(self):
        if self.distractor_rate < 0 or self.trigger_rate < 0:
            raise ValueError("rates must be nonnegative")
        if self.delay_var <= 0:
            raise ValueError("delay_var must be positive")
        object.__setattr__(self, "window", tuple(float(w) for w in self.window))

    num_marks = 3

    @property
    def delay_std(self) -> float:
        return math.sqrt(self.delay_var)

    def log_hazard(self, d) -> np.ndarray:
        """Hazard of the delay distribution (identical for its truncation to d > 0)."""
        d = np.asarray(d, dtype=np.float64)
        z = (d - self.delay_mean) / self.delay_std
        out = norm.logpdf(z) - math.log(self.delay_std) - norm.logsf(z)
        return np.where(d > 0, out, -np.inf)

    def cumulative_hazard(self, d) -> np.ndarray:
        """``int_0^d hazard = log S(0) - log S(d)``."""
        d = np.maximum(np.asarray(d, dtype=np.float64), 0.0)
        z0 = -self.delay_mean / self.delay_std
        return norm.logsf(z0) - norm.logsf((d - self.delay_mean) / self.delay_std)

    def match_targets(self, seq: EventSequence) -> np.ndarray:
        """For every event, the index of its matched target (triggers) or -1.

        A target consumes the open trigger with the largest hazard at its time.
        Raises if a target has no open trigger before it.
        """
        partner = np.full(len(seq), -1, dtype=np.intp)
        open_triggers: list[int] = []
        for i, (t, m) in enumerate(zip(seq.times, seq.marks)):
            if m == TRIGGER:
                open_triggers.append(i)
            elif m == TARGET:
                if not open_triggers:
                    raise ValueError(f"target at index {i} has no open trigger")
                hz = self.log_hazard(t - seq.times[open_triggers])
                j = open_triggers.pop(int(np.argmax(hz)))
                partner[j] = i
            elif m != DISTRACTOR:
                raise ValueError(f"mark {m} not in the long-range alphabet")
        return partner

    def intensity_after(self, seq, n, delta) -> np.ndarray:
        n, _, t = _query_arrays(seq, n, delta)
        partner = self.match_targets(seq)
        trig = np.flatnonzero(seq.marks == TRIGGER)
        out = np.empty((len(t), 3))
        out[:, DISTRACTOR] = self.distractor_rate
        out[:, TRIGGER] = self.trigger_rate
        if len(trig):
            # trigger j is open for a query with history n if j < n and its target is not among the first n
            open_ = (trig[None, :] < n[:, None]) & ((partner[trig][None, :] < 0) | (partner[trig][None, :] >= n[:, None]))
            hz = np.exp(self.log_hazard(t[:, None] - seq.times[trig][None, :]))
            out[:, TARGET] = np.where(open_, hz, 0.0).sum(axis=1)
        else:
            out[:, TARGET] = 0.0
        return out


def simulate_long_range(params: LongRangeParams, rng_seed) -> EventSequence:
    lo, hi = params.window
    rng = make_rng(rng_seed)
    while True:
        n_d = rng.poisson(params.distractor_rate * (hi - lo))
        n_t = rng.poisson(params.trigger_rate * (hi - lo))
        distract = rng.uniform(lo, hi, size=n_d)
        trig = rng.uniform(lo, hi, size=n_t)
        delay = rng.normal(params.delay_mean, params.delay_std, size=n_t)
        while np.any(delay <= 0):
            bad = delay <= 0
            delay[bad] = rng.normal(params.delay_mean, params.delay_std, size=int(bad.sum()))
        target = trig + delay
        target = target[target <= hi]
        times = np.concatenate([distract, trig, target])
        marks = np.concatenate(
            [np.full(n_d, DISTRACTOR), np.full(n_t, TRIGGER), np.full(len(target), TARGET)]
        ).astype(np.int64)
        order = np.argsort(times, kind="stable")
        times, marks = times[order], marks[order]
        if np.all(np.diff(times) > 0):
            return EventSequence(times, marks, hi, lo)


def longrange_loglik_oracle(params: LongRangeParams, seq: EventSequence) -> float:
    """Two Poisson streams plus hazard-superposition targets."""
    if len(seq) and seq.marks.max() > TARGET:
        raise ValueError("long-range sequences use marks 0, 1, 2 only")
    span = seq.t_end - seq.t_start
    counts = np.bincount(seq.marks, minlength=3)
    ll = -(params.distractor_rate + params.trigger_rate) * span
    for m, rate in ((DISTRACTOR, params.distractor_rate), (TRIGGER, params.trigger_rate)):
        if counts[m]:
            if rate <= 0:
                return -math.inf
            ll += counts[m] * math.log(rate)
    try:
        partner = params.match_targets(seq)
    except ValueError:
        return -math.inf
    trig = np.flatnonzero(seq.marks == TRIGGER)
    if len(trig):
        matched = partner[trig] >= 0
        ends = np.where(matched, seq.times[np.maximum(partner[trig], 0)], seq.t_end)
        ll -= float(np.sum(params.cumulative_hazard(ends - seq.times[trig])))
    targets = np.flatnonzero(seq.marks == TARGET)
    if len(targets):
        # left-limit target intensity: hazards of every trigger still open
        lam = params.intensity_after(seq, targets, seq.inter_arrivals[targets])[:, TARGET]
        ll += float(np.sum(np.log(lam)))
    return float(ll)


# --- registry -----------------------------------------------------------------


@dataclass(frozen=True)
class Process:
    name: str
    params: object
    simulate: object  # (params, T, seed) -> EventSequence
    oracle: object  # (params, seq) -> log-likelihood
    default_T: float


def make_process(name: str, **kwargs) -> Process:
    """Ground-truth process by CLI name; unknown keyword arguments are rejected."""
    if name == "hawkes":
        k = int(kwargs.pop("k", 1))
        nu = np.broadcast_to(kwargs.pop("nu", 0.5), (k,))
        params = ExpHawkesParams(nu, kwargs.pop("alpha", 0.5), kwargs.pop("beta", 1.0))
        proc = Process(name, params, simulate_hawkes, hawkes_loglik_oracle, 100.0)
    elif name == "random-hawkes-k3":
        params = random_hawkes_params(3, int(kwargs.pop("param_seed", 0)))
        # the cited ranges are supercritical, so windows must stay short
        proc = Process(name, params, simulate_hawkes, hawkes_loglik_oracle, 3.0)
    elif name == "self-correcting":
        params = SelfCorrectingParams(kwargs.pop("a", 1.0), kwargs.pop("b", 0.5))
        proc = Process(name, params, simulate_self_correcting, self_correcting_loglik_oracle, 100.0)
    elif name == "square-wave":
        fields = ("low", "high", "period", "duty", "tail_rate", "t_tail")
        params = SquareWaveParams(**{f: kwargs.pop(f) for f in fields if f in kwargs})
        proc = Process(name, params, simulate_square_wave, square_wave_loglik_oracle, 10.0)
    elif name == "long-range":
        fields = ("distractor_rate", "trigger_rate", "delay_mean", "delay_var")
        params = LongRangeParams(**{f: kwargs.pop(f) for f in fields if f in kwargs})
        proc = Process(
            name, params, lambda p, T, seed: simulate_long_range(p, seed), longrange_loglik_oracle, params.window[1]
        )
    else:
        raise ValueError(f"unknown process {name!r}")
    if kwargs:
        raise ValueError(f"unused parameters for {name}: {sorted(kwargs)}")
    return proc


def simulate_dataset(proc: Process, n: int, T: float | None, seed: int, first_index: int = 0):
    """``n`` sequences (sequence ``j`` seeded by ``(seed, j)``) and their oracle log-likelihoods."""
    T = proc.default_T if T is None else T
    seqs = [proc.simulate(proc.params, T, (seed, j)) for j in range(first_index, first_index + n)]
    oracle = np.array([proc.oracle(proc.params, s) for s in seqs])
    return Dataset(seqs, proc.params.num_marks, proc.name), oracle
