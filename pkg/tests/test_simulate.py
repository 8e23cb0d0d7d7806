import math

import numpy as np
import pytest
from scipy import integrate, stats

from s2p2.events import EventSequence
from s2p2.simulate import (
    DISTRACTOR,
    TARGET,
    TRIGGER,
    ExpHawkesParams,
    LongRangeParams,
    SelfCorrectingParams,
    SquareWaveParams,
    hawkes_compensator_increments,
    hawkes_expected_count,
    hawkes_loglik_oracle,
    longrange_loglik_oracle,
    make_process,
    make_rng,
    random_hawkes_params,
    self_correcting_loglik_oracle,
    simulate_dataset,
    simulate_hawkes,
    simulate_long_range,
    simulate_self_correcting,
    simulate_square_wave,
    square_wave_loglik_oracle,
)

CLASSIC = ExpHawkesParams(0.5, 0.5, 1.0)


def quadrature_loglik(params, seq, points=()):
    """log-likelihood from left-limit intensities and adaptive quadrature of the total."""
    edges = np.concatenate([[seq.t_start], seq.times, [seq.t_end]])
    integral = 0.0
    for n in range(len(edges) - 1):
        lo, hi = edges[n], edges[n + 1]
        if hi <= lo:
            continue
        f = lambda t, n=n, lo=lo: params.intensity_after(seq, n, t - lo).sum()
        inner = [p for p in points if lo < p < hi]
        integral += integrate.quad(f, lo, hi, epsabs=1e-13, epsrel=1e-13, limit=200, points=inner or None)[0]
    log_term = 0.0
    for i, (t, m) in enumerate(zip(seq.times, seq.marks)):
        log_term += math.log(params.intensity_after(seq, i, t - edges[i])[0, m])
    return log_term - integral


# --- Hawkes ----------------------------------------------------------------------------


def test_hawkes_homogeneous_closed_form():
    p = ExpHawkesParams(1.7, 0.0, 1.0)
    seq = EventSequence([0.3, 1.1, 2.9], [0, 0, 0], 4.0)
    assert hawkes_loglik_oracle(p, seq) == pytest.approx(3 * math.log(1.7) - 1.7 * 4.0, abs=1e-12)


def test_hawkes_empty_sequence():
    assert hawkes_loglik_oracle(CLASSIC, EventSequence([], [], 10.0)) == pytest.approx(-5.0, abs=1e-12)


def test_hawkes_fixed_sequence_matches_quadrature():
    seq = EventSequence([1.0, 2.0, 3.0], [0, 0, 0], 4.0)
    assert abs(hawkes_loglik_oracle(CLASSIC, seq) - quadrature_loglik(CLASSIC, seq)) < 1e-9


def test_hawkes_oracle_matches_quadrature_on_random_pairs():
    for j in range(50):
        rng = make_rng(11, j)
        k = int(rng.integers(1, 4))
        p = ExpHawkesParams(rng.uniform(0.1, 1, k), rng.uniform(0, 0.3, (k, k)), rng.uniform(0.5, 2, (k, k)))
        seq = simulate_hawkes(p, 8.0, (12, j))
        assert abs(hawkes_loglik_oracle(p, seq) - quadrature_loglik(p, seq)) < 1e-8


def test_hawkes_mean_count_matches_stationarity_formula():
    counts = np.array([len(simulate_hawkes(CLASSIC, 100.0, (3, s))) for s in range(400)])
    expected = hawkes_expected_count(0.5, 0.5, 1.0, 100.0)
    assert abs(0.5 * 100 / (1 - 0.5) - 100) < 1e-12
    assert abs(counts.mean() - expected) < 4 * counts.std() / math.sqrt(len(counts))


def test_hawkes_time_change_residuals_are_exponential():
    res = []
    s = 0
    while sum(map(len, res)) < 10_000:
        res.append(hawkes_compensator_increments(CLASSIC, simulate_hawkes(CLASSIC, 100.0, (4, s))))
        s += 1
    assert stats.kstest(np.concatenate(res), "expon").pvalue > 0.01


def test_hawkes_zero_window_is_empty():
    assert len(simulate_hawkes(CLASSIC, 0.0, 1)) == 0


def test_supercritical_hawkes_aborts():
    with pytest.warns(RuntimeWarning):
        p = ExpHawkesParams(1.0, 2.0, 1.0)
    with pytest.raises(OverflowError):
        simulate_hawkes(p, 100.0, 0, max_events=500)


def test_random_hawkes_ranges_and_determinism():
    draws = [random_hawkes_params(3, s) for s in range(1200)]
    nu = np.concatenate([d.nu for d in draws])
    alpha = np.concatenate([d.alpha.ravel() for d in draws])
    beta = np.concatenate([d.beta.ravel() for d in draws])
    assert nu.min() >= 0.1 and nu.max() <= 0.5
    assert alpha.min() >= 0.5 and alpha.max() <= 0.8
    assert beta.min() >= 0.4 and beta.max() <= 1.2
    assert abs(alpha.mean() / 0.65 - 1) < 0.02 and abs(beta.mean() / 0.8 - 1) < 0.02
    a, b = random_hawkes_params(3, 5), random_hawkes_params(3, 5)
    assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.nu, b.nu)


def test_random_hawkes_nu_mean():
    nu = np.concatenate([random_hawkes_params(3, s).nu for s in range(3400)])
    assert len(nu) >= 10_000 and abs(nu.mean() / 0.3 - 1) < 0.02


# --- self-correcting ---------------------------------------------------------------------


def test_self_correcting_rate_near_one():
    p = SelfCorrectingParams(1.0, 1.0)
    late = [np.sum(simulate_self_correcting(p, 10.0, (5, s)).times > 5.0) for s in range(300)]
    assert 0.85 < np.mean(late) / 5.0 < 1.15


def test_self_correcting_large_b_gives_fewer_events():
    base = np.mean([len(simulate_self_correcting(SelfCorrectingParams(1.0, 1.0), 10.0, s)) for s in range(100)])
    big = np.mean([len(simulate_self_correcting(SelfCorrectingParams(1.0, 20.0), 10.0, s)) for s in range(100)])
    assert big < base


def test_self_correcting_oracle_matches_quadrature():
    p = SelfCorrectingParams(1.0, 0.5)
    seq = simulate_self_correcting(p, 6.0, 3)
    assert abs(self_correcting_loglik_oracle(p, seq) - quadrature_loglik(p, seq)) < 1e-8


# --- square wave ---------------------------------------------------------------------------


def test_square_wave_count():
    p = SquareWaveParams(t_tail=1e9)
    n = len(simulate_square_wave(p, 1000.0, 2))
    assert abs(n - 500) < 4 * math.sqrt(500)


def test_square_wave_degenerate_is_homogeneous():
    p = SquareWaveParams(low=2.0, high=2.0, t_tail=1e9)
    counts = [len(simulate_square_wave(p, 50.0, s)) for s in range(100)]
    assert abs(np.mean(counts) - 100) < 4 * math.sqrt(100 / 100)


def test_square_wave_short_window_is_all_high():
    p = SquareWaveParams(low=0.0, high=3.0)
    seq = simulate_square_wave(p, 0.9, 1)
    assert np.all(p.rate(seq.times) == 3.0)


def test_square_wave_oracle_matches_quadrature():
    p = SquareWaveParams()
    seq = simulate_square_wave(p, 10.0, 4)
    kinks = [1.0 * i for i in range(11)]
    assert abs(square_wave_loglik_oracle(p, seq) - quadrature_loglik(p, seq, kinks)) < 1e-8
    assert p.cumulative(10.0) == pytest.approx(integrate.quad(p.rate, 0, 10, points=kinks, limit=200)[0], abs=1e-9)


# --- long range ---------------------------------------------------------------------------


def test_long_range_without_triggers():
    p = LongRangeParams(trigger_rate=0.0)
    seq = simulate_long_range(p, 1)
    assert set(seq.marks.tolist()) <= {DISTRACTOR}
    n = len(seq)
    assert longrange_loglik_oracle(p, seq) == pytest.approx(n * math.log(1.0) - 100.0, abs=1e-12)


def test_long_range_targets_track_early_triggers():
    p = LongRangeParams()
    n_targets = n_early = n_edge = 0
    for s in range(300):
        seq = simulate_long_range(p, (6, s))
        trig = seq.times[seq.marks == TRIGGER]
        n_targets += int(np.sum(seq.marks == TARGET))
        n_early += int(np.sum(trig < 60.0))
        # triggers this close to 60 may or may not land their target inside the window
        n_edge += int(np.sum(np.abs(trig - 60.0) < 1.5))
    assert n_early > 1000
    assert abs(n_targets - n_early) <= n_edge


def test_long_range_degenerate_delay():
    p = LongRangeParams(delay_var=1e-12, distractor_rate=0.0)
    seq = simulate_long_range(p, 3)
    trig = seq.times[seq.marks == TRIGGER]
    tgt = seq.times[seq.marks == TARGET]
    assert len(tgt) == np.sum(trig + 40.0 <= 100.0)
    assert np.max(np.abs(tgt - trig[: len(tgt)] - 40.0)) < 1e-6


def test_long_range_single_pair_matches_quadrature():
    p = LongRangeParams(distractor_rate=0.0)
    seq = EventSequence([10.0, 50.0], [TRIGGER, TARGET], 100.0)

    def hazard(d):
        z = (d - p.delay_mean) / p.delay_std
        return stats.norm.pdf(z) / p.delay_std / stats.norm.sf(z)

    integral = integrate.quad(hazard, 0.0, 40.0, epsabs=1e-12, limit=400, points=[39.0, 40.0])[0]
    truth = math.log(0.1) + math.log(hazard(40.0)) - 0.1 * 100.0 - integral
    assert abs(longrange_loglik_oracle(p, seq) - truth) < 1e-6
    assert abs(longrange_loglik_oracle(p, seq) - quadrature_loglik(p, seq, [49.0, 50.0])) < 1e-6


def test_long_range_duplicate_target_lowers_likelihood():
    p = LongRangeParams()
    seq = EventSequence([10.0, 50.0], [TRIGGER, TARGET], 100.0)
    dup = EventSequence([10.0, 50.0, 50.1], [TRIGGER, TARGET, TARGET], 100.0)
    assert longrange_loglik_oracle(p, dup) < longrange_loglik_oracle(p, seq)


def test_long_range_oracle_rejects_foreign_marks():
    with pytest.raises(ValueError):
        longrange_loglik_oracle(LongRangeParams(), EventSequence([1.0], [3], 100.0))


# --- cross-generator properties --------------------------------------------------------------


GENERATORS = {
    "hawkes": (CLASSIC, lambda p, s: simulate_hawkes(p, 50.0, s)),
    "self-correcting": (SelfCorrectingParams(), lambda p, s: simulate_self_correcting(p, 20.0, s)),
    "square-wave": (SquareWaveParams(), lambda p, s: simulate_square_wave(p, 10.0, s)),
    "long-range": (LongRangeParams(), lambda p, s: simulate_long_range(p, s)),
}


def compensator(params, seq, grid_per_unit=200):
    edges = np.concatenate([[seq.t_start], seq.times, [seq.t_end]])
    total = 0.0
    for n in range(len(edges) - 1):
        lo, hi = edges[n], edges[n + 1]
        m = max(int((hi - lo) * grid_per_unit), 8)
        d = np.linspace(0.0, hi - lo, m)
        total += np.trapezoid(params.intensity_after(seq, n, d).sum(axis=1), d)
    return total


@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_thinning_validity(name):
    params, sim = GENERATORS[name]
    seqs = [sim(params, (9, s)) for s in range(100)]
    n = sum(len(s) for s in seqs)
    lam = sum(compensator(params, s) for s in seqs)
    assert abs(n - lam) < 4 * math.sqrt(lam)


@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_generators_are_deterministic(name):
    params, sim = GENERATORS[name]
    assert sim(params, 42) == sim(params, 42)
    assert sim(params, 42) != sim(params, 43)


def test_make_process_rejects_unknown():
    with pytest.raises(ValueError):
        make_process("poisson-ish")
    with pytest.raises(ValueError):
        make_process("hawkes", gamma=1.0)


def test_simulate_dataset_is_reproducible():
    proc = make_process("hawkes")
    a, oa = simulate_dataset(proc, 3, 20.0, 7)
    b, ob = simulate_dataset(proc, 3, 20.0, 7)
    assert a == b and np.array_equal(oa, ob)
    assert all(o == hawkes_loglik_oracle(proc.params, s) for o, s in zip(oa, a))
