import json
import math

import numpy as np
import pytest
from scipy import integrate

from s2p2.events import Dataset, EventSequence
from s2p2.evaluate import (
    PCE_DEFINITION,
    ConstantIntensity,
    compensator_increments,
    ece,
    evaluate,
    expected_next_time,
    expected_next_times,
    hybrid_grid,
    likelihood_ratio_vs_oracle,
    mark_scores,
    model_log_likelihoods,
    next_mark_prediction,
    pce,
    predict_marks,
    top_n_hits,
)
from s2p2.model import S2P2Config, S2P2Model
from s2p2.simulate import (
    TARGET,
    TRIGGER,
    ExpHawkesParams,
    LongRangeParams,
    hawkes_loglik_oracle,
    make_process,
    make_rng,
    simulate_dataset,
)

CLASSIC = ExpHawkesParams(0.5, 0.5, 1.0)


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_constant_rate_expectation(c):
    seq = EventSequence([], [], 10.0)
    got = expected_next_time(ConstantIntensity((c,)), seq, 0, horizon=20.0)
    assert abs(got * c - 1.0) < 1e-3


def test_doubling_the_rate_halves_the_expectation():
    seq = EventSequence([], [], 10.0)
    one = expected_next_time(ConstantIntensity((0.7,)), seq, 0, horizon=30.0)
    two = expected_next_time(ConstantIntensity((1.4,)), seq, 0, horizon=30.0)
    assert two == pytest.approx(one / 2, rel=1e-3)


def test_horizon_adapts_when_too_short():
    seq = EventSequence([], [], 10.0)
    assert abs(expected_next_time(ConstantIntensity((0.5,)), seq, 0, horizon=0.1) * 0.5 - 1) < 1e-3


def thinning_first_waits(n, seed):
    """Waiting time to the first event after an event at 0, by vectorised thinning."""
    rng = make_rng(seed)
    lam = lambda t: 0.5 + 0.5 * np.exp(-t)  # noqa: E731
    t = np.zeros(n)
    bound = lam(t)
    out = np.full(n, np.nan)
    live = np.arange(n)
    while live.size:
        t[live] += rng.exponential(1.0 / bound[live])
        accept = rng.uniform(size=live.size) * bound[live] <= lam(t[live])
        out[live[accept]] = t[live[accept]]
        bound[live] = lam(t[live])  # the intensity only decays, so it bounds the future
        live = live[~accept]
    return out


def test_hawkes_expectation_matches_thinning_monte_carlo():
    seq = EventSequence([0.0], [0], 50.0, t_start=-1.0)
    got = expected_next_time(CLASSIC, seq, 1, horizon=20.0)
    waits = thinning_first_waits(1_000_000, 17)
    se = waits.std(ddof=1) / math.sqrt(waits.size)
    assert abs(got - waits.mean()) < 3 * se


def test_batched_expectations_match_single_calls():
    seq = make_process("hawkes").simulate(CLASSIC, 10.0, 3)
    many = expected_next_times(CLASSIC, seq, 20.0)
    for n in (0, len(seq) // 2, len(seq) - 1):
        assert many[n] == pytest.approx(expected_next_time(CLASSIC, seq, n, 20.0), rel=1e-12)


def test_hybrid_grid_shape():
    g = hybrid_grid(5.0)
    assert g[0] == 0.0 and g[-1] == 5.0 and len(g) == 256
    assert np.all(np.diff(g) > 0)
    assert g[1] < 1e-4


# --- marks ---------------------------------------------------------------------------------


def test_single_mark_always_predicts_zero():
    seq = EventSequence([1.0, 2.0, 3.5], [0, 0, 0], 4.0)
    assert np.all(predict_marks(mark_scores(CLASSIC, seq)) == 0)


def test_ties_go_to_smallest_index():
    assert predict_marks(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])).tolist() == [1, 0]
    hits = top_n_hits(np.array([[1.0, 1.0, 1.0]]), np.array([2]), 2)
    assert not hits[0]


def test_argmax_is_scale_invariant():
    rng = np.random.default_rng(0)
    s = rng.uniform(size=(50, 4))
    assert np.array_equal(predict_marks(s), predict_marks(3.7 * s))


def test_prediction_equivariance_under_mark_permutation():
    rng = np.random.default_rng(1)
    s = rng.uniform(size=(30, 3))
    perm = np.array([1, 2, 0])
    permuted = np.empty_like(s)
    permuted[:, perm] = s
    assert np.array_equal(predict_marks(permuted), perm[predict_marks(s)])


def test_long_range_oracle_predicts_target_forty_after_trigger():
    p = LongRangeParams()
    seq = EventSequence([10.0, 20.0], [TRIGGER, 0], 100.0)
    assert next_mark_prediction(p, seq, 2, 50.0) == TARGET
    assert next_mark_prediction(p, seq, 2, 30.0) != TARGET


def test_top_n_hits():
    s = np.array([[0.1, 0.5, 0.4], [0.9, 0.05, 0.05]])
    assert top_n_hits(s, np.array([2, 1]), 2).tolist() == [True, True]
    assert top_n_hits(s, np.array([0, 1]), 1).tolist() == [False, False]
    assert top_n_hits(s, np.array([0, 2]), 5).tolist() == [True, True]


# --- calibration ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def hawkes_10k():
    proc = make_process("hawkes")
    ds, oracle = simulate_dataset(proc, 100, 100.0, 21)
    assert ds.num_events >= 10_000 * 0.9
    return ds


def test_oracle_pce_is_small(hawkes_10k):
    value, curve = pce(CLASSIC, hawkes_10k)
    assert value < 0.02
    assert curve.counts.sum() == hawkes_10k.num_events
    assert np.allclose(curve.edges, np.linspace(0, 1, 21))


def test_doubled_intensity_worsens_pce(hawkes_10k):
    with pytest.warns(RuntimeWarning):  # branching ratio exactly 1
        doubled = ExpHawkesParams(1.0, 1.0, 1.0)
    assert pce(doubled, hawkes_10k)[0] > pce(CLASSIC, hawkes_10k)[0]


def test_compensator_increments_match_quadrature():
    seq = make_process("hawkes").simulate(CLASSIC, 10.0, 5)
    got = compensator_increments(CLASSIC, seq)
    starts = np.concatenate([[seq.t_start], seq.times[:-1]])
    for i, (a, b) in enumerate(zip(starts, seq.times)):
        exact = integrate.quad(lambda d: CLASSIC.intensity_after(seq, i, d).sum(), 0, b - a)[0]
        assert got[i] == pytest.approx(exact, rel=1e-3)


def test_single_event_pce_is_defined():
    value, curve = pce(ConstantIntensity((1.0,)), Dataset([EventSequence([0.5], [0], 1.0)], 1))
    assert curve.counts.sum() == 1 and 0 <= value <= 1


def test_empty_dataset_raises():
    with pytest.raises(ValueError):
        pce(CLASSIC, Dataset([EventSequence([], [], 1.0)], 1))
    with pytest.raises(ValueError):
        ece(CLASSIC, Dataset([], 1))


def test_ece_single_mark_is_zero():
    ds = Dataset([EventSequence([0.5, 0.9], [0, 0], 1.0)], 1)
    value, curve = ece(ConstantIntensity((2.0,)), ds)
    assert value == 0.0 and curve.counts[-1] == 2


def test_ece_balanced_marks_uniform_intensity():
    rng = make_rng(3)
    K = 4
    seqs = []
    for _ in range(100):
        times = np.sort(rng.uniform(0, 100, 100))
        seqs.append(EventSequence(times, rng.integers(0, K, 100), 100.0))
    ds = Dataset(seqs, K)
    value, curve = ece(ConstantIntensity((1.0,) * K), ds)
    assert ds.num_events == 10_000 and value < 0.02
    assert curve.counts.sum() == 10_000


# --- likelihood ratio and the full report ----------------------------------------------------


def test_ratio_of_identical_likelihoods_is_100():
    ll = np.array([-3.0, -4.5])
    assert likelihood_ratio_vs_oracle(ll, ll, 7) == pytest.approx(100.0, abs=1e-12)
    with pytest.raises(ValueError):
        likelihood_ratio_vs_oracle(ll, ll, 0)


def test_constant_rate_model_is_below_hawkes_oracle():
    proc = make_process("hawkes")
    ds, oracle = simulate_dataset(proc, 20, 50.0, 8)
    const = ConstantIntensity.fit(ds)
    rate = ds.num_events / (20 * 50.0)
    assert const.rates[0] == pytest.approx(rate)
    brute = [len(s) * math.log(rate) - rate * 50.0 for s in ds]
    mine = [const.log_likelihood(s) for s in ds]
    assert np.allclose(mine, brute, atol=1e-9)
    assert np.allclose(oracle, [hawkes_loglik_oracle(CLASSIC, s) for s in ds], atol=1e-12)
    assert likelihood_ratio_vs_oracle(mine, oracle, ds.num_events) < 100.0


def test_evaluate_report_invariants(tmp_path):
    proc = make_process("hawkes", k=2, nu=0.4, alpha=0.3, beta=1.0)
    ds, oracle = simulate_dataset(proc, 6, 15.0, 9)
    model = S2P2Model.init(S2P2Config(2, hidden=4, state=4))
    report = evaluate(model, ds, mc_points=5, oracle_ll=oracle, curves_dir=tmp_path, top_n=2)
    lls = model_log_likelihoods(model, ds, 5)
    assert np.max(np.abs(lls[0] - lls[1] - lls[2])) < 1e-9
    assert abs(report.per_event_total_ll - report.time_ll - report.mark_ll) < 1e-9
    assert 0 <= report.mark_accuracy <= report.top_n_accuracy <= 1
    assert 0 <= report.pce <= 1 and 0 <= report.ece <= 1
    assert report.likelihood_ratio_vs_oracle > 0
    assert report.num_events == ds.num_events
    payload = json.loads(report.to_json())
    assert payload["pce_definition"] == PCE_DEFINITION
    for name in ("pce_curve.csv", "ece_curve.csv"):
        rows = (tmp_path / name).read_text().splitlines()
        assert rows[0] == "bin_lo,bin_hi,frequency,nominal,count" and len(rows) == 21
    with pytest.raises(ValueError):
        evaluate(model, ds, oracle_ll=oracle[:-1])
