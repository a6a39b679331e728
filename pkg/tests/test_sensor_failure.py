import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sensorppo.sensor_failure import (
    GROUP_DEFAULT,
    SENSOR_DEFAULT,
    ChainParams,
    FrozenChainError,
    MaskProcessState,
    SensorLayout,
    effective_rates,
    initial_state,
    mixing_time_bound,
    read_trace_csv,
    simulate_trace,
    steady_state,
    stationary_up_rate,
    step,
    write_trace_csv,
)

LAYOUT = SensorLayout.from_groups([[0, 1], [2, 3], [4, 5]])


def test_steady_state_examples():
    assert steady_state(ChainParams(0.0, 0.5)) == 1.0
    assert steady_state(ChainParams(0.01, 0.9)) == pytest.approx(0.9 / 0.91, abs=1e-15)
    assert round(steady_state(SENSOR_DEFAULT), 6) == 0.989011
    assert round(steady_state(GROUP_DEFAULT), 6) == 0.620690


def test_steady_state_matches_eigenvector():
    for p in [SENSOR_DEFAULT, GROUP_DEFAULT, ChainParams(0.3, 0.2)]:
        w, v = np.linalg.eig(p.transition_matrix().T)
        pi = np.real(v[:, np.argmin(np.abs(w - 1))])
        pi /= pi.sum()
        assert pi[1] == pytest.approx(steady_state(p), abs=1e-12)


def test_invalid_params():
    with pytest.raises(ValueError):
        ChainParams(-0.1, 0.5)
    with pytest.raises(ValueError):
        ChainParams(0.5, 1.1)
    with pytest.raises(FrozenChainError):
        steady_state(ChainParams(0.0, 0.0))
    with pytest.raises(FrozenChainError):
        mixing_time_bound(ChainParams(0.0, 0.0), GROUP_DEFAULT)


def test_effective_rates():
    r = effective_rates(SENSOR_DEFAULT, GROUP_DEFAULT)
    assert r.p_fail_eff == pytest.approx(0.5545, abs=1e-15)
    assert r.p_recover_eff == pytest.approx(0.81, abs=1e-15)
    assert effective_rates(ChainParams(0.0, 0.9), ChainParams(0.0, 0.9)).p_fail_eff == 0.0


def test_stationary_up_rate():
    assert stationary_up_rate(SENSOR_DEFAULT, GROUP_DEFAULT) == pytest.approx(0.9 / 0.91 * 0.9 / 1.45, abs=1e-15)
    assert stationary_up_rate(SENSOR_DEFAULT, GROUP_DEFAULT) == pytest.approx(0.61387, abs=1e-5)
    assert stationary_up_rate(SENSOR_DEFAULT, ChainParams(0.0, 0.3)) == steady_state(SENSOR_DEFAULT)
    assert stationary_up_rate(ChainParams(0.3, 0.3), ChainParams(0.7, 0.7)) == pytest.approx(0.25)


def test_mixing_time_bound():
    assert mixing_time_bound(SENSOR_DEFAULT, GROUP_DEFAULT) == pytest.approx(math.log(4) / 0.91, abs=1e-12)
    assert mixing_time_bound(SENSOR_DEFAULT, GROUP_DEFAULT) == pytest.approx(1.5235, abs=1e-4)
    g = math.log(4)
    assert mixing_time_bound(ChainParams(g / 2, g / 2), ChainParams(g / 2, g / 2)) == pytest.approx(1.0)
    a, b = ChainParams(0.2, 0.4), ChainParams(0.5, 0.3)
    half = mixing_time_bound(ChainParams(0.1, 0.2), ChainParams(0.25, 0.15))
    assert half == pytest.approx(2 * mixing_time_bound(a, b))


def test_layout_validation():
    with pytest.raises(ValueError):
        SensorLayout.from_groups([[0, 1], [1, 2]])
    with pytest.raises(ValueError):
        SensorLayout(group_of=(0, 2))
    assert LAYOUT.d == 6 and LAYOUT.g == 3


def test_step_examples():
    rng = np.random.default_rng(0)
    up = MaskProcessState(np.ones(6, np.int8), np.ones(3, np.int8), np.ones(6, np.int8))
    never_fail = ChainParams(0.0, 0.5)
    s = up
    for _ in range(50):
        s = step(s, LAYOUT, never_fail, never_fail, rng)
    assert s.x.all()
    down = MaskProcessState(np.zeros(6, np.int8), np.zeros(3, np.int8), np.zeros(6, np.int8))
    nxt = step(down, LAYOUT, ChainParams(0.0, 1.0), ChainParams(0.0, 1.0), rng)
    assert nxt.x.all()


def test_step_consumes_d_plus_g_uniforms():
    rng_a, rng_b = np.random.default_rng(4), np.random.default_rng(4)
    s = initial_state(LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, rng_a)
    rng_b.random(LAYOUT.d + LAYOUT.g)
    step(s, LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, rng_a)
    rng_b.random(LAYOUT.d + LAYOUT.g)
    assert rng_a.random() == rng_b.random()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), pf=st.floats(0, 1), pr=st.floats(0.01, 1))
def test_x_is_product_of_layers(seed, pf, pr):
    rng = np.random.default_rng(seed)
    p = ChainParams(pf, pr)
    s = initial_state(LAYOUT, p, GROUP_DEFAULT, rng)
    for _ in range(5):
        s = step(s, LAYOUT, p, GROUP_DEFAULT, rng)
        assert np.array_equal(s.x, s.z * s.y[LAYOUT.index])


def test_trace_matches_stepwise_simulation():
    T = 500
    xs, zs, ys = simulate_trace(LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, T, 7, return_layers=True, block=64)
    rng = np.random.default_rng(7)
    s = initial_state(LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, rng)
    for t in range(T):
        assert np.array_equal(xs[t], s.x) and np.array_equal(zs[t], s.z) and np.array_equal(ys[t], s.y)
        s = step(s, LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, rng)


def test_trace_reproducible():
    a = simulate_trace(LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, 1000, 3)
    b = simulate_trace(LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, 1000, 3)
    assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def long_trace():
    return simulate_trace(LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, 1_000_000, 11, return_layers=True)


def test_empirical_up_rate(long_trace):
    xs, zs, ys = long_trace
    pi_x = stationary_up_rate(SENSOR_DEFAULT, GROUP_DEFAULT)
    assert np.all(np.abs(xs.mean(axis=0) - pi_x) < 0.01)


def _se_markov(p: ChainParams, T: int) -> float:
    # standard error of a two-state chain's time average: var * (1 + rho) / (1 - rho) / T
    pi = steady_state(p)
    rho = 1.0 - p.gap
    return math.sqrt(pi * (1 - pi) * (1 + rho) / (1 - rho) / T)


def test_layer_stationarity_within_three_se(long_trace):
    _, zs, ys = long_trace
    T = zs.shape[0]
    assert np.all(np.abs(zs.mean(axis=0) - steady_state(SENSOR_DEFAULT)) < 3 * _se_markov(SENSOR_DEFAULT, T) + 1e-12)
    assert np.all(np.abs(ys.mean(axis=0) - steady_state(GROUP_DEFAULT)) < 3 * _se_markov(GROUP_DEFAULT, T) + 1e-12)


def test_same_group_positively_correlated(long_trace):
    xs = long_trace[0]
    for a, b in [(0, 1), (2, 3), (4, 5)]:
        assert np.corrcoef(xs[:, a], xs[:, b])[0, 1] > 0


def test_autocorrelation_envelope(long_trace):
    # Each layer's autocorrelation at lag k is (1 - gap)^k, so the effective
    # status decays no slower than max |1 - gap|^k over the two layers.
    xs = long_trace[0]
    x = xs[:, 0].astype(float) - xs[:, 0].mean()
    rate = max(abs(1 - SENSOR_DEFAULT.gap), abs(1 - GROUP_DEFAULT.gap))
    var = x @ x
    for lag in (1, 5, 10):
        acf = (x[:-lag] @ x[lag:]) / var
        assert abs(acf) <= rate ** lag + 0.005


def test_stationary_initialisation():
    # x at t = 0 and at t = 10^4 across many independent traces: two-proportion z-test
    n = 20_000
    rng = np.random.default_rng(1)
    s0 = initial_state(LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, rng, batch=(n,))
    s = s0
    for _ in range(10_000 // 100):
        for _ in range(100):
            s = step(s, LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, rng)
    p0, p1 = s0.x[:, 0].mean(), s.x[:, 0].mean()
    pooled = (p0 + p1) / 2
    z = (p0 - p1) / math.sqrt(2 * pooled * (1 - pooled) / n)
    assert abs(z) < 2.576


def test_trace_csv_roundtrip(tmp_path):
    xs = simulate_trace(LAYOUT, SENSOR_DEFAULT, GROUP_DEFAULT, 50, 0)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, xs)
    assert path.read_text().splitlines()[0] == "t,x_0,x_1,x_2,x_3,x_4,x_5"
    assert np.array_equal(read_trace_csv(path), xs)
