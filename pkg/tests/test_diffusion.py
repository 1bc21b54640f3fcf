import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from deitsp.diffusion import (
    NoiseSchedule,
    add_noise,
    add_noise_between,
    closed_form_transition,
    cumulative_transition,
    iteration_schedule,
    linear_beta_schedule,
    median_step,
    sample_uniform_state,
)
from deitsp.errors import ConfigError, InputError, SizeError
from deitsp.tsp import Tour, tour_to_edge_matrix

DEFAULT = linear_beta_schedule(1000)


def test_linear_endpoints():
    assert DEFAULT.betas[0] == pytest.approx(1e-4, abs=1e-18)
    assert DEFAULT.betas[-1] == pytest.approx(0.02, abs=1e-18)
    assert np.allclose(linear_beta_schedule(2).betas, [1e-4, 0.02], rtol=0, atol=1e-18)
    assert linear_beta_schedule(3).betas[1] == pytest.approx(0.01005, abs=1e-15)
    with pytest.raises(SizeError):
        linear_beta_schedule(1)


def test_cumulative_examples():
    s = NoiseSchedule([0.1, 0.1])
    assert np.allclose(cumulative_transition(s, 1), [[0.9, 0.1], [0.1, 0.9]], atol=1e-15)
    assert np.allclose(cumulative_transition(s, 2), [[0.82, 0.18], [0.18, 0.82]], atol=1e-15)
    with pytest.raises(InputError):
        cumulative_transition(s, 3)
    with pytest.raises(InputError):
        cumulative_transition(s, 0)


def test_schedule_rejects_bad_betas():
    with pytest.raises(ConfigError):
        NoiseSchedule([0.5])
    with pytest.raises(ConfigError):
        NoiseSchedule([-0.01])


@given(st.lists(st.floats(0.0, 0.49), min_size=1, max_size=40))
def test_rows_stochastic_and_symmetric(betas):
    s = NoiseSchedule(betas)
    for t in range(1, s.T + 1):
        q = cumulative_transition(s, t)
        assert np.allclose(q.sum(axis=1), 1.0, atol=1e-12)
        assert q[0, 1] == pytest.approx(q[1, 0], abs=1e-15)
        assert np.max(np.abs(q - closed_form_transition(s, t))) < 1e-12


def test_identity_schedule_keeps_bits():
    s = NoiseSchedule(np.zeros(5))
    a0 = tour_to_edge_matrix(Tour(range(8)))
    assert np.array_equal(add_noise(a0, s, 5, 0), a0)


def test_flip_rate_matches_018():
    s = NoiseSchedule([0.1, 0.1])
    a = np.ones((317, 317))  # ~10^5 off-diagonal entries
    out = add_noise(a, s, 2, 1)
    mask = ~np.eye(317, dtype=bool)
    assert abs(1 - out[mask].mean() - 0.18) < 0.01


def test_final_step_near_uniform():
    a = np.zeros((1001, 1001))
    out = add_noise(a, DEFAULT, 1000, 2)
    assert abs(out[~np.eye(1001, dtype=bool)].mean() - 0.5) < 0.01


def test_add_noise_diagonal_and_determinism():
    a = np.full((6, 6), 0.3)
    x, y = add_noise(a, DEFAULT, 500, [4, 2]), add_noise(a, DEFAULT, 500, [4, 2])
    assert np.array_equal(x, y)
    assert np.all(np.diag(x) == 0)


def test_add_noise_probability_rows():
    # p = 0.3 at t: P(1) = 0.7 * q01 + 0.3 * q11
    q = cumulative_transition(DEFAULT, 100)
    expect = 0.7 * q[0, 1] + 0.3 * q[1, 1]
    out = add_noise(np.full((400, 400), 0.3), DEFAULT, 100, 5)
    frac = out[~np.eye(400, dtype=bool)].mean()
    sigma = np.sqrt(expect * (1 - expect) / (400 * 399))
    assert abs(frac - expect) < 4 * sigma


def test_add_noise_rejects_bad_input():
    with pytest.raises(InputError):
        add_noise(np.full((3, 3), 1.5), DEFAULT, 1)
    with pytest.raises(InputError):
        add_noise(np.zeros((3, 3)), DEFAULT, 1001)


def test_composability_chi_square():
    s = linear_beta_schedule(1000)
    n = 317
    a0 = np.ones((n, n))
    mask = ~np.eye(n, dtype=bool)
    direct = add_noise(a0, s, 400, 11)[mask]
    mid = add_noise(a0, s, 150, 12)
    composed = add_noise_between(mid, s, 150, 400, 13)[mask]
    table = [[direct.sum(), direct.size - direct.sum()], [composed.sum(), composed.size - composed.sum()]]
    _, pvalue, _, _ = stats.chi2_contingency(table)
    assert pvalue > 0.05


def test_uniform_state():
    a, b = sample_uniform_state(5, 3), sample_uniform_state(5, 3)
    assert np.array_equal(a, b)
    big = sample_uniform_state(1001, 9)
    assert abs(big[~np.eye(1001, dtype=bool)].mean() - 0.5) < 0.002
    small = sample_uniform_state(3, 0)
    assert small.shape == (3, 3) and np.all(np.diag(small) == 0)
    with pytest.raises(SizeError):
        sample_uniform_state(2)


@pytest.mark.parametrize(
    "kind,M,l,r,expect",
    [
        ("linear", 5, None, None, (875, 625, 375, 125)),
        ("inverse", 5, 0.25, 1.5, (538, 217, 90, 23)),
        ("cosine", 3, None, None, (923, 382)),
    ],
)
def test_iteration_schedule_examples(kind, M, l, r, expect):
    assert iteration_schedule(kind, M, 1000, l, r).steps == expect


def _oracle_taus(f, M, T, l, r):
    # scalar re-derivation of the midpoint rule
    S = M - 1
    lo, hi = sorted((f(l), f(r)))
    out = []
    for i in range(1, S + 1):
        c = l + (r - l) * (i - 0.5) / S
        out.append(min(max(int((f(c) - lo) / (hi - lo) * T), 1), T - 1))
    return tuple(sorted(out, reverse=True))


@pytest.mark.parametrize("M", [2, 3, 5, 9, 17])
def test_inverse_matches_scalar_oracle(M):
    assert iteration_schedule("inverse", M, 1000).steps == _oracle_taus(lambda c: 1 / c, M, 1000, 0.25, 1.5)


def test_single_iteration_empty():
    assert iteration_schedule("linear", 1, 1000).steps == ()


@pytest.mark.parametrize("M", [3, 5, 9, 17])
def test_inverse_lower_median(M):
    assert median_step(iteration_schedule("inverse", M, 1000)) < median_step(iteration_schedule("linear", M, 1000))


@given(st.sampled_from(["linear", "cosine", "inverse"]), st.integers(1, 60), st.integers(100, 2000))
def test_schedules_strictly_decreasing(kind, M, T):
    try:
        s = iteration_schedule(kind, M, T)
    except ConfigError as exc:
        # coarse T can merge neighbouring levels; that is reported, never emitted
        assert "duplicate" in str(exc)
        return
    assert len(s) == M - 1
    assert all(a > b for a, b in zip(s.steps, s.steps[1:]))
    assert all(1 <= x <= T - 1 for x in s.steps)


def test_non_monotone_rejected():
    with pytest.raises(ConfigError):
        iteration_schedule("custom", 4, 1000, -1.0, 1.0, f=lambda c: c * c)
    with pytest.raises(ConfigError):
        iteration_schedule("inverse", 4, 1000, -1.0, 1.0)


def test_custom_and_bad_arguments():
    s = iteration_schedule("custom", 3, 1000, 0.0, 1.0, f=lambda c: c)
    assert s.steps == (750, 250)
    with pytest.raises(ConfigError):
        iteration_schedule("bogus", 3, 1000)
    with pytest.raises(ConfigError):
        iteration_schedule("linear", 0, 1000)
    with pytest.raises(ConfigError):
        iteration_schedule("linear", 3, 1000, 1.0, 0.5)
    with pytest.raises(ConfigError):
        iteration_schedule("linear", 50, 10)  # collapses to duplicates
