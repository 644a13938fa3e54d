import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from iecdiff.errors import InvalidRangeError
from iecdiff.schedule import (
    all_step_coeffs,
    coeffs_from_alpha_bars,
    make_beta_schedule,
    select_timesteps,
    step_coeffs,
)

from oracles import alpha_bar_product


def test_single_point_schedule():
    s = make_beta_schedule("linear", 1, 1e-4, 0.02)
    assert s.betas.tolist() == [1e-4]


def test_linear_midpoint_and_tail():
    s = make_beta_schedule("linear", 1000, 1e-4, 0.02)
    # direct evaluation of the interpolation at index 499
    assert s.betas[499] == pytest.approx(1e-4 + (499 / 999) * (0.02 - 1e-4), rel=1e-12)
    assert s.betas[499] == pytest.approx(0.01004004004, rel=1e-9)
    assert s.alpha_bars[999] == pytest.approx(alpha_bar_product(s.betas, 999), rel=1e-10)
    assert s.alpha_bars[999] < 1e-4


def test_schedule_invariants():
    s = make_beta_schedule()
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.array_equal(s.alphas, 1 - s.betas)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert s.sample_steps == tuple(range(1000))


@pytest.mark.parametrize("args", [
    ("linear", 0, 1e-4, 0.02),
    ("linear", 10, 0.0, 0.02),
    ("linear", 10, 0.03, 0.02),
    ("linear", 10, 1e-4, 1.0),
    ("cosine", 10, 1e-4, 0.02),
])
def test_invalid_schedule(args):
    with pytest.raises(InvalidRangeError):
        make_beta_schedule(*args)


@pytest.mark.parametrize("T_train,T_sample,expected", [
    (1000, 1000, list(range(1000))),
    (1000, 100, list(range(0, 1000, 10))),
    (10, 1, [0]),
    (10, 3, [0, 3, 6]),
])
def test_select_timesteps(T_train, T_sample, expected):
    s = select_timesteps(make_beta_schedule("linear", T_train), T_sample)
    assert list(s.sample_steps) == expected
    assert s.T_sample == T_sample


def test_select_timesteps_too_many():
    with pytest.raises(InvalidRangeError):
        select_timesteps(make_beta_schedule("linear", 10), 11)


def test_coefficients_hand_values():
    assert coeffs_from_alpha_bars(0.5, 0.5) == (1.0, 0.0)
    A, B = coeffs_from_alpha_bars(0.25, 0.5)
    assert A == pytest.approx(math.sqrt(2), abs=1e-12)
    # sqrt(0.5) - sqrt(0.5) * sqrt(0.75) / sqrt(0.25)
    assert B == pytest.approx(-0.5176380902050416, abs=1e-12)


def test_step_coeffs_positions(schedule100):
    first = step_coeffs(schedule100, 0)
    last = step_coeffs(schedule100, 99)
    assert (first.t_index, first.prev_index) == (990, 980)
    assert (last.t_index, last.prev_index) == (0, -1)
    assert last.alpha_bar_prev == 1.0
    with pytest.raises(InvalidRangeError):
        step_coeffs(schedule100, 100)


def test_step_coeffs_pure(schedule100):
    assert step_coeffs(schedule100, 42) == step_coeffs(schedule100, 42)


@pytest.mark.parametrize("T_sample", [1, 7, 25, 100, 1000])
def test_signs_on_monotone_schedule(T_sample):
    s = select_timesteps(make_beta_schedule(), T_sample)
    for c in all_step_coeffs(s):
        assert c.B < 0 and c.A > 1


def test_zero_noise_telescoping(schedule100):
    x_T = np.array([0.3, -1.2])
    x = x_T.copy()
    prod = 1.0
    for c in all_step_coeffs(schedule100):
        x = c.A * x + c.B * np.zeros(2)
        prod *= c.A
    np.testing.assert_allclose(x, x_T * prod, rtol=1e-12)
    # the product telescopes to 1 / sqrt(alpha_bar at the first sampled index)
    assert prod == pytest.approx(1 / math.sqrt(schedule100.alpha_bars[990]), rel=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 0.999), st.floats(1e-4, 0.999))
@example(0.00010000000000000002, 0.0001)
def test_sign_condition_property(a, b):
    ab_t, ab_prev = min(a, b), max(a, b)
    A, B = coeffs_from_alpha_bars(ab_t, ab_prev)
    assert A >= 1
    if ab_prev > ab_t:
        assert B < 0
