import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iecdiff.errors import DimensionError, InvalidRangeError
from iecdiff.models import (
    GaussianMixtureModel,
    LinearGaussianModel,
    default_mixture,
    fd_jacobian,
    model_from_dict,
)
from iecdiff.schedule import make_beta_schedule, select_timesteps

from conftest import make_linear
from oracles import central_difference_jacobian, gaussian_mixture_eps_bruteforce


@pytest.fixture(scope="module")
def sched():
    return select_timesteps(make_beta_schedule(), 100)


def t_with_alpha_bar(schedule, target):
    return int(np.argmin(np.abs(schedule.alpha_bars - target)))


def test_linear_eps_zero_at_mean(sched):
    m = LinearGaussianModel([0.0, 0.0], np.eye(2), sched)
    for t in (0, 500, 999):
        assert np.array_equal(m.eps(np.zeros(2), t), np.zeros(2))


def test_linear_eps_scalar_closed_form():
    # single-step schedule with beta = 0.64 gives alpha_bar = 0.36
    s = make_beta_schedule("linear", 1, 0.64, 0.64)
    m = LinearGaussianModel([0.0], [[1.0]], s)
    assert s.alpha_bar_at(0) == pytest.approx(0.36)
    assert m.eps(np.array([2.5]), 0) == pytest.approx([0.8 * 2.5], rel=1e-12)
    np.testing.assert_allclose(m.jacobian(np.array([2.5]), 0), [[0.8]], rtol=1e-12)


def test_linear_jacobian_constant(sched):
    m = make_linear(3, sched)
    rng = np.random.default_rng(1)
    J1 = m.jacobian(rng.standard_normal(3), 300)
    J2 = m.jacobian(rng.standard_normal(3), 300)
    assert np.array_equal(J1, J2)
    np.testing.assert_allclose(J1, J1.T, atol=1e-14)


def test_linear_coeffs_match_eps(sched):
    m = make_linear(4, sched)
    x = np.random.default_rng(2).standard_normal(4)
    M, b = m.linear_coeffs(640)
    np.testing.assert_allclose(M @ x + b, m.eps(x, 640), rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 999))
def test_linear_model_is_affine(a, t):
    s = make_beta_schedule()
    m = make_linear(2, s, seed=3)
    rng = np.random.default_rng(t)
    x, y = rng.standard_normal((2, 2))
    lhs = m.eps(a * x + (1 - a) * y, t)
    rhs = a * m.eps(x, t) + (1 - a) * m.eps(y, t)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


def test_single_component_mixture_matches_linear(sched):
    rng = np.random.default_rng(4)
    lin = make_linear(2, sched, seed=5)
    mix = GaussianMixtureModel([1.0], [lin.mu], [lin.sigma], sched)
    probes = rng.standard_normal((100, 2)) * 2
    for t in (0, 250, 990):
        np.testing.assert_allclose(mix.eps(probes, t), lin.eps(probes, t), rtol=0, atol=1e-12)


def test_mixture_eps_matches_score_oracle(sched):
    m = default_mixture(sched)
    rng = np.random.default_rng(6)
    for t in (10, 200, 700):
        ab = sched.alpha_bar_at(t)
        for x in rng.standard_normal((5, 2)) * 2:
            expected = gaussian_mixture_eps_bruteforce(x, m.weights, m.means, m.covariances, ab)
            np.testing.assert_allclose(m.eps(x, t), expected, rtol=1e-6, atol=1e-8)


def test_mixture_jacobian_finite_differences(sched):
    weights = [0.2, 0.5, 0.3]
    means = [[-1.0, 0.5], [1.5, -0.5], [0.0, 2.0]]
    covs = [[[1.0, 0.3], [0.3, 0.5]], [[0.4, 0.0], [0.0, 2.0]], [[1.2, -0.4], [-0.4, 0.8]]]
    m = GaussianMixtureModel(weights, means, covs, sched)
    rng = np.random.default_rng(7)
    for t in (0, 100, 400, 900):
        for x in rng.standard_normal((10, 2)) * 1.5:
            exact = m.jacobian(x, t)
            fd = central_difference_jacobian(lambda y: m.eps(y, t), x, 1e-5)
            np.testing.assert_allclose(exact, fd, rtol=1e-5, atol=1e-5 * np.abs(exact).max())
            np.testing.assert_allclose(exact, exact.T, atol=1e-12)


def test_mixture_batch_matches_rows(mixture100):
    xs = np.random.default_rng(8).standard_normal((7, 2))
    batch = mixture100.eps(xs, 330)
    for i, x in enumerate(xs):
        assert np.array_equal(mixture100.eps(x, 330), batch[i])
    J = mixture100.jacobian(xs, 330)
    assert J.shape == (7, 2, 2)
    np.testing.assert_array_equal(J[3], mixture100.jacobian(xs[3], 330))


def test_responsibilities_sum_to_one(mixture100):
    xs = np.random.default_rng(9).standard_normal((50, 2)) * 3
    r = mixture100.responsibilities(xs, 0)
    assert np.all(r > 0)
    np.testing.assert_allclose(r.sum(axis=-1), 1.0, rtol=1e-12)


def test_mixture_collapse_converges(sched):
    lin = LinearGaussianModel([0.5, -0.5], np.eye(2), sched)
    x = np.array([1.0, 2.0])
    gaps = []
    for eps_w in (1e-1, 1e-3, 1e-6):
        mix = GaussianMixtureModel([1 - eps_w, eps_w], [[0.5, -0.5], [3.0, 3.0]],
                                   [np.eye(2), np.eye(2)], sched)
        gaps.append(np.linalg.norm(mix.eps(x, 500) - lin.eps(x, 500)))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-5


def test_fd_fallback_jacobian(sched):
    m = default_mixture(sched)
    x = np.array([0.3, 0.9])
    np.testing.assert_allclose(fd_jacobian(lambda y: m.eps(y, 50), x), m.jacobian(x, 50),
                               rtol=1e-5, atol=1e-7)


def test_dimension_mismatch(mixture100):
    with pytest.raises(DimensionError):
        mixture100.eps(np.zeros(3), 0)


@pytest.mark.parametrize("kwargs", [
    dict(weights=[0.5, 0.6], means=[[0, 0], [1, 1]], covariances=[np.eye(2)] * 2),
    dict(weights=[1.0], means=[[0, 0]], covariances=[[[1, 0], [0, -1]]]),
    dict(weights=[1.0], means=[[0, 0]], covariances=[[[1, 0.5], [0, 1]]]),
])
def test_invalid_mixture(sched, kwargs):
    with pytest.raises(InvalidRangeError):
        GaussianMixtureModel(schedule=sched, **kwargs)


def test_model_from_dict_roundtrip(sched):
    m = default_mixture(sched)
    again = model_from_dict(m.to_dict(), sched)
    x = np.array([0.1, 0.2])
    assert np.array_equal(m.eps(x, 10), again.eps(x, 10))
    lin = make_linear(2, sched)
    assert np.array_equal(model_from_dict(lin.to_dict(), sched).eps(x, 10), lin.eps(x, 10))
