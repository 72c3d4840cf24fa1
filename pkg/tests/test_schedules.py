import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffspeech.schedules import ScheduleError, forward_sample, make_linear_schedule, reverse_step


def test_acoustic_schedule_endpoints():
    s = make_linear_schedule(1e-4, 0.05, 200)
    assert s.T == 200 and len(s.betas) == len(s.alphas) == len(s.alpha_bars) == 200
    assert s.beta(1) == 1e-4
    assert s.beta(200) == 0.05
    assert np.allclose(np.diff(s.betas), (0.05 - 1e-4) / 199, rtol=0, atol=1e-15)


def test_single_step_schedule():
    s = make_linear_schedule(0.1, 0.1, 1)
    assert s.betas.tolist() == [0.1]
    assert s.alphas.tolist() == [0.9]
    assert s.alpha_bars.tolist() == [0.9]


def test_alpha_bar_matches_exact_product():
    # oracle: exact rational product of the same double-precision alphas
    s = make_linear_schedule(1e-4, 0.05, 200)
    exact = Fraction(1)
    for a in s.alphas:
        exact *= Fraction(float(a))
    assert abs(s.alpha_bar(200) - float(exact)) <= 1e-14 * float(exact)


@pytest.mark.parametrize("args", [(0.0, 0.1, 10), (0.2, 0.1, 10), (1e-4, 1.0, 10), (1e-4, 0.05, 0),
                                  (1e-4, 0.05, 2.5), (-0.1, 0.05, 10)])
def test_rejects_bad_configuration(args):
    with pytest.raises(ScheduleError):
        make_linear_schedule(*args)


@settings(max_examples=60, deadline=None)
@given(bmin=st.floats(1e-6, 0.5, allow_subnormal=False), span=st.floats(0, 0.49, allow_subnormal=False), T=st.integers(1, 400))
def test_schedule_invariants(bmin, span, T):
    bmax = min(bmin + span, 0.999)
    s = make_linear_schedule(bmin, bmax, T)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert s.alpha_bar(1) == s.alpha(1)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas[1:], rtol=1e-14, atol=0)
    assert s.sigma(1) == 0.0
    assert all(s.sigma(t) > 0 for t in range(2, T + 1))


def test_arrays_are_read_only():
    s = make_linear_schedule(1e-4, 0.05, 10)
    with pytest.raises(ValueError):
        s.betas[0] = 0.5


def test_step_range_checked():
    s = make_linear_schedule(1e-4, 0.05, 10)
    x = np.zeros(3)
    with pytest.raises(ScheduleError):
        forward_sample(x, 11, x, s)
    with pytest.raises(ScheduleError):
        reverse_step(x, x, 0, s, x)
    assert s.alpha_bar(0) == 1.0


def test_forward_zero_noise(rng):
    s = make_linear_schedule(1e-4, 0.05, 50)
    x0 = rng.standard_normal((4, 7))
    for t in (1, 17, 50):
        assert np.array_equal(forward_sample(x0, t, np.zeros_like(x0), s), math.sqrt(s.alpha_bar(t)) * x0)


def test_forward_identity_limit(rng):
    s = make_linear_schedule(1e-12, 1e-12, 3)
    x0 = rng.standard_normal(10)
    assert np.allclose(forward_sample(x0, 3, rng.standard_normal(10), s), x0, atol=1e-5)


def test_forward_shape_mismatch():
    s = make_linear_schedule(1e-4, 0.05, 10)
    with pytest.raises(ValueError):
        forward_sample(np.zeros((2, 3)), 1, np.zeros((3, 2)), s)


def test_forward_variance_monte_carlo(rng):
    s = make_linear_schedule(1e-4, 0.05, 200)
    t, n = 60, 10_000
    out = forward_sample(np.zeros(n), t, rng.standard_normal(n), s)
    target = 1 - s.alpha_bar(t)
    # std error of a sample variance of a Gaussian is var * sqrt(2 / (n - 1))
    assert abs(out.var(ddof=1) - target) < 3 * target * math.sqrt(2 / (n - 1))


def test_forward_per_item_steps_match_scalar(rng):
    s = make_linear_schedule(1e-4, 0.05, 30)
    x0, eps = rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 5, 2))
    t = np.array([1, 12, 30])
    out = forward_sample(x0, t, eps, s)
    for i in range(3):
        assert np.allclose(out[i], forward_sample(x0[i], int(t[i]), eps[i], s), rtol=0, atol=1e-15)
    tt = forward_sample(torch.from_numpy(x0), torch.from_numpy(t), torch.from_numpy(eps), s)
    assert np.allclose(tt.numpy(), out, rtol=0, atol=1e-15)


def test_reverse_t1_inverts_forward(rng):
    s = make_linear_schedule(0.02, 0.02, 1)
    x0, eps = rng.standard_normal(100), rng.standard_normal(100)
    xt = forward_sample(x0, 1, eps, s)
    back = reverse_step(xt, eps, 1, s, np.full(100, 123.0))
    assert np.max(np.abs(back - x0)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(T=st.integers(2, 300), frac=st.floats(0, 1, allow_subnormal=False), seed=st.integers(0, 2**31))
def test_reverse_matches_hand_expansion(T, frac, seed):
    r = np.random.default_rng(seed)
    s = make_linear_schedule(1e-4, 0.05, T)
    t = 1 + int(frac * (T - 1))
    xt, eh, psi = r.standard_normal((3, 6))
    a = s.betas[:t]
    alpha_t = 1 - a[-1]
    ab_t = np.prod(1 - a)
    ab_prev = np.prod(1 - a[:-1])
    mean = (xt - (1 - alpha_t) / np.sqrt(1 - ab_t) * eh) / np.sqrt(alpha_t)
    sigma = np.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - alpha_t))
    assert np.allclose(reverse_step(xt, eh, t, s, psi), mean + sigma * psi, rtol=0, atol=1e-10)


def test_reverse_zero_fixed_point():
    s = make_linear_schedule(1e-4, 0.05, 20)
    z = np.zeros(5)
    for t in (1, 10, 20):
        assert np.array_equal(reverse_step(z, z, t, s, z), z)


def test_reverse_shape_mismatch():
    s = make_linear_schedule(1e-4, 0.05, 20)
    with pytest.raises(ValueError):
        reverse_step(np.zeros(3), np.zeros(4), 2, s, np.zeros(3))
