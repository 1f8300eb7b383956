import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from qpurify.analytics import (
    closed_form_populations,
    closed_form_state,
    closed_form_state_expm,
    constants,
    feedback_impurity_bound,
    mean_impurity_unassisted,
    record_cdf,
    record_density,
    sech_integral,
    speedup_lower_bound,
    speedup_lower_bound_log,
    two_level_asymptote,
    two_level_bound_L2,
    verify_lemma1,
)
from qpurify.core import build_observable
from qpurify.errors import InvalidDimensionError, ValidationError


@pytest.mark.parametrize("N, trX2, k", [(2, 1 / 8, 1 / 16), (3, 2 / 9, 1 / 27), (4, 5 / 16, 5 / 192)])
def test_constants_examples(N, trX2, k):
    c = constants(N)
    assert c.trX2 == pytest.approx(trX2, rel=1e-15)
    assert c.k == pytest.approx(k, rel=1e-15)


@pytest.mark.parametrize("N", range(2, 9))
def test_constants_identities(N):
    c = constants(N, 1.7)
    assert c.trX2 == pytest.approx(np.sum(build_observable(N).spectrum ** 2), rel=1e-14)
    assert 8 * N**2 * c.k == pytest.approx(2 * (N + 1) / 3, rel=1e-14)
    assert c.C_tilde == pytest.approx(math.sqrt(8 * math.pi) * (N - 1) / (c.C * N), rel=1e-15)


@pytest.mark.parametrize("N, gamma", [(2, 1.0), (3, 0.5), (4, 2.0)])
def test_sech_integral(N, gamma):
    # antiderivative oracle: integral of sech(a x) is 2 atan(tanh(a x / 2)) / a
    a = math.sqrt(2 * gamma) / N
    exact = 2 * (2 * math.atan(1.0)) / a
    assert sech_integral(N, gamma) == pytest.approx(math.pi * N / math.sqrt(2 * gamma), abs=1e-10)
    assert sech_integral(N, gamma) == pytest.approx(exact, abs=1e-10)
    assert constants(N, gamma).C == pytest.approx(exact, abs=1e-12)


def test_closed_form_examples():
    X = build_observable(3)
    np.testing.assert_allclose(np.asarray(closed_form_state(0.0, 0.3, X)), np.eye(3) / 3, atol=1e-16)
    n = np.array([-1, 0, 1])
    w = np.exp(-8 * (0.1 - n / 3) ** 2)
    np.testing.assert_allclose(np.diag(np.asarray(closed_form_state(2.0, 0.1, X))).real, w / w.sum(), atol=1e-15)
    rho = np.asarray(closed_form_state(500.0, 1 / 3, X))
    assert rho[2, 2].real > 1 - 1e-12
    with pytest.raises(ValidationError):
        closed_form_state(-1.0, 0.0, X)


@settings(max_examples=60, deadline=None)
@given(N=st.integers(2, 6), t=st.floats(0.0, 20.0), v=st.floats(-0.8, 0.8), gamma=st.floats(0.2, 3.0))
def test_closed_form_matches_matrix_exponential(N, t, v, gamma):
    X = build_observable(N)
    a = np.asarray(closed_form_state(t, v, X, gamma))
    b = np.asarray(closed_form_state_expm(t, v, X, gamma))
    assert np.max(np.abs(a - b)) <= 1e-12


def test_closed_form_vectorised():
    x = build_observable(4).spectrum
    v = np.linspace(-1, 1, 7)
    p = closed_form_populations(1.5, v, x)
    for i, vi in enumerate(v):
        np.testing.assert_allclose(p[i], closed_form_populations(1.5, vi, x), atol=1e-16)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-15)


@pytest.mark.parametrize("N, t", [(2, 0.1), (2, 10.0), (3, 1.0), (5, 3.0)])
def test_record_density_normalised(N, t):
    total, err = integrate.quad(record_density, -np.inf, np.inf, args=(t, N), epsabs=1e-13, limit=200)
    assert total == pytest.approx(1.0, abs=1e-10)
    assert record_cdf(10.0, t, N) == pytest.approx(1.0, abs=1e-15)
    assert record_cdf(0.0, t, N) == pytest.approx(0.5, abs=1e-15)


def test_record_density_peaks():
    t = 50.0
    width = 1 / math.sqrt(8 * t)
    for peak in (-0.25, 0.25):
        centre = record_density(peak, t, 2)
        # a Gaussian of standard deviation `width` drops by e^{-1/2} one width away
        assert record_density(peak + width, t, 2) / centre == pytest.approx(math.exp(-0.5), rel=1e-6)
    assert record_density(0.0, t, 2) < 1e-3 * record_density(0.25, t, 2)
    with pytest.raises(ValidationError):
        record_density(0.0, 0.0, 2)


@pytest.mark.parametrize("N", [2, 3, 4])
def test_mean_impurity_limits(N):
    assert mean_impurity_unassisted(1e-9, N) == pytest.approx(1 - 1 / N, abs=1e-6)
    ts = [0.1, 0.5, 1, 2, 5, 20]
    vals = [mean_impurity_unassisted(t, N) for t in ts]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_mean_impurity_by_monte_carlo_over_records(rng):
    # independent oracle: sample v from the mixture and average the closed-form impurity
    N, t = 3, 1.0
    x = build_observable(N).spectrum
    n = 400_000
    v = x[rng.integers(0, N, n)] + rng.normal(0, 1 / math.sqrt(8 * t), n)
    p = closed_form_populations(t, v, x)
    L = 1 - np.sum(p**2, axis=1)
    assert mean_impurity_unassisted(t, N) == pytest.approx(L.mean(), abs=4 * L.std() / math.sqrt(n))


@pytest.mark.parametrize("t", [0.05, 0.3, 1.0, 4.0, 12.0])
def test_two_level_reduction(t):
    # for N = 2 the unassisted mean is itself the two-level formula
    assert mean_impurity_unassisted(t, 2) == pytest.approx(two_level_bound_L2(t, 2), abs=1e-10)


def test_two_level_bound_direct_quadrature():
    # oracle: the original x-space integral evaluated with scipy directly
    for N, t in [(2, 0.5), (3, 2.0), (4, 7.0)]:
        f = lambda x: math.exp(-x * x / (2 * t)) / math.cosh(min(math.sqrt(2) * abs(x) / N, 700.0))  # noqa: E731
        val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-14, limit=200)
        direct = math.exp(-t / N**2) / math.sqrt(8 * math.pi * t) * val
        assert two_level_bound_L2(t, N) == pytest.approx(direct, rel=1e-9)


def test_two_level_asymptote():
    c = constants(2)
    assert two_level_asymptote(50.0, 2) == pytest.approx(math.exp(-50 / 4) * c.C / math.sqrt(8 * math.pi * 50), rel=1e-14)
    # the approach is algebraic: with b = N^2 / (4 gamma t) the relative gap is
    # b pi^2 / 4 - 5 b^2 pi^4 / 32 + O(b^3) (sech moments pi^3/8 and 5 pi^5/32)
    for N, t in [(2, 50.0), (2, 400.0), (3, 200.0)]:
        b = N**2 / (4 * t)
        gap = 1 - two_level_bound_L2(t, N) / two_level_asymptote(t, N)
        assert gap == pytest.approx(b * math.pi**2 / 4 - 5 * b**2 * math.pi**4 / 32, rel=0.03)
    assert two_level_bound_L2(2500.0, 2) == pytest.approx(two_level_asymptote(2500.0, 2), rel=1e-3)
    assert two_level_bound_L2(1e-12, 3) == pytest.approx(0.5, abs=1e-5)


@pytest.mark.parametrize("N", [3, 4])
def test_two_level_is_lower_bound(N):
    for t in [0.01, 0.1, 0.5, 1, 2, 5, 10, 30]:
        assert two_level_bound_L2(t, N) <= mean_impurity_unassisted(t, N)


def test_feedback_bound():
    assert feedback_impurity_bound(0.0, 3) == pytest.approx(2 / 3)
    assert feedback_impurity_bound(2.0, 2, L0=0.3) == pytest.approx(0.3 * math.exp(-1.0), rel=1e-14)
    assert feedback_impurity_bound(3.0, 4, 2.0) == pytest.approx(0.75 * math.exp(-5 * 2.0 * 3.0 / 24), rel=1e-14)
    with pytest.raises(ValidationError):
        feedback_impurity_bound(1.0, 2, L0=0.8)


def test_speedup_report_fields():
    rep = speedup_lower_bound(1e-4, 3)
    assert rep.k == pytest.approx(rep.trX2 / 6, rel=1e-14)
    assert rep.asymptotic_speedup == pytest.approx(8 / 3, abs=1e-14)
    assert two_level_bound_L2(rep.t_m, 3) == pytest.approx(1e-4, rel=1e-9)
    assert feedback_impurity_bound(rep.t_fb, 3) == pytest.approx(1e-4, rel=1e-12)
    assert rep.speedup_lower == pytest.approx(rep.t_m / rep.t_fb)
    assert rep.as_dict()["N"] == 3


@pytest.mark.parametrize("N", [2, 3, 4])
def test_speedup_monotone_below_limit(N):
    Ls = np.logspace(math.log10(0.3), -6, 40)
    s = [speedup_lower_bound(L, N).speedup_lower for L in Ls]
    assert all(b >= a - 1e-12 for a, b in zip(s, s[1:]))
    assert max(s) < 2 * (N + 1) / 3


@pytest.mark.parametrize("N", [2, 3, 4])
def test_speedup_limit_deep_target(N):
    rep = speedup_lower_bound_log(-1e5, N)
    assert rep.speedup_lower == pytest.approx(2 * (N + 1) / 3, rel=1e-3)


def test_speedup_validation():
    with pytest.raises(ValidationError):
        speedup_lower_bound(0.6, 2)
    with pytest.raises(ValidationError):
        speedup_lower_bound(0.0, 3)
    # above L2(0+) = 1/2 the two-level reference never reaches the target
    assert speedup_lower_bound(0.6, 3).speedup_lower == 0.0


@pytest.mark.parametrize("N", [2, 3, 4, 5])
def test_lemma1(N):
    rep = verify_lemma1(N, trials=50, seed=N, random_frames=3)
    assert rep.passed, rep
    assert rep.n_permutations == math.factorial(N)


def test_lemma1_examples():
    rep = verify_lemma1(2, [[0.9, 0.1]], rtol=1e-13)
    assert rep.passed and rep.max_rel_violation <= 1e-13
    for N in (2, 3, 4):
        pure = np.zeros(N)
        pure[0] = 1.0
        assert verify_lemma1(N, [pure]).passed
    assert verify_lemma1(5, trials=2).n_permutations == 120
    assert verify_lemma1(4, trials=50).max_rel_violation < 1e-11


def test_lemma1_negative_control():
    assert not verify_lemma1(3, k_override=constants(3).k * 1.001).passed
    with pytest.raises(InvalidDimensionError):
        verify_lemma1(6)
