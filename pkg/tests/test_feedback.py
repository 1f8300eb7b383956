import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpurify.analytics import constants
from qpurify.core import (
    DensityMatrix,
    build_observable,
    eig_hermitian,
    impurity,
    is_unbiased,
    maximally_mixed,
    unbiased_basis,
)
from qpurify.errors import CapabilityError, InvalidDimensionError
from qpurify.feedback import (
    PermutationSearch,
    decay_rate,
    frame_observable,
    rate_constant,
    restore_basis,
    select_permutation,
    simulate_feedback,
    simulate_feedback_batch,
)
from qpurify.sme import ArrayNoise, CounterNoise, SmeConfig

from conftest import random_density


def _brute_rate(XF, lam, gamma=1.0):
    # matrix-product oracle: -8 gamma Tr[X rho X rho] with rho diagonal in the frame
    rho = np.diag(lam)
    return float(-8 * gamma * np.trace(XF @ rho @ XF @ rho).real)


@pytest.mark.parametrize("N", range(2, 7))
def test_rate_constant(N):
    assert rate_constant(build_observable(N)) == pytest.approx(constants(N).k, rel=1e-14)
    assert rate_constant(frame_observable(build_observable(N))) == pytest.approx(constants(N).k, rel=1e-12)


def test_decay_rate_examples(rng):
    XF2 = frame_observable(build_observable(2))
    assert decay_rate(XF2, [0.5, 0.5], gamma=1.0) == pytest.approx(-0.25, abs=1e-15)
    assert decay_rate(XF2, [0.5, 0.5], gamma=2.0) == pytest.approx(-0.5, abs=1e-15)
    for N in range(2, 7):
        XF = frame_observable(build_observable(N))
        lam = np.full(N, 1.0 / N)
        assert decay_rate(XF, lam) == pytest.approx(-8 * constants(N).trX2 / N**2, rel=1e-12)
        pure = np.zeros(N)
        pure[0] = 1.0
        assert decay_rate(XF, pure) == pytest.approx(0.0, abs=1e-15)
    for _ in range(20):
        lam = rng.dirichlet([1, 1])
        assert decay_rate(XF2, lam, 1.7) == pytest.approx(_brute_rate(XF2, lam, 1.7), abs=1e-14)


def test_selection_examples():
    XF2 = frame_observable(build_observable(2))
    assert select_permutation(XF2, [0.8, 0.2])[0] == (0, 1)
    for N in range(2, 6):
        XF = frame_observable(build_observable(N))
        sigma, rate = select_permutation(XF, np.full(N, 1.0 / N))
        assert sigma == tuple(range(N))


def test_selection_three_level_enumeration():
    XF = frame_observable(build_observable(3))
    lam = np.array([0.6, 0.3, 0.1])
    rates = {p: _brute_rate(XF, lam[list(p)]) for p in itertools.permutations(range(3))}
    sigma, rate = select_permutation(XF, lam)
    assert rate == pytest.approx(min(rates.values()), abs=1e-15)
    assert rates[sigma] == pytest.approx(rate, abs=1e-15)
    L = 1 - np.sum(lam**2)
    assert rate <= -8 * constants(3).k * L + 1e-15


@settings(max_examples=80, deadline=None)
@given(N=st.integers(2, 7), seed=st.integers(0, 2**32 - 1))
def test_best_placement_meets_guarantee_and_greedy_is_no_faster(N, seed):
    rng = np.random.default_rng(seed)
    lam = np.sort(rng.dirichlet(np.ones(N)))[::-1]
    XF = frame_observable(build_observable(N))
    _, r_ex = select_permutation(XF, lam, "exhaustive")
    _, r_gr = select_permutation(XF, lam, "greedy")
    L = 1 - np.sum(lam**2)
    assert r_ex <= -8 * rate_constant(build_observable(N)) * L + 1e-12
    assert r_gr >= r_ex - 1e-14


def test_exhaustive_capability_limit():
    XF = frame_observable(build_observable(9))
    with pytest.raises(CapabilityError):
        PermutationSearch(XF, "exhaustive")
    with pytest.raises(CapabilityError):
        PermutationSearch(XF, "simulated-annealing")
    sigma, rate = select_permutation(XF, np.linspace(2, 1, 9) / np.linspace(2, 1, 9).sum(), "greedy")
    assert sorted(sigma) == list(range(9))
    assert rate < 0


def test_restore_basis_examples():
    F2 = unbiased_basis(2)
    rho, U = restore_basis(DensityMatrix.from_populations([0.8, 0.2]), F2)
    r = np.asarray(rho)
    np.testing.assert_allclose(np.diag(r).real, 0.5, atol=1e-15)
    np.testing.assert_allclose(abs(r[0, 1]), 0.3, atol=1e-15)
    np.testing.assert_allclose(U.entries @ np.diag([0.8, 0.2]) @ U.entries.conj().T, r, atol=1e-15)

    F3 = np.asarray(unbiased_basis(3))
    given_state = (F3 * np.array([0.5, 0.3, 0.2])) @ F3.conj().T
    rho, U = restore_basis(given_state, F3)
    np.testing.assert_allclose(np.asarray(rho), given_state, atol=1e-14)
    np.testing.assert_allclose(U.entries @ given_state @ U.entries.conj().T, given_state, atol=1e-14)

    with pytest.raises(InvalidDimensionError):
        restore_basis(given_state, F3, (0, 0, 1))


@settings(max_examples=60, deadline=None)
@given(N=st.integers(2, 5), seed=st.integers(0, 2**32 - 1), data=st.data())
def test_restore_basis_is_unitary_action(N, seed, data):
    rng = np.random.default_rng(seed)
    rho = random_density(rng, N)
    perm = data.draw(st.permutations(list(range(N))))
    F = unbiased_basis(N)
    new, U = restore_basis(rho, F, perm)
    Um = U.entries
    np.testing.assert_allclose(Um @ rho @ Um.conj().T, np.asarray(new), atol=1e-12)
    np.testing.assert_allclose(
        np.sort(np.linalg.eigvalsh(np.asarray(new))), np.sort(np.linalg.eigvalsh(rho)), atol=1e-12
    )
    assert abs(impurity(new) - impurity(rho)) <= 1e-12
    # the new state is diagonal in the frame with the requested placement
    lam = eig_hermitian(rho).eigenvalues
    inframe = np.asarray(F).conj().T @ np.asarray(new) @ np.asarray(F)
    np.testing.assert_allclose(inframe, np.diag(lam[list(perm)]), atol=1e-12)


def test_restore_basis_with_random_unbiased_frame(rng):
    # any frame works; diagonal phases keep the Fourier frame unbiased
    N = 4
    F = np.asarray(unbiased_basis(N)) * np.exp(2j * np.pi * rng.random(N))
    rho = random_density(rng, N)
    new, _ = restore_basis(rho, F)
    np.testing.assert_allclose(np.diag(np.asarray(new)).real, 1 / N, atol=1e-12)


def test_first_step_from_maximally_mixed():
    for N in (2, 3, 4):
        cfg = SmeConfig(dt=1e-4, t_final=1e-3, master_seed=1)
        rec, reports = simulate_feedback(maximally_mixed(N), build_observable(N), cfg)
        first = reports[0]
        assert first.time == 0.0
        assert first.chosen_permutation == tuple(range(N))
        assert first.achieved_rate == pytest.approx(-8 * constants(N).trX2 / N**2, rel=1e-12)
        assert len(reports) == cfg.n_steps + 1
        assert rec.permutations.shape == (cfg.n_steps, N)


def test_two_level_oracle():
    # with the state kept on the sigma_x axis a step with record dy rescales
    # the impurity by exactly 1 / cosh^2(2 gamma dy), and dy = dW / sqrt(8 gamma)
    gamma, dt = 1.0, 1e-4
    cfg = SmeConfig(gamma=gamma, dt=dt, t_final=2.0, master_seed=8)
    X = build_observable(2)
    rec, reports = simulate_feedback(maximally_mixed(2), X, cfg, keep_unitaries=False)
    dW = CounterNoise(8, [0], dt)(0, cfg.n_steps)[:, 0]
    np.testing.assert_allclose(rec.record_increments, dW / math.sqrt(8 * gamma), atol=1e-17)
    oracle = 0.5 / np.cumprod(np.cosh(math.sqrt(gamma / 2) * dW) ** 2)
    rel = np.max(np.abs(rec.impurities / oracle - 1))
    assert rel < 1e-3


def test_unbiasedness_is_maintained():
    N = 3
    X = build_observable(N)
    cfg = SmeConfig(dt=1e-4, t_final=0.05, master_seed=3, trajectory_index=1, thinning=50)
    rec, _ = simulate_feedback(maximally_mixed(N), X, cfg)
    for rho in rec.states:
        np.testing.assert_allclose(np.diag(rho).real, 1 / N, atol=1e-12)
        assert is_unbiased(X, eig_hermitian(rho).eigenvectors, 1e-9)


def test_per_step_guarantee_many_trajectories():
    N = 3
    X = build_observable(N)
    dt, n = 1e-4, 2000
    res = simulate_feedback_batch(maximally_mixed(N), X, 1.0, dt, n, CounterNoise(0, range(200), dt))
    assert not res.failures
    assert res.rate_checks == 200 * (n + 1)
    assert res.rate_violations == 0
    assert res.worst_rate_margin <= 1e-9


def test_reports_satisfy_guarantee():
    cfg = SmeConfig(dt=1e-4, t_final=0.1, master_seed=2)
    _, reports = simulate_feedback(maximally_mixed(4), build_observable(4), cfg)
    assert all(r.satisfied(1e-9) for r in reports)
    U = reports[5].applied_unitary.entries
    np.testing.assert_allclose(U.conj().T @ U, np.eye(4), atol=1e-12)


def test_one_step_change_follows_rate_on_average():
    N, gamma, dt, B = 3, 1.0, 1e-4, 40_000
    X = build_observable(N)
    lam = np.array([0.55, 0.3, 0.15])
    F = np.asarray(unbiased_basis(N))
    rho0 = (F * lam) @ F.conj().T
    start = {}

    def hook(step, t, rho, Y, dy, sigma, achieved, guaranteed, V):
        if step < 0:
            start["rate"] = achieved[0]
            start["L"] = 1 - np.sum(np.abs(rho[0]) ** 2)

    rng = np.random.default_rng(5)
    dW = rng.normal(0, math.sqrt(dt), size=(1, B))
    res = simulate_feedback_batch(rho0, X, gamma, dt, 1, ArrayNoise(dW), hook=hook)
    dL = res.impurities[:, 0] - start["L"]
    se = dL.std() / math.sqrt(B)
    assert abs(dL.mean() - start["rate"] * dt) < 4 * se + 10 * dt**2
    # the fluctuation is carried by (dW^2 - dt), not by dW itself
    z = dW[0] ** 2 - dt
    coef = np.polyfit(z, dL - start["rate"] * dt, 1)
    resid = dL - start["rate"] * dt - np.polyval(coef, z)
    assert np.std(resid) < 0.05 * np.std(dL)


def test_ensemble_mean_below_bound():
    N, dt, n, B = 3, 1e-4, 5000, 200
    X = build_observable(N)
    res = simulate_feedback_batch(maximally_mixed(N), X, 1.0, dt, n, CounterNoise(4, range(B), dt), record_every=500)
    k = constants(N).k
    bound = np.exp(-8 * k * res.record_times) * (1 - 1 / N)
    mean = res.impurities.mean(axis=0)
    se = res.impurities.std(axis=0, ddof=1) / math.sqrt(B)
    assert np.all(mean <= bound + 3 * se)


def test_greedy_mode_runs():
    cfg = SmeConfig(dt=1e-4, t_final=0.05, master_seed=2)
    rec, reports = simulate_feedback(maximally_mixed(5), build_observable(5), cfg, "greedy")
    assert rec.impurities[-1] < 0.8
