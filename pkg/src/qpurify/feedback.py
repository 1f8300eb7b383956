"""Permutation feedback for rapid purification.

After every measurement step the controller diagonalises the state, rotates
its eigenbasis back onto a fixed frame that is unbiased with respect to the
measured observable, and chooses which eigenvalue sits on which frame vector
so that the instantaneous impurity decay rate

    dL/dt = -8 gamma sum_ij |X_ij|^2 mu_i mu_j

is as negative as possible (``X_ij`` is X written in the frame, ``mu_i`` the
eigenvalue placed on frame vector i). Averaging over all N! placements gives
-8 gamma k L with k = Tr[X^2] / (N (N - 1)), so the best placement is always
at least that fast.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import BasisTransform, DensityMatrix, eig_hermitian, impurity, unbiased_basis
from .errors import CapabilityError, InvalidDimensionError, StepSizeError
from .sme import (
    CounterNoise,
    SmeConfig,
    TrajectoryRecord,
    _milstein_matrix,
    _step_error,
)

__all__ = [
    "EXHAUSTIVE_MAX_N",
    "FeedbackStepReport",
    "FeedbackBatchResult",
    "PermutationSearch",
    "rate_constant",
    "frame_observable",
    "decay_rate",
    "select_permutation",
    "restore_basis",
    "simulate_feedback_batch",
    "simulate_feedback",
]

EXHAUSTIVE_MAX_N = 8
MODES = ("exhaustive", "greedy")


def rate_constant(X) -> float:
    """k = Tr[X^2] / (N (N - 1))."""
    Xm = np.asarray(X)
    N = Xm.shape[0]
    return float(np.sum(np.abs(Xm) ** 2) / (N * (N - 1)))


def frame_observable(X, frame=None) -> np.ndarray:
    """X written in ``frame`` (default: the Fourier frame), F^dagger X F."""
    Xm = np.asarray(X, dtype=complex)
    F = np.asarray(frame if frame is not None else unbiased_basis(Xm.shape[0]), dtype=complex)
    return F.conj().T @ Xm @ F


def decay_rate(X_in_frame, eigenvalues, gamma: float = 1.0) -> float:
    """Instantaneous dL/dt when eigenvalue i sits on frame vector i."""
    W = np.abs(np.asarray(X_in_frame)) ** 2
    lam = np.asarray(eigenvalues, dtype=float)
    return float(-8.0 * gamma * lam @ W @ lam)


class PermutationSearch:
    """Chooses eigenvalue placements for batches of spectra.

    The coupling matrix W = |X_frame|^2 is fixed for a run, so the candidate
    set (all N! permutations, or the single greedy assignment) is built once.
    """

    def __init__(self, X_in_frame, mode: str = "exhaustive"):
        if mode not in MODES:
            raise CapabilityError(f"unknown permutation mode {mode!r}")
        self.W = np.abs(np.asarray(X_in_frame)) ** 2
        self.N = self.W.shape[0]
        self.mode = mode
        if mode == "exhaustive":
            if self.N > EXHAUSTIVE_MAX_N:
                raise CapabilityError(
                    f"exhaustive permutation search supports N <= {EXHAUSTIVE_MAX_N}, got {self.N}"
                )
            self.perms = np.array(list(itertools.permutations(range(self.N))), dtype=np.intp)
        else:
            self.perms = None
            self._rank_of_frame = self._greedy_ranks()

    def _greedy_ranks(self) -> np.ndarray:
        N = self.N
        pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
        pairs.sort(key=lambda ij: (-(self.W[ij] + self.W[ij[::-1]]), ij))
        rank = -np.ones(N, dtype=np.intp)
        nxt = 0
        for pair in pairs:
            for i in pair:
                if rank[i] < 0:
                    rank[i] = nxt
                    nxt += 1
        for i in range(N):
            if rank[i] < 0:
                rank[i] = nxt
                nxt += 1
        return rank

    def choose(self, lam: np.ndarray):
        """Best placement per row of ``lam`` (B, N).

        Returns ``(sigma, score)`` where ``sigma[b, i]`` is the index into
        ``lam[b]`` of the eigenvalue placed on frame vector i and ``score`` is
        sum_ij W_ij mu_i mu_j (the rate is ``-8 gamma score``).
        """
        lam = np.atleast_2d(np.asarray(lam, dtype=float))
        B = lam.shape[0]
        if self.mode == "greedy":
            order = np.argsort(-lam, axis=1, kind="stable")
            sigma = order[:, self._rank_of_frame]
            mu = np.take_along_axis(lam, sigma, axis=1)
            return sigma, np.einsum("bi,ij,bj->b", mu, self.W, mu)
        mu = lam[:, self.perms]
        q = np.einsum("bpi,ij,bpj->bp", mu, self.W, mu)
        best = q.max(axis=1)
        # ties (within rounding) resolve to the lexicographically smallest permutation
        slack = 1e-12 * np.maximum(np.abs(best), 1e-300)
        first = np.argmax(q >= (best - slack)[:, None], axis=1)
        return self.perms[first], q[np.arange(B), first]


def select_permutation(X_in_frame, eigenvalues, mode: str = "exhaustive", gamma: float = 1.0):
    """Placement of ``eigenvalues`` on the frame maximising the decay speed.

    Returns ``(sigma, rate)``: frame vector i receives ``eigenvalues[sigma[i]]``.
    """
    search = PermutationSearch(X_in_frame, mode)
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.shape != (search.N,):
        raise InvalidDimensionError("eigenvalue count does not match the frame dimension")
    sigma, q = search.choose(lam[None])
    return tuple(int(i) for i in sigma[0]), float(-8.0 * gamma * q[0])


def _permutation_matrix(sigma) -> np.ndarray:
    N = len(sigma)
    P = np.zeros((N, N))
    P[np.arange(N), np.asarray(sigma)] = 1.0
    return P


def restore_basis(rho_next, target, permutation=None):
    """Rotate ``rho_next`` so its eigenvectors are the columns of ``target``.

    With rho_next = V diag(lam) V^dagger (descending lam) the result is
    F P diag(lam) P^T F^dagger and the returned unitary U = F P V^dagger
    satisfies rho_new = U rho_next U^dagger.
    """
    spec = eig_hermitian(rho_next)
    lam = spec.eigenvalues
    N = lam.size
    sigma = tuple(range(N)) if permutation is None else tuple(permutation)
    if sorted(sigma) != list(range(N)):
        raise InvalidDimensionError(f"not a permutation of 0..{N - 1}: {sigma}")
    F = np.asarray(target, dtype=complex)
    P = _permutation_matrix(sigma)
    U = F @ P @ spec.eigenvectors.entries.conj().T
    mu = lam[list(sigma)]
    rho_new = (F * mu) @ F.conj().T
    rho_new = 0.5 * (rho_new + rho_new.conj().T)
    return DensityMatrix(rho_new), BasisTransform(U)


# -- simulation ----------------------------------------------------------------


@dataclass(frozen=True)
class FeedbackStepReport:
    time: float
    chosen_permutation: tuple
    achieved_rate: float
    guaranteed_rate: float
    applied_unitary: Optional[BasisTransform] = None

    def satisfied(self, rate_tol: float) -> bool:
        return self.achieved_rate <= self.guaranteed_rate + rate_tol


@dataclass
class FeedbackBatchResult:
    record_steps: np.ndarray
    dt: float
    n_steps: int
    initial_impurity: np.ndarray
    impurities: np.ndarray
    record_sum: np.ndarray
    final_states: np.ndarray
    failures: dict = field(default_factory=dict)
    rate_checks: int = 0
    rate_violations: int = 0
    worst_rate_margin: float = -math.inf

    @property
    def record_times(self) -> np.ndarray:
        return (self.record_steps + 1) * self.dt

    @property
    def final_v(self) -> np.ndarray:
        return self.record_sum / (self.n_steps * self.dt)


ReportHook = Callable[..., None]


def _align(lam, search, F, k, gamma):
    sigma, q = search.choose(lam)
    mu = np.take_along_axis(lam, sigma, axis=1)
    L = 1.0 - np.sum(lam * lam, axis=1)
    rho = np.einsum("ij,bj,kj->bik", F, mu, F.conj())
    return rho, sigma, -8.0 * gamma * q, -8.0 * gamma * k * L, L


def simulate_feedback_batch(
    rho0,
    X,
    gamma: float,
    dt: float,
    n_steps: int,
    noise: Callable[[int, int], np.ndarray],
    *,
    mode: str = "exhaustive",
    frame=None,
    positivity_tol: float = 1e-8,
    record_every: int = 1,
    rate_tol: Optional[float] = None,
    hook: Optional[ReportHook] = None,
    chunk: int = 2048,
) -> FeedbackBatchResult:
    """Integrate B trajectories under permutation feedback in lock-step.

    The initial states are aligned with the frame before the first step.
    ``hook(step, t, rho, Y, dy, sigma, achieved, guaranteed, V)`` is called
    after every alignment; step -1 denotes the initial one (``V`` are the
    eigenvectors of the pre-alignment state, ``Y``/``dy`` the record).
    """
    Xm = np.asarray(X, dtype=complex)
    N = Xm.shape[0]
    F = np.asarray(frame if frame is not None else unbiased_basis(N), dtype=complex)
    search = PermutationSearch(F.conj().T @ Xm @ F, mode)
    k = rate_constant(Xm - np.trace(Xm).real / N * np.eye(N))
    if rate_tol is None:
        rate_tol = 1e-9 * gamma
    x_is_diag = not np.any(Xm - np.diag(np.diag(Xm)))
    diag = np.diag(Xm).real.copy() if x_is_diag else None

    probe = noise(0, 1)
    B = probe.shape[1]
    r0 = np.asarray(rho0, dtype=complex)
    if r0.ndim == 2:
        r0 = np.broadcast_to(r0, (B,) + r0.shape)
    if r0.shape != (B, N, N):
        raise InvalidDimensionError("initial states, observable and noise batch do not match")

    record_steps = np.arange(record_every - 1, n_steps, record_every)
    if record_steps.size == 0 or record_steps[-1] != n_steps - 1:
        record_steps = np.append(record_steps, n_steps - 1)
    n_rec = record_steps.size
    imps = np.full((B, n_rec), np.nan)
    Y = np.zeros(B)
    alive = np.ones(B, dtype=bool)
    failures: dict = {}
    checks = violations = 0
    worst = -math.inf
    inv_sqrt8g = 1.0 / math.sqrt(8.0 * gamma)

    def diagonalise(r):
        w, V = np.linalg.eigh(r)
        return w[:, ::-1].copy(), V[:, :, ::-1]

    lam, V = diagonalise(r0)
    lam = np.clip(lam, 0.0, None)
    lam /= lam.sum(axis=1, keepdims=True)
    state, sigma, achieved, guaranteed, L0 = _align(lam, search, F, k, gamma)
    margin = achieved - guaranteed
    checks += B
    violations += int(np.sum(margin > rate_tol))
    worst = max(worst, float(margin.max()))
    if hook is not None:
        hook(-1, 0.0, state, Y, np.zeros(B), sigma, achieved, guaranteed, V)

    rec = 0
    for start in range(0, n_steps, chunk):
        count = min(chunk, n_steps - start)
        dWs = noise(start, count)
        for j in range(count):
            step = start + j
            dW = dWs[j]
            new, m = _milstein_matrix(state, Xm, diag, gamma, dt, dW)
            new = 0.5 * (new + np.conj(np.swapaxes(new, -1, -2)))
            new /= np.einsum("bii->b", new).real[:, None, None]
            lam, V = diagonalise(new)
            bad = alive & (lam[:, -1] < -positivity_tol)
            if np.any(bad):
                for b in np.nonzero(bad)[0]:
                    failures[int(b)] = f"step {step}: " + _step_error(lam[b, -1], dt)
                alive &= ~bad
            lam = np.clip(lam, 0.0, None)
            lam /= lam.sum(axis=1, keepdims=True)
            aligned, sigma, achieved, guaranteed, L = _align(lam, search, F, k, gamma)
            margin = np.where(alive, achieved - guaranteed, -np.inf)
            checks += int(alive.sum())
            violations += int(np.sum(margin > rate_tol))
            worst = max(worst, float(margin.max()))
            state = np.where(alive[:, None, None], aligned, state)
            dy = np.where(alive, m * dt + dW * inv_sqrt8g, 0.0)
            Y = Y + dy
            if hook is not None:
                hook(step, (step + 1) * dt, state, Y, dy, sigma, achieved, guaranteed, V)
            if rec < n_rec and step == record_steps[rec]:
                imps[:, rec] = np.where(alive, L, np.nan)
                rec += 1

    return FeedbackBatchResult(
        record_steps=record_steps,
        dt=dt,
        n_steps=n_steps,
        initial_impurity=L0,
        impurities=imps,
        record_sum=Y,
        final_states=state,
        failures=failures,
        rate_checks=checks,
        rate_violations=violations,
        worst_rate_margin=worst,
    )


def simulate_feedback(
    rho0,
    X,
    cfg: SmeConfig,
    mode: str = "exhaustive",
    *,
    frame=None,
    noise=None,
    keep_unitaries: bool = True,
):
    """Single feedback trajectory.

    Returns ``(record, reports)``; ``reports[0]`` describes the initial
    alignment at t = 0 and ``reports[k]`` the alignment after step k - 1.
    """
    if noise is None:
        noise = CounterNoise(cfg.master_seed, [cfg.trajectory_index], cfg.dt)
    N = np.asarray(X).shape[0]
    F = np.asarray(frame if frame is not None else unbiased_basis(N), dtype=complex)
    n = cfg.n_steps
    stride = cfg.state_stride
    L = np.empty(n)
    dys = np.empty(n)
    Ysum = np.empty(n)
    perms = np.empty((n, N), dtype=np.intp)
    states: list = []
    state_steps: list = []
    reports: list = []

    def hook(step, t, rho, Y, dy, sigma, achieved, guaranteed, V):
        U = None
        if keep_unitaries:
            U = BasisTransform(F @ _permutation_matrix(sigma[0]) @ V[0].conj().T)
        reports.append(
            FeedbackStepReport(t, tuple(int(i) for i in sigma[0]), float(achieved[0]), float(guaranteed[0]), U)
        )
        if step < 0:
            return
        L[step] = impurity(rho[0])
        dys[step] = dy[0]
        Ysum[step] = Y[0]
        perms[step] = sigma[0]
        if (step + 1) % stride == 0 or step == n - 1:
            states.append(rho[0].copy())
            state_steps.append(step)

    res = simulate_feedback_batch(
        rho0, X, cfg.gamma, cfg.dt, n, noise,
        mode=mode, frame=F, positivity_tol=cfg.positivity_tol, record_every=n, hook=hook,
    )
    if res.failures:
        raise StepSizeError(res.failures[0])
    times = (np.arange(n) + 1) * cfg.dt
    record = TrajectoryRecord(
        times=times,
        impurities=L,
        record_increments=dys,
        integrated_v=Ysum / times,
        states=states,
        state_steps=np.array(state_steps),
        noise_seed=(cfg.master_seed, cfg.trajectory_index),
        permutations=perms,
    )
    return record, reports
