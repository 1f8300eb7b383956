"""Itô integration of the continuous-measurement stochastic master equation

    d rho = -gamma [X, [X, rho]] dt + sqrt(2 gamma) (X rho + rho X - 2 <X> rho) dW

together with the measurement record dy = <X> dt + dW / sqrt(8 gamma).

The step is Euler-Maruyama plus the Milstein correction for the single
scalar noise channel; without the correction the scheme is only strong
order 1/2 for this multiplicative noise. Every step is followed by
symmetrisation, trace renormalisation and a bounded positivity repair.

Noise is counter based: the increment for ``(master_seed, trajectory, step)``
is a pure function of those three integers, so trajectories can be run in
any order, batch or process and give bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .core import DensityMatrix, impurity
from .errors import InvalidDimensionError, StepSizeError, ValidationError

__all__ = [
    "SmeConfig",
    "TrajectoryRecord",
    "BatchResult",
    "CounterNoise",
    "ArrayNoise",
    "draw_noise",
    "sme_step",
    "simulate_batch",
    "simulate_unassisted",
]

MAX_GAMMA_DT = 0.01
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class SmeConfig:
    gamma: float = 1.0
    dt: float = 1e-4
    t_final: float = 1.0
    master_seed: int = 0
    trajectory_index: int = 0
    positivity_tol: float = 1e-8
    thinning: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValidationError(f"gamma must be positive, got {self.gamma}")
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if not self.t_final >= self.dt * (1 - 1e-9):
            raise ValidationError("t_final must be at least dt")
        if self.gamma * self.dt > MAX_GAMMA_DT * (1 + 1e-12):
            raise ValidationError(
                f"gamma*dt = {self.gamma * self.dt:g} exceeds the stability guard {MAX_GAMMA_DT}"
            )
        if self.master_seed < 0 or self.master_seed > _U64:
            raise ValidationError("master_seed must fit in an unsigned 64-bit integer")
        if self.trajectory_index < 0:
            raise ValidationError("trajectory_index must be non-negative")
        if self.thinning is not None and self.thinning < 1:
            raise ValidationError("thinning must be >= 1")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_final / self.dt)))

    @property
    def state_stride(self) -> int:
        if self.thinning is not None:
            return self.thinning
        return max(1, math.ceil(self.n_steps / 1000))


@dataclass
class TrajectoryRecord:
    """One stochastic realisation.

    ``times``, ``impurities``, ``record_increments`` and ``integrated_v`` have
    one entry per step (``times[k] = (k + 1) dt``); ``states`` are stored every
    ``state_stride`` steps at ``state_steps`` (0-based step indices).
    """

    times: np.ndarray
    impurities: np.ndarray
    record_increments: np.ndarray
    integrated_v: np.ndarray
    states: list
    state_steps: np.ndarray
    noise_seed: tuple
    permutations: Optional[np.ndarray] = None

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


# -- noise -------------------------------------------------------------------


def _uniform_from_raw(raw: np.ndarray) -> np.ndarray:
    # 53 random bits, offset by half a ulp so that u is strictly inside (0, 1)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def _raw_stream(master_seed: int, index: int, start: int, count: int) -> np.ndarray:
    # Philox4x64 yields 4 outputs per counter value
    bg = np.random.Philox(key=[master_seed & _U64, index & _U64], counter=[start // 4, 0, 0, 0])
    return bg.random_raw(start % 4 + count)[start % 4:]


class CounterNoise:
    """Wiener increments dW ~ Normal(0, dt) keyed by (seed, trajectory, step).

    Calling the object with ``(start, count)`` returns an array of shape
    ``(count, len(indices))``.
    """

    def __init__(self, master_seed: int, indices: Sequence[int], dt: float):
        self.master_seed = int(master_seed)
        self.indices = [int(i) for i in indices]
        self.dt = float(dt)
        self._scale = math.sqrt(self.dt)

    def __call__(self, start: int, count: int) -> np.ndarray:
        out = np.empty((count, len(self.indices)))
        for col, idx in enumerate(self.indices):
            out[:, col] = ndtri(_uniform_from_raw(_raw_stream(self.master_seed, idx, start, count)))
        return out * self._scale


class ArrayNoise:
    """Noise provider backed by an explicit ``(n_steps, batch)`` array."""

    def __init__(self, dW):
        dW = np.asarray(dW, dtype=float)
        self.dW = dW[:, None] if dW.ndim == 1 else dW

    def __call__(self, start: int, count: int) -> np.ndarray:
        if start + count > self.dW.shape[0]:
            raise ValidationError("explicit noise array is shorter than the simulation")
        return self.dW[start:start + count]


def draw_noise(cfg: SmeConfig, step: int) -> float:
    """Single increment for ``(cfg.master_seed, cfg.trajectory_index, step)``."""
    raw = _raw_stream(cfg.master_seed, cfg.trajectory_index, int(step), 1)
    return float(ndtri(_uniform_from_raw(raw))[0] * math.sqrt(cfg.dt))


# -- single step ---------------------------------------------------------------


def _expect(rho: np.ndarray, X: np.ndarray, diag: Optional[np.ndarray]) -> np.ndarray:
    if diag is not None:
        return np.einsum("bii,i->b", rho, diag).real
    return np.einsum("bij,ji->b", rho, X).real


def _mul_left(X, diag, A):
    return diag[:, None] * A if diag is not None else X @ A


def _mul_right(A, X, diag):
    return A * diag[None, :] if diag is not None else A @ X


def _milstein_matrix(rho, X, diag, gamma, dt, dW):
    """Unnormalised update for a batch of density matrices (B, N, N)."""
    s = math.sqrt(2.0 * gamma)
    m = _expect(rho, X, diag)[:, None, None]
    XR = _mul_left(X, diag, rho)
    RX = _mul_right(rho, X, diag)
    if diag is not None:
        drift = -gamma * (diag[:, None] - diag[None, :]) ** 2 * rho
    else:
        C = XR - RX
        drift = -gamma * (_mul_left(X, diag, C) - _mul_right(C, X, diag))
    Bm = s * (XR + RX - 2.0 * m * rho)
    mB = _expect(Bm, X, diag)[:, None, None]
    BB = s * (_mul_left(X, diag, Bm) + _mul_right(Bm, X, diag) - 2.0 * mB * rho - 2.0 * m * Bm)
    w = dW[:, None, None]
    new = rho + drift * dt + Bm * w + 0.5 * BB * (w * w - dt)
    return new, m[:, 0, 0]


def _milstein_populations(p, x, gamma, dt, dW):
    """Same update restricted to states diagonal in the measurement basis."""
    s = math.sqrt(2.0 * gamma)
    m = (p * x).sum(axis=-1)
    b = s * 2.0 * (x[None, :] - m[:, None]) * p
    mB = (b * x).sum(axis=-1)
    bb = s * (2.0 * x[None, :] * b - 2.0 * mB[:, None] * p - 2.0 * m[:, None] * b)
    w = dW[:, None]
    return p + b * w + 0.5 * bb * (w * w - dt), m


def _finish_matrix(new: np.ndarray, tol: float):
    """Hermitise, renormalise and repair positivity. Returns (rho, min_eig)."""
    new = 0.5 * (new + np.conj(np.swapaxes(new, -1, -2)))
    tr = np.einsum("bii->b", new).real
    new = new / tr[:, None, None]
    d = np.einsum("bii->bi", new).real
    off = np.sum(np.abs(new), axis=-1) - np.abs(d)
    min_eig = np.zeros(new.shape[0])
    suspect = np.nonzero(np.min(d - off, axis=-1) < 0)[0]
    if suspect.size:
        w, V = np.linalg.eigh(new[suspect])
        min_eig[suspect] = w[:, 0]
        fix = w[:, 0] < 0
        if np.any(fix):
            w = np.clip(w[fix], 0.0, None)
            w = w / w.sum(axis=-1, keepdims=True)
            Vf = V[fix]
            rep = (Vf * w[:, None, :]) @ np.conj(np.swapaxes(Vf, -1, -2))
            new[suspect[fix]] = 0.5 * (rep + np.conj(np.swapaxes(rep, -1, -2)))
    return new, min_eig


def _finish_populations(p: np.ndarray):
    p = p / p.sum(axis=-1, keepdims=True)
    min_eig = p.min(axis=-1)
    neg = min_eig < 0
    if np.any(neg):
        q = np.clip(p[neg], 0.0, None)
        p[neg] = q / q.sum(axis=-1, keepdims=True)
    return p, min_eig


def _step_error(min_eig: float, dt: float) -> str:
    return (
        f"negative eigenvalue {min_eig:.3e} beyond positivity tolerance after an SME step; "
        f"reduce dt (currently {dt:g})"
    )


def sme_step(rho, X, gamma: float, dt: float, dW: float, positivity_tol: float = 1e-8):
    """Advance one state by a single step; returns ``(rho_next, dy)``.

    ``X`` may be an :class:`Observable` or any Hermitian array; a constant shift
    of ``X`` changes ``dy`` by ``shift*dt`` but leaves ``rho_next`` unchanged.
    """
    r = np.asarray(rho, dtype=complex)[None]
    Xm = np.asarray(X, dtype=complex)
    if Xm.shape != r.shape[1:]:
        raise InvalidDimensionError(f"dimension mismatch: {Xm.shape} vs {r.shape[1:]}")
    diag = np.diag(Xm).real.copy() if not np.any(Xm - np.diag(np.diag(Xm))) else None
    new, m = _milstein_matrix(r, Xm, diag, gamma, dt, np.array([float(dW)]))
    new, min_eig = _finish_matrix(new, positivity_tol)
    if min_eig[0] < -positivity_tol:
        raise StepSizeError(_step_error(min_eig[0], dt))
    dy = m[0] * dt + dW / math.sqrt(8.0 * gamma)
    return DensityMatrix(new[0]), float(dy)


# -- batched integration ---------------------------------------------------------


@dataclass
class BatchResult:
    """Outcome of :func:`simulate_batch` for B trajectories.

    ``impurities`` has shape (B, len(record_steps)); entries after a failure
    are NaN. ``states`` is only filled when requested.
    """

    record_steps: np.ndarray
    dt: float
    impurities: np.ndarray
    record_sum: np.ndarray
    final_states: np.ndarray
    failures: dict = field(default_factory=dict)
    states: Optional[np.ndarray] = None
    n_steps: int = 0

    @property
    def record_times(self) -> np.ndarray:
        return (self.record_steps + 1) * self.dt

    @property
    def final_v(self) -> np.ndarray:
        return self.record_sum / (self.n_steps * self.dt)


def _is_diagonal_batch(rho: np.ndarray) -> bool:
    n = rho.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    return not np.any(rho[:, mask])


Observer = Callable[[int, float, np.ndarray, np.ndarray, np.ndarray], None]


def simulate_batch(
    rho0,
    X,
    gamma: float,
    dt: float,
    n_steps: int,
    noise: Callable[[int, int], np.ndarray],
    *,
    positivity_tol: float = 1e-8,
    record_every: int = 1,
    keep_states: bool = False,
    observer: Optional[Observer] = None,
    chunk: int = 2048,
) -> BatchResult:
    """Integrate B unassisted trajectories in lock-step.

    ``rho0`` is a single state or a (B, N, N) stack; ``noise(start, count)``
    must return a (count, B) array of increments. If ``observer`` is given it
    is called after every step as ``observer(step, t, state, record_sum, dy)``
    where ``state`` is (B, N) populations on the diagonal fast path and
    (B, N, N) otherwise.

    The diagonal fast path is taken when X and every initial state are
    diagonal in the measurement basis; the dynamics then keep them diagonal.
    """
    Xm = np.asarray(X, dtype=complex)
    r0 = np.asarray(rho0, dtype=complex)
    probe = noise(0, 1)
    B = probe.shape[1]
    if r0.ndim == 2:
        r0 = np.broadcast_to(r0, (B,) + r0.shape)
    if r0.shape[1:] != Xm.shape or r0.shape[0] != B:
        raise InvalidDimensionError("initial states, observable and noise batch do not match")
    N = Xm.shape[0]
    x_is_diag = not np.any(Xm - np.diag(np.diag(Xm)))
    diag = np.diag(Xm).real.copy() if x_is_diag else None
    fast = x_is_diag and _is_diagonal_batch(r0)

    record_steps = np.arange(record_every - 1, n_steps, record_every)
    if record_steps.size == 0 or record_steps[-1] != n_steps - 1:
        record_steps = np.append(record_steps, n_steps - 1)
    n_rec = record_steps.size
    imps = np.full((B, n_rec), np.nan)
    states = np.zeros((B, n_rec, N, N), dtype=complex) if keep_states else None
    Y = np.zeros(B)
    alive = np.ones(B, dtype=bool)
    failures: dict = {}
    inv_sqrt8g = 1.0 / math.sqrt(8.0 * gamma)

    if fast:
        state = np.einsum("bii->bi", r0).real.copy()
    else:
        state = r0.copy()

    rec = 0
    for start in range(0, n_steps, chunk):
        count = min(chunk, n_steps - start)
        dWs = noise(start, count)
        for j in range(count):
            step = start + j
            dW = dWs[j]
            if fast:
                new, m = _milstein_populations(state, diag, gamma, dt, dW)
                new, min_eig = _finish_populations(new)
            else:
                new, m = _milstein_matrix(state, Xm, diag, gamma, dt, dW)
                new, min_eig = _finish_matrix(new, positivity_tol)
            bad = alive & (min_eig < -positivity_tol)
            if np.any(bad):
                for b in np.nonzero(bad)[0]:
                    failures[int(b)] = f"step {step}: " + _step_error(min_eig[b], dt)
                alive &= ~bad
            state = np.where(alive[:, None] if fast else alive[:, None, None], new, state)
            dy = np.where(alive, m * dt + dW * inv_sqrt8g, 0.0)
            Y = Y + dy
            if observer is not None:
                observer(step, (step + 1) * dt, state, Y, dy)
            if rec < n_rec and step == record_steps[rec]:
                if fast:
                    L = 1.0 - np.sum(state * state, axis=-1)
                else:
                    L = 1.0 - np.sum(np.abs(state) ** 2, axis=(-2, -1))
                imps[:, rec] = np.where(alive, L, np.nan)
                if keep_states:
                    states[:, rec] = _as_matrices(state) if fast else state
                rec += 1

    final = _as_matrices(state) if fast else state
    return BatchResult(record_steps, dt, imps, Y, final, failures, states, n_steps=n_steps)


def _as_matrices(p: np.ndarray) -> np.ndarray:
    B, N = p.shape
    out = np.zeros((B, N, N), dtype=complex)
    out[:, np.arange(N), np.arange(N)] = p
    return out


def simulate_unassisted(
    rho0,
    X,
    cfg: SmeConfig,
    noise: Optional[Callable[[int, int], np.ndarray]] = None,
) -> TrajectoryRecord:
    """Run a single unassisted trajectory and return its full record.

    Raises :class:`StepSizeError` when the positivity repair cannot absorb
    the drift of a step.
    """
    if noise is None:
        noise = CounterNoise(cfg.master_seed, [cfg.trajectory_index], cfg.dt)
    n = cfg.n_steps
    stride = cfg.state_stride
    L = np.empty(n)
    dys = np.empty(n)
    Ysum = np.empty(n)
    states: list = []
    state_steps: list = []

    def observe(step, t, state, Y, dy):
        s = state[0]
        if s.ndim == 1:
            L[step] = 1.0 - float(np.dot(s, s))
        else:
            L[step] = impurity(s)
        dys[step] = dy[0]
        Ysum[step] = Y[0]
        if (step + 1) % stride == 0 or step == n - 1:
            states.append(np.diag(s).astype(complex) if s.ndim == 1 else s.copy())
            state_steps.append(step)

    res = simulate_batch(
        rho0, X, cfg.gamma, cfg.dt, n, noise,
        positivity_tol=cfg.positivity_tol, record_every=n, observer=observe,
    )
    if res.failures:
        raise StepSizeError(res.failures[0])
    times = (np.arange(n) + 1) * cfg.dt
    return TrajectoryRecord(
        times=times,
        impurities=L,
        record_increments=dys,
        integrated_v=Ysum / times,
        states=states,
        state_steps=np.array(state_steps),
        noise_seed=(cfg.master_seed, cfg.trajectory_index),
    )
