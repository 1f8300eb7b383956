"""Closed-form results for the unassisted measurement and the feedback bounds.

Conventions: X = J_z / N with eigenvalues n/N, measurement strength gamma,
initial state I/N. The unassisted state is diagonal with

    rho_n(t, v) = exp(-4 gamma t (v - n/N)^2) / norm,

where v is the time-averaged record, and v is distributed as an equal-weight
mixture of Gaussians centred on the eigenvalues with variance 1/(8 gamma t).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import integrate, optimize

from .core import DensityMatrix, build_observable, unbiased_basis
from .errors import InvalidDimensionError, QuadratureError, RootBracketError, ValidationError

__all__ = [
    "Constants",
    "BoundsReport",
    "Lemma1Report",
    "constants",
    "closed_form_populations",
    "closed_form_state",
    "closed_form_state_expm",
    "record_density",
    "mean_impurity_unassisted",
    "two_level_bound_L2",
    "log_two_level_bound_L2",
    "sech_integral",
    "feedback_impurity_bound",
    "speedup_lower_bound",
    "speedup_lower_bound_log",
    "verify_lemma1",
]


class Constants(NamedTuple):
    trX2: float
    k: float
    C: float
    C_tilde: float


def _check_N(N) -> int:
    if int(N) != N or N < 2:
        raise InvalidDimensionError(f"N must be an integer >= 2, got {N}")
    return int(N)


def _eigenvalues(X) -> np.ndarray:
    spectrum = getattr(X, "spectrum", None)
    if spectrum is not None:
        return np.asarray(spectrum, dtype=float)
    return np.diag(np.asarray(X)).real.astype(float)


def constants(N: int, gamma: float = 1.0) -> Constants:
    """Tr[X^2] = (N+1)(N-1)/(12N), k = Tr[X^2]/(N(N-1)),
    C = pi N / sqrt(2 gamma), C~ = sqrt(8 pi)(N-1)/(C N)."""
    N = _check_N(N)
    trX2 = (N + 1) * (N - 1) / (12.0 * N)
    k = trX2 / (N * (N - 1))
    C = math.pi * N / math.sqrt(2.0 * gamma)
    C_tilde = math.sqrt(8.0 * math.pi) * (N - 1) / (C * N)
    return Constants(trX2, k, C, C_tilde)


def sech_integral(N: int, gamma: float = 1.0) -> float:
    """C = integral over the real line of 1/cosh(sqrt(2 gamma) x / N), by quadrature."""
    a = math.sqrt(2.0 * gamma) / N
    val, err = integrate.quad(_sech, 0.0, np.inf, epsabs=1e-14, epsrel=1e-13, limit=200)
    return 2.0 * val / a


# -- unassisted closed forms -----------------------------------------------------


def closed_form_populations(t, v, eigenvalues, gamma: float = 1.0) -> np.ndarray:
    """Diagonal of rho(t, v); broadcasts over ``v`` (result shape v.shape + (N,))."""
    x = np.asarray(eigenvalues, dtype=float)
    v = np.asarray(v, dtype=float)
    expo = -4.0 * gamma * np.asarray(t, dtype=float)[..., None] * (v[..., None] - x) ** 2
    expo -= expo.max(axis=-1, keepdims=True)
    w = np.exp(expo)
    return w / w.sum(axis=-1, keepdims=True)


def closed_form_state(t: float, v: float, X, gamma: float = 1.0) -> DensityMatrix:
    """State reached from I/N after measuring for time t with averaged record v."""
    if t < 0:
        raise ValidationError("t must be non-negative")
    return DensityMatrix(np.diag(closed_form_populations(t, v, _eigenvalues(X), gamma)))


def closed_form_state_expm(t: float, v: float, X, gamma: float = 1.0) -> DensityMatrix:
    """Same state written as a normalised matrix exponential,
    exp(-4 gamma t (X^2 - 2 v X)) / Tr[...]."""
    Xm = np.asarray(X, dtype=complex)
    A = -4.0 * gamma * t * (Xm @ Xm - 2.0 * v * Xm)
    # shift by the largest eigenvalue of A before exponentiating
    A = A - np.max(np.linalg.eigvalsh(A)) * np.eye(Xm.shape[0])
    E = scipy.linalg.expm(A)
    E = E / np.trace(E).real
    return DensityMatrix(0.5 * (E + E.conj().T))


def record_density(v, t: float, N: int, gamma: float = 1.0):
    """P(v, t): equal-weight Gaussian mixture at n/N with variance 1/(8 gamma t)."""
    if t <= 0:
        raise ValidationError("record density needs t > 0")
    N = _check_N(N)
    x = build_observable(N).spectrum
    v = np.asarray(v, dtype=float)
    g = math.sqrt(4.0 * gamma * t / math.pi) * np.exp(-4.0 * gamma * t * (v[..., None] - x) ** 2)
    return g.mean(axis=-1)


def record_cdf(v, t: float, N: int, gamma: float = 1.0):
    """Cumulative distribution of the time-averaged record."""
    from scipy.special import ndtr

    N = _check_N(N)
    x = build_observable(N).spectrum
    v = np.asarray(v, dtype=float)
    return ndtr((v[..., None] - x) * math.sqrt(8.0 * gamma * t)).mean(axis=-1)


def _purity_at(v, t, x, gamma):
    p = closed_form_populations(t, v, x, gamma)
    return np.sum(p * p, axis=-1)


_Z_CUT = 8.6  # standard-normal density below 1e-16 of its peak beyond this


def mean_impurity_unassisted(t: float, N: int, gamma: float = 1.0) -> float:
    """Ensemble-average impurity 1 - int Tr[rho(t,v)^2] P(v,t) dv, starting from I/N.

    The integral is split by mixture component and written in the standard
    normal variable of that component, v = n/N + z / sqrt(8 gamma t).
    """
    if t <= 0:
        raise ValidationError("mean impurity needs t > 0")
    N = _check_N(N)
    x = build_observable(N).spectrum
    s = math.sqrt(8.0 * gamma * t)
    mids = (x[:-1] + x[1:]) / 2.0
    total = 0.0
    for xn in x:
        # purity changes fastest where v crosses a midpoint between eigenvalues
        brk = [(m - xn) * s for m in mids if abs((m - xn) * s) < _Z_CUT]

        def f(z, xn=xn):
            return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi) * float(
                _purity_at(xn + z / s, t, x, gamma)
            )

        val, err = integrate.quad(
            f, -_Z_CUT, _Z_CUT, points=brk or None, epsabs=1e-12, epsrel=1e-12, limit=400
        )
        if not np.isfinite(val) or err > 1e-10:
            raise QuadratureError(f"purity quadrature did not converge (err {err:.2e})")
        total += val
    return 1.0 - total / N


# -- two-level lower bound ---------------------------------------------------------


def _sech(u: float) -> float:
    e = math.exp(-abs(u))
    return 2.0 * e / (1.0 + e * e)


def _sech_gauss_integral(b: float) -> float:
    """J(b) = int_0^inf exp(-b u^2) sech(u) du."""
    upper = min(40.0, 6.2 / math.sqrt(b))  # integrand < 1e-16 of its peak beyond
    val, err = integrate.quad(
        lambda u: math.exp(-b * u * u) * _sech(u), 0.0, upper, epsabs=0.0, epsrel=1e-13, limit=200
    )
    if not np.isfinite(val) or err > 1e-11 * val:
        raise QuadratureError(f"two-level bound quadrature did not converge (err {err:.2e})")
    return val


def log_two_level_bound_L2(t: float, N: int, gamma: float = 1.0) -> float:
    """log L2(t); usable far beyond the range where L2 underflows."""
    if t <= 0:
        raise ValidationError("L2 needs t > 0")
    N = _check_N(N)
    # substituting u = sqrt(2 gamma) x / N in the cosh integral
    b = N * N / (4.0 * gamma * t)
    return (
        -gamma * t / (N * N)
        + math.log(2.0 * N)
        - 0.5 * math.log(16.0 * math.pi * gamma * t)
        + math.log(_sech_gauss_integral(b))
    )


def two_level_bound_L2(t: float, N: int, gamma: float = 1.0) -> float:
    """Mean impurity of a two-level system measured through sigma_z/(2N), from I/2:

        L2(t) = exp(-gamma t/N^2)/sqrt(8 pi t) int exp(-x^2/(2t)) / cosh(sqrt(2 gamma) x/N) dx.

    It lower-bounds the unassisted mean impurity of the N-level system.
    """
    return math.exp(log_two_level_bound_L2(t, N, gamma))


def two_level_asymptote(t: float, N: int, gamma: float = 1.0) -> float:
    """Large-t form exp(-gamma t/N^2) C / sqrt(8 pi t)."""
    C = constants(N, gamma).C
    return math.exp(-gamma * t / N**2) * C / math.sqrt(8.0 * math.pi * t)


# -- feedback bound and speed-up -------------------------------------------------


def feedback_impurity_bound(t, N: int, gamma: float = 1.0, L0: Optional[float] = None):
    """exp(-8 gamma k t) L0, the guaranteed impurity under permutation feedback."""
    N = _check_N(N)
    if L0 is None:
        L0 = 1.0 - 1.0 / N
    if not 0.0 < L0 <= 1.0 - 1.0 / N + 1e-15:
        raise ValidationError(f"L0 must lie in (0, 1 - 1/N], got {L0}")
    k = constants(N, gamma).k
    return np.exp(-8.0 * gamma * k * np.asarray(t, dtype=float)) * L0


@dataclass(frozen=True)
class BoundsReport:
    N: int
    gamma: float
    trX2: float
    k: float
    L_target: float
    t_m: float
    t_fb: float
    speedup_lower: float
    asymptotic_speedup: float
    log_L_target: float

    def as_dict(self) -> dict:
        return asdict(self)


def _solve_t_m(log_target: float, N: int, gamma: float) -> float:
    f = lambda t: log_two_level_bound_L2(t, N, gamma) - log_target  # noqa: E731
    lo = 1e-12 / gamma
    if f(lo) <= 0:
        raise RootBracketError("target impurity is not below L2 at the start of the bracket")
    hi = 1.0 / gamma
    for _ in range(200):
        if f(hi) < 0:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise RootBracketError(f"could not bracket t_m for log target {log_target}")
    return optimize.bisect(f, lo, hi, xtol=1e-300, rtol=1e-12, maxiter=2000)


def speedup_lower_bound_log(log_L_target: float, N: int, gamma: float = 1.0) -> BoundsReport:
    """:func:`speedup_lower_bound` parametrised by log(L_target).

    Targets at or above L2(0+) = 1/2 are never reached by the two-level
    reference, so the certified lower bound there is t_m = 0 (speed-up 0).
    """
    N = _check_N(N)
    if not log_L_target < math.log(1.0 - 1.0 / N):
        raise ValidationError("target impurity must lie in (0, 1 - 1/N)")
    c = constants(N, gamma)
    if log_L_target >= math.log(0.5):
        t_m = 0.0
    else:
        t_m = _solve_t_m(log_L_target, N, gamma)
    t_fb = (math.log(1.0 - 1.0 / N) - log_L_target) / (8.0 * gamma * c.k)
    return BoundsReport(
        N=N,
        gamma=gamma,
        trX2=c.trX2,
        k=c.k,
        L_target=math.exp(log_L_target),
        t_m=t_m,
        t_fb=t_fb,
        speedup_lower=t_m / t_fb,
        asymptotic_speedup=2.0 * (N + 1) / 3.0,
        log_L_target=log_L_target,
    )


def speedup_lower_bound(L_target: float, N: int, gamma: float = 1.0) -> BoundsReport:
    """Lower bound on t_m / t_fb for reaching impurity ``L_target`` from I/N.

    t_m solves L2(t_m) = L_target (unassisted lower bound), and
    t_fb = ln((1 - 1/N) / L_target) / (8 gamma k) (feedback upper bound).
    """
    N = _check_N(N)
    if not 0.0 < L_target < 1.0 - 1.0 / N:
        raise ValidationError(f"L_target must lie in (0, {1 - 1 / N:g}), got {L_target}")
    return replace(speedup_lower_bound_log(math.log(L_target), N, gamma), L_target=float(L_target))


# -- brute-force check of the permutation-averaging identity -------------------


@dataclass
class Lemma1Report:
    N: int
    n_permutations: int
    n_spectra: int
    max_rel_violation: float
    max_pair_constant_violation: float
    passed: bool
    frames_tested: int = 1

    def as_dict(self) -> dict:
        return asdict(self)


def _permutation_sum(W: np.ndarray, lam: np.ndarray, perms: np.ndarray) -> float:
    """sum_m Tr[X^(m) rho X^(m) rho] with rho = diag(lam) and X^(m) = P_m X P_m^T."""
    total = 0.0
    for p in perms:
        Wp = W[np.ix_(p, p)]
        total += float(lam @ Wp @ lam)
    return total


def _rephased_frame(N: int, rng: np.random.Generator) -> np.ndarray:
    F = np.asarray(unbiased_basis(N))
    d1 = np.exp(2j * np.pi * rng.random(N))
    d2 = np.exp(2j * np.pi * rng.random(N))
    return (d1[:, None] * F) * d2[None, :]


def verify_lemma1(
    N: int,
    eigenvalues: Optional[Sequence[Sequence[float]]] = None,
    trials: int = 50,
    *,
    seed: int = 0,
    random_frames: int = 0,
    k_override: Optional[float] = None,
    rtol: float = 1e-11,
) -> Lemma1Report:
    """Enumerate all N! permuted copies of X (in an unbiased frame) and check

        sum_m Tr[X^(m) rho X^(m) rho] = N! k L,    k = Tr[X^2] / (N (N - 1)),

    for each spectrum, and that sum_m |X^(m)_ij|^2 = (N-2)! Tr[X^2] for i != j
    (zero on the diagonal). ``eigenvalues`` defaults to ``trials`` random
    spectra; ``k_override`` replaces k (negative-control hook).
    """
    N = _check_N(N)
    if N > 5:
        raise InvalidDimensionError("brute-force enumeration is limited to N <= 5")
    rng = np.random.default_rng(seed)
    if eigenvalues is None:
        spectra = rng.dirichlet(np.ones(N), size=trials)
    else:
        spectra = np.atleast_2d(np.asarray(eigenvalues, dtype=float))
        if spectra.shape[1] != N:
            raise InvalidDimensionError("spectrum length does not match N")
    X = np.asarray(build_observable(N))
    trX2 = float(np.sum(np.abs(X) ** 2))
    k = trX2 / (N * (N - 1)) if k_override is None else k_override
    perms = np.array(list(itertools.permutations(range(N))))
    nfact = len(perms)

    frames = [np.asarray(unbiased_basis(N))] + [_rephased_frame(N, rng) for _ in range(random_frames)]
    worst = 0.0
    worst_pair = 0.0
    c_expected = math.factorial(N - 2) * trX2
    for F in frames:
        W = np.abs(F.conj().T @ X @ F) ** 2
        pair = sum(W[np.ix_(p, p)] for p in perms)
        off = ~np.eye(N, dtype=bool)
        worst_pair = max(
            worst_pair,
            float(np.max(np.abs(pair[off] - c_expected)) / c_expected),
            float(np.max(np.abs(np.diag(pair))) / c_expected),
        )
        for lam in spectra:
            L = 1.0 - float(lam @ lam)
            lhs = _permutation_sum(W, lam, perms)
            rhs = nfact * k * L
            # a pure spectrum has rhs = 0; measure rounding against the sum's natural size
            scale = max(abs(rhs), abs(lhs), nfact * k * 1e-3)
            worst = max(worst, abs(lhs - rhs) / scale)
    passed = worst <= rtol and worst_pair <= rtol
    return Lemma1Report(N, nfact, len(spectra), worst, worst_pair, passed, len(frames))
