"""Quantum-state primitives: density matrices, equispaced observables,
unbiased bases, and a deterministic Hermitian eigensolver.

All value types are frozen and hold read-only numpy arrays, so they can be
shared freely between threads and processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, InvalidDimensionError, ValidationError

__all__ = [
    "ToleranceConfig",
    "TOLERANCES",
    "DensityMatrix",
    "Observable",
    "BasisTransform",
    "Spectrum",
    "build_observable",
    "unbiased_basis",
    "is_unbiased",
    "impurity",
    "expectation",
    "eig_hermitian",
    "maximally_mixed",
    "trace_distance",
]


@dataclass(frozen=True)
class ToleranceConfig:
    """Numerical tolerances used across the package."""

    algebraic: float = 1e-12
    positivity: float = 1e-9
    hermitian_input: float = 1e-10
    imaginary: float = 1e-9
    unitary: float = 1e-12


TOLERANCES = ToleranceConfig()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex, copy=True)
    a.setflags(write=False)
    return a


def _check_square(a: np.ndarray, name: str) -> int:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidDimensionError(f"{name} must be a square matrix, got shape {a.shape}")
    if a.shape[0] < 2:
        raise InvalidDimensionError(f"{name} dimension must be >= 2, got {a.shape[0]}")
    return a.shape[0]


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian, unit-trace, positive semidefinite N x N matrix."""

    entries: np.ndarray
    tol: ToleranceConfig = field(default=TOLERANCES, repr=False)

    def __post_init__(self) -> None:
        a = _frozen(self.entries)
        _check_square(a, "density matrix")
        if np.max(np.abs(a - a.conj().T)) > self.tol.algebraic:
            raise ConsistencyError("density matrix is not Hermitian")
        if abs(np.trace(a).real - 1.0) > self.tol.algebraic or abs(np.trace(a).imag) > self.tol.algebraic:
            raise ConsistencyError(f"density matrix trace is {np.trace(a)}, expected 1")
        lam_min = np.linalg.eigvalsh(a).min()
        if lam_min < -self.tol.positivity:
            raise ConsistencyError(f"density matrix has negative eigenvalue {lam_min:.3e}")
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    @classmethod
    def from_populations(cls, p) -> "DensityMatrix":
        return cls(np.diag(np.asarray(p, dtype=float)))

    @classmethod
    def pure(cls, psi) -> "DensityMatrix":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))


@dataclass(frozen=True, eq=False)
class Observable:
    """Hermitian observable together with its (real) spectrum.

    ``spectrum`` lists eigenvalues in the order of the measurement basis,
    i.e. for a diagonal observable it is simply the diagonal.
    """

    entries: np.ndarray
    spectrum: np.ndarray

    def __post_init__(self) -> None:
        a = _frozen(self.entries)
        _check_square(a, "observable")
        if np.max(np.abs(a - a.conj().T)) > TOLERANCES.algebraic:
            raise ConsistencyError("observable is not Hermitian")
        s = np.array(self.spectrum, dtype=float)
        s.setflags(write=False)
        object.__setattr__(self, "entries", a)
        object.__setattr__(self, "spectrum", s)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return not np.any(self.entries - np.diag(np.diag(self.entries)))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    def shifted(self, alpha: float) -> "Observable":
        """X + alpha*I; the measurement dynamics do not depend on alpha."""
        return Observable(self.entries + alpha * np.eye(self.dim), self.spectrum + alpha)


@dataclass(frozen=True, eq=False)
class BasisTransform:
    """Unitary change of basis; column k is the k-th basis vector."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        a = _frozen(self.entries)
        n = _check_square(a, "basis transform")
        err = np.max(np.abs(a.conj().T @ a - np.eye(n)))
        if err > TOLERANCES.unitary * max(1, n):
            raise ConsistencyError(f"basis transform is not unitary (max deviation {err:.2e})")
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


@dataclass(frozen=True, eq=False)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: BasisTransform

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors.entries
        return (v * self.eigenvalues) @ v.conj().T


def build_observable(N: int) -> Observable:
    """Return X = J_z / N as a diagonal matrix in the measurement basis.

    Eigenvalues are n/N for n = -(N-1)/2, ..., (N-1)/2, so X is traceless
    with adjacent eigenvalues separated by 1/N.
    """
    if int(N) != N or N < 2:
        raise InvalidDimensionError(f"N must be an integer >= 2, got {N}")
    N = int(N)
    x = (np.arange(N) - (N - 1) / 2.0) / N
    return Observable(np.diag(x).astype(complex), x)


def unbiased_basis(N: int) -> BasisTransform:
    """Discrete Fourier transform matrix F[k, l] = exp(2 pi i k l / N) / sqrt(N)."""
    if int(N) != N or N < 2:
        raise InvalidDimensionError(f"N must be an integer >= 2, got {N}")
    k = np.arange(int(N))
    # reduce k*l mod N before the exponential to keep the phases exact
    F = np.exp(2j * np.pi * (np.outer(k, k) % N) / N) / np.sqrt(N)
    return BasisTransform(F)


def maximally_mixed(N: int) -> DensityMatrix:
    return DensityMatrix(np.eye(N) / N)


def is_unbiased(X, basis, tol: float = 1e-9) -> bool:
    """True iff every overlap |<f_i|e_j>|^2 equals 1/N within ``tol``.

    ``e_j`` are the eigenvectors of ``X`` and ``f_i`` the columns of ``basis``.
    """
    Xm = np.asarray(X, dtype=complex)
    B = np.asarray(basis, dtype=complex)
    if Xm.shape != B.shape:
        raise InvalidDimensionError(f"dimension mismatch: {Xm.shape} vs {B.shape}")
    E = eig_hermitian(Xm).eigenvectors.entries
    overlaps = np.abs(B.conj().T @ E) ** 2
    return bool(np.all(np.abs(overlaps - 1.0 / Xm.shape[0]) <= tol))


def impurity(rho) -> float:
    """L = 1 - Tr[rho^2]."""
    r = np.asarray(rho)
    # Tr[rho^2] = sum |rho_ij|^2 for Hermitian rho
    return float(1.0 - np.sum(np.abs(r) ** 2))


def expectation(X, rho) -> float:
    """Tr[X rho], checked to be real."""
    Xm = np.asarray(X)
    r = np.asarray(rho)
    if Xm.shape != r.shape:
        raise InvalidDimensionError(f"dimension mismatch: {Xm.shape} vs {r.shape}")
    val = np.sum(Xm * r.T)
    if abs(val.imag) > TOLERANCES.imaginary:
        raise ConsistencyError(f"<X> has imaginary part {val.imag:.3e}")
    return float(val.real)


def trace_distance(a, b) -> float:
    """0.5 * || a - b ||_1 for Hermitian arguments."""
    d = np.asarray(a) - np.asarray(b)
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(d))))


def _descending_order(w: np.ndarray, tol: float) -> np.ndarray:
    # eigh returns ascending values; reverse by value while keeping the
    # original column order inside clusters of (near-)equal eigenvalues
    order = sorted(range(len(w)), key=lambda i: -w[i])
    out, i = [], 0
    while i < len(order):
        j = i + 1
        while j < len(order) and abs(w[order[j]] - w[order[i]]) <= tol:
            j += 1
        out.extend(sorted(order[i:j]))
        i = j
    return np.array(out)


def eig_hermitian(M, tol: ToleranceConfig = TOLERANCES) -> Spectrum:
    """Eigendecomposition with a reproducible ordering and phase gauge.

    Eigenvalues come back in descending order; (near-)ties keep the column
    order produced by LAPACK. Each eigenvector is rotated so that its
    largest-modulus component is real and positive.
    """
    A = np.asarray(M, dtype=complex)
    _check_square(A, "matrix")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.conj().T)) > tol.hermitian_input * scale:
        raise ValidationError("eig_hermitian requires a Hermitian matrix")
    A = 0.5 * (A + A.conj().T)
    w, V = np.linalg.eigh(A)
    order = _descending_order(w, tol.algebraic * scale)
    w, V = w[order], V[:, order]
    # rounding makes equal-modulus components resolve to the first index
    pivot = np.argmax(np.round(np.abs(V), 12), axis=0)
    phase = V[pivot, np.arange(V.shape[1])]
    V = V * (np.abs(phase) / phase)
    return Spectrum(w, BasisTransform(V))
