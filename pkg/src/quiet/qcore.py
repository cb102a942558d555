"""Complex amplitudes, density matrices and the quantum-probability toolkit.

Everything here is a pure function over numpy arrays. Density matrices are
real symmetric: the recurrent layer works on split real/imaginary channels,
so the states that get mixed are real.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

EIG_TOL = 1e-12
EIG_MAX_SWEEPS = 100
LOG_EPS = 1e-12


@dataclass(frozen=True)
class ComplexVector:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 1:
            raise DimensionError(f"re/im shapes differ: {re.shape} vs {im.shape}")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @property
    def squared_norm(self) -> float:
        return float(np.sum(self.re**2 + self.im**2))

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __len__(self):
        return self.re.shape[0]


@dataclass(frozen=True)
class PolarForm:
    r: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64))


@dataclass(frozen=True)
class DensityMatrix:
    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"density matrix must be square, got {m.shape}")
        object.__setattr__(self, "entries", m)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries))

    def diagonal(self) -> np.ndarray:
        return np.diag(self.entries).copy()

    def violations(self, sym_tol=1e-12, trace_tol=1e-9, psd_tol=1e-10) -> list[str]:
        """Return a description of every broken invariant (empty if valid)."""
        out = []
        asym = float(np.max(np.abs(self.entries - self.entries.T))) if self.dim else 0.0
        if asym > sym_tol:
            out.append(f"asymmetry {asym:.3e}")
        if abs(self.trace - 1.0) > trace_tol:
            out.append(f"trace {self.trace!r}")
        lo = float(hermitian_eig(0.5 * (self.entries + self.entries.T))[0][0])
        if lo < -psd_tol:
            out.append(f"min eigenvalue {lo:.3e}")
        return out


def complex_from_polar(p: PolarForm) -> ComplexVector:
    if p.r.shape != p.theta.shape:
        raise DimensionError(f"amplitude/phase length mismatch: {p.r.shape} vs {p.theta.shape}")
    return ComplexVector(p.r * np.cos(p.theta), p.r * np.sin(p.theta))


def born_probabilities(v: ComplexVector) -> np.ndarray:
    return v.re**2 + v.im**2


def outer_product(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.outer(v, v)


def mix_density(states: Sequence, weights, tol: float = 1e-9) -> DensityMatrix:
    """Mixture of pure states, sum_k w_k |h_k><h_k|."""
    if len(states) == 0:
        raise ContractError("mix_density needs at least one state")
    H = np.asarray([np.asarray(s, dtype=np.float64) for s in states])
    w = np.asarray(weights, dtype=np.float64)
    if H.ndim != 2:
        raise DimensionError("states must share one dimension")
    if w.shape != (H.shape[0],):
        raise DimensionError(f"{H.shape[0]} states but weights of shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > tol:
        raise ContractError(f"weights are not a probability vector (sum={w.sum()!r})")
    norms = np.linalg.norm(H, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError(f"states must be unit-norm, got norms {norms}")
    rho = (H * w[:, None]).T @ H
    return DensityMatrix(0.5 * (rho + rho.T))


def tensor_product(A, B) -> np.ndarray:
    return np.kron(np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64))


def commutator(A, B) -> tuple[np.ndarray, float]:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape != B.shape:
        raise DimensionError(f"commutator needs equal square matrices, got {A.shape}, {B.shape}")
    C = A @ B - B @ A
    return C, float(np.sqrt(np.sum(C * C)))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: n-1 rounds of n/2 disjoint (p, q) pairs covering every pair once.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=int), np.array(qs, dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def hermitian_eig(M, tol: float = EIG_TOL, max_sweeps: int = EIG_MAX_SWEEPS):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in round-robin order, each round annihilating n/2
    disjoint off-diagonal pairs at once. Iterates until the off-diagonal
    Frobenius norm drops below ``tol * ||M||_F``.

    Returns:
        (eigenvalues ascending, eigenvector matrix with eigenvectors as columns)
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"hermitian_eig needs a square matrix, got {A.shape}")
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(A)))):
        raise ContractError(f"hermitian_eig needs a symmetric matrix, asymmetry {asym:.3e}")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    if n <= 1:
        return np.diag(A).copy(), V
    scale = max(float(np.linalg.norm(A)), np.finfo(float).tiny)
    rounds = _round_robin(n)

    offdiag = ~np.eye(n, dtype=bool)

    def off_norm(X):
        return float(np.sqrt(np.sum(X[offdiag] ** 2)))

    for _ in range(max_sweeps):
        if off_norm(A) <= tol * scale:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > EIG_TOL * 1e-6 * scale
            if not active.any():
                continue
            theta = np.where(active, (A[q, q] - A[p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            J = np.eye(n)
            J[p, p] = c
            J[q, q] = c
            J[p, q] = s
            J[q, p] = -s
            A = J.T @ A @ J
            A = 0.5 * (A + A.T)
            V = V @ J
    else:
        resid = off_norm(A)
        if resid > tol * scale:
            raise NumericalError(
                f"Jacobi did not converge in {max_sweeps} sweeps: off-diagonal norm {resid:.3e}"
            )
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def matrix_log(M, eps: float = LOG_EPS) -> np.ndarray:
    """log of a symmetric PSD matrix, eigenvalues floored at ``eps``."""
    w, V = hermitian_eig(M)
    return (V * np.log(np.maximum(w, eps))) @ V.T


def relative_entropy(sigma, rho, eps: float = LOG_EPS) -> float:
    """Quantum relative entropy Tr(s log s) - Tr(s log r)."""
    S = sigma.entries if isinstance(sigma, DensityMatrix) else np.asarray(sigma, dtype=np.float64)
    R = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=np.float64)
    if S.shape != R.shape or S.ndim != 2:
        raise DimensionError(f"relative_entropy shape mismatch: {S.shape} vs {R.shape}")
    ws, _ = hermitian_eig(S)
    ws = np.maximum(ws, 0.0)
    self_term = float(np.sum(ws * np.log(np.maximum(ws, eps))))
    cross_term = float(np.sum(S * matrix_log(R, eps)))
    return self_term - cross_term
