"""Dense linear algebra kernel of the package.

Matrices are plain 2-D float64 ``numpy.ndarray`` objects (row-major). This
module provides the validated public operations the rest of the package is
written against: matrix product, thin SVD with a fixed sign convention, and
population variance. Hot training loops use raw numpy internally; the
contracts here are the reference semantics those loops must agree with.

All routines are pure functions, operate in 64-bit precision, and are
deterministic for a fixed input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError, ShapeError

__all__ = [
    "SvdResult",
    "as_matrix",
    "matmul",
    "svd",
    "singular_values",
    "variance",
    "frobenius",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce *a* to a 2-D float64 array and validate finiteness."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dims, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with explicit shape validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            f"inner dimensions {a.shape[1]} != {b.shape[0]}"
        )
    return a @ b


def frobenius(a) -> float:
    """Frobenius norm of a matrix."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def variance(w) -> float:
    """Population variance over all entries (divides by the entry count).

    The population convention (not the n-1 sample one) is used because the
    quantity of interest is the spread of the realized weight values, not an
    estimate of a generating distribution.
    """
    w = as_matrix(w, "w")
    if w.size < 2:
        raise DomainError("variance requires at least 2 entries")
    return float(np.var(w))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD: u (m x k) orthonormal columns, sigma (k,) non-increasing,
    vt (k x n) orthonormal rows, k = min(m, n)."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt

    def truncate(self, r: int) -> "SvdResult":
        if not 1 <= r <= self.sigma.shape[0]:
            raise DomainError(f"rank {r} outside [1, {self.sigma.shape[0]}]")
        return SvdResult(self.u[:, :r].copy(), self.sigma[:r].copy(), self.vt[:r].copy())


def svd(w) -> SvdResult:
    """Thin SVD of *w* with a deterministic sign convention.

    The largest-magnitude entry of each left singular vector is forced
    non-negative (the matching row of vt is flipped with it), which makes
    the output unique whenever the singular values are distinct. Singular
    values come back sorted non-increasing and clipped at zero.
    """
    w = as_matrix(w, "w")
    try:
        u, s, vt = np.linalg.svd(w, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for shape {w.shape}: {exc}") from exc
    s = np.maximum(s, 0.0)
    # Sign convention: pivot on the largest-|entry| of each u column.
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    vt = vt * signs[:, None]
    return SvdResult(u, s, vt)


def singular_values(w) -> np.ndarray:
    """Singular values only, non-increasing, clipped at zero."""
    w = as_matrix(w, "w")
    try:
        s = np.linalg.svd(w, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for shape {w.shape}: {exc}") from exc
    return np.maximum(s, 0.0)
