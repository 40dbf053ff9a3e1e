"""Linear layers: the dense baseline and the low-rank factorized form.

A factorized layer stores a weight matrix W (m x n) as two factors
u (m x r) and v (n x r) with effective weight u @ v.T, cutting parameters
from m*n to r*(m+n). The forward pass is always computed as u @ (v.T @ x),
never by materializing u @ v.T, so the compute cost shrinks by the same
ratio as the parameter count.

``spectral_init`` builds the factors from the truncated SVD of a
conventionally initialized dense matrix, splitting sqrt(sigma) symmetrically
between the two factors. By Eckart-Young the resulting u @ v.T is the best
rank-r approximation of the dense matrix, and it preserves the dense
matrix's variance in the full-rank limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .linalg import as_matrix, svd

__all__ = [
    "DenseLinear",
    "FactorizedLinear",
    "DenseGrads",
    "LayerGrads",
    "kaiming_uniform",
    "spectral_init",
    "param_count",
    "flop_count",
]


def kaiming_uniform(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """He fan-in uniform init for an (m x n) weight: U(-sqrt(6/n), sqrt(6/n))."""
    if m < 1 or n < 1:
        raise DomainError(f"dims must be positive, got ({m}, {n})")
    bound = np.sqrt(6.0 / n)
    return rng.uniform(-bound, bound, size=(m, n))


def _check_input(x: np.ndarray, n: int, who: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != n:
        raise ShapeError(f"{who} expects input of shape ({n}, batch), got {x.shape}")
    return x


@dataclass
class DenseGrads:
    grad_w: np.ndarray
    grad_bias: np.ndarray | None
    grad_input: np.ndarray


@dataclass
class LayerGrads:
    grad_u: np.ndarray
    grad_v: np.ndarray
    grad_bias: np.ndarray | None
    grad_input: np.ndarray


@dataclass
class DenseLinear:
    """Full-rank linear map z = w @ x + bias, x given column-wise (n x batch)."""

    w: np.ndarray
    bias: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def n(self) -> int:
        return self.w.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_input(x, self.n, "DenseLinear")
        z = self.w @ x
        if self.bias is not None:
            z += self.bias[:, None]
        return z

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> DenseGrads:
        x = _check_input(x, self.n, "DenseLinear")
        if grad_out.shape != (self.m, x.shape[1]):
            raise ShapeError(
                f"grad_out shape {grad_out.shape} != ({self.m}, {x.shape[1]})"
            )
        grad_w = grad_out @ x.T
        grad_b = grad_out.sum(axis=1) if self.bias is not None else None
        grad_x = self.w.T @ grad_out
        return DenseGrads(grad_w, grad_b, grad_x)


@dataclass
class FactorizedLinear:
    """Low-rank linear map z = u @ (v.T @ x) + bias.

    The association order is load-bearing: the intermediate v.T @ x has r
    rows, so a forward pass costs r*(m+n)*batch multiply-adds instead of
    the dense m*n*batch. u @ v.T is never formed outside of diagnostics.
    """

    u: np.ndarray  # (m, r)
    v: np.ndarray  # (n, r)
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[1] != self.v.shape[1]:
            raise ShapeError(
                f"factor shapes {self.u.shape} / {self.v.shape} are not (m,r)/(n,r)"
            )
        if self.r > min(self.m, self.n):
            raise DomainError(f"rank {self.r} exceeds min(m,n)={min(self.m, self.n)}")

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def r(self) -> int:
        return self.u.shape[1]

    def effective_weight(self) -> np.ndarray:
        """Materialize u @ v.T. Diagnostics/analysis only; never in forward."""
        return self.u @ self.v.T

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_input(x, self.n, "FactorizedLinear")
        z = self.u @ (self.v.T @ x)
        if self.bias is not None:
            z += self.bias[:, None]
        return z

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> LayerGrads:
        x = _check_input(x, self.n, "FactorizedLinear")
        if grad_out.shape != (self.m, x.shape[1]):
            raise ShapeError(
                f"grad_out shape {grad_out.shape} != ({self.m}, {x.shape[1]})"
            )
        h = self.v.T @ x                       # (r, batch)
        grad_u = grad_out @ h.T                # (m, r)
        ug = self.u.T @ grad_out               # (r, batch)
        grad_v = x @ ug.T                      # (n, r)
        grad_x = self.v @ ug                   # (n, batch)
        grad_b = grad_out.sum(axis=1) if self.bias is not None else None
        return LayerGrads(grad_u, grad_v, grad_b, grad_x)


def spectral_init(w, r: int, bias: np.ndarray | None = None) -> FactorizedLinear:
    """Factorize a dense matrix into rank-r factors via its truncated SVD.

    u = U_{:r} sqrt(S_r), v.T = sqrt(S_r) Vt_{:r}, so u @ v.T is the best
    rank-r approximation of w in Frobenius norm. The dense w is not retained.
    """
    w = as_matrix(w, "w")
    k = min(w.shape)
    if not 1 <= r <= k:
        raise DomainError(f"rank {r} outside [1, {k}] for shape {w.shape}")
    dec = svd(w)
    root = np.sqrt(dec.sigma[:r])
    u = dec.u[:, :r] * root
    v = dec.vt[:r].T * root
    return FactorizedLinear(u, v, bias)


def param_count(layer) -> int:
    """Weight-matrix parameter count (bias excluded): m*n dense, r*(m+n) factorized."""
    if isinstance(layer, FactorizedLinear):
        return layer.r * (layer.m + layer.n)
    if isinstance(layer, DenseLinear):
        return layer.m * layer.n
    raise TypeError(f"not a linear layer: {type(layer).__name__}")


def flop_count(layer, batch: int) -> int:
    """Forward multiply-add flops (counted as 2) for a batch of columns."""
    if batch < 0:
        raise DomainError("batch must be non-negative")
    return 2 * param_count(layer) * batch
