"""Dense helpers, a matrix-free conjugate gradient solver and spectral probes.

Vectors handed to a :class:`LinearOperator` may have any array shape (for
instance the shape of a weight matrix); inner products are always taken over
all entries, which is the Frobenius inner product used throughout.
"""
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import scipy.linalg

from .exceptions import DimensionError, FactorizationError, NumericalBreakdown


def inner(x, y):
    """Frobenius inner product of two equally shaped arrays."""
    return float(np.vdot(x, y))


def gemm(A, B):
    """Matrix product ``A @ B`` with an explicit shape check."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2:
        raise DimensionError(f"gemm expects 2-D operands, got {A.shape} and {B.shape}")
    if A.shape[1] != B.shape[0]:
        raise DimensionError(f"inner dimensions differ: {A.shape} @ {B.shape}")
    return A @ B


@dataclass(frozen=True)
class LinearOperator:
    """A linear map known only through its action on arrays of ``shape``."""

    apply: Callable[[np.ndarray], np.ndarray]
    shape: Tuple[int, ...]

    @property
    def dim(self):
        return int(np.prod(self.shape))

    def __call__(self, x):
        return self.apply(x)

    @classmethod
    def from_matrix(cls, A):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError(f"expected a square matrix, got {A.shape}")
        return cls(lambda x: A @ x, (A.shape[0],))

    def to_dense(self):
        """Materialize the operator column by column (small sizes only)."""
        n = self.dim
        cols = np.empty((n, n))
        e = np.zeros(n)
        for j in range(n):
            e[j] = 1.0
            cols[:, j] = np.asarray(self.apply(e.reshape(self.shape))).ravel()
            e[j] = 0.0
        return cols


def cg_solve(op, b, max_iters=None, tol=1e-10, callback=None, reorthogonalize=False):
    """Conjugate gradients for ``op(x) = b`` started from ``x = 0``.

    Stops after ``max_iters`` iterations or once the recursively updated
    residual satisfies ``||r|| <= tol * ||b||``. The zero start is not
    configurable: the descent property of truncated iterates relies on it.

    With ``reorthogonalize`` every new residual is re-orthogonalized against
    all previous ones. The iterates are unchanged in exact arithmetic, but
    finite termination after ``dim`` steps survives rounding on
    ill-conditioned systems, at the cost of storing ``max_iters`` residuals.

    Returns ``(x, iters)``. ``callback(k, x, r)`` is called after each
    iteration if given.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != tuple(op.shape):
        raise DimensionError(f"right-hand side shape {b.shape} != operator shape {op.shape}")
    if max_iters is None:
        max_iters = op.dim
    x = np.zeros_like(b)
    bnorm = np.sqrt(inner(b, b))
    if bnorm == 0.0:
        return x, 0
    if not np.isfinite(bnorm):
        raise NumericalBreakdown("non-finite right-hand side", 0)

    r = b.copy()
    p = r.copy()
    rr = bnorm ** 2
    basis = [r / bnorm] if reorthogonalize else None
    k = 0
    while k < max_iters and np.sqrt(rr) > tol * bnorm:
        Ap = op(p)
        pAp = inner(p, Ap)
        if not np.isfinite(pAp):
            raise NumericalBreakdown("non-finite curvature", k + 1)
        if pAp <= 0.0:
            # exact convergence to rounding, or an indefinite operator
            if rr <= (np.finfo(float).eps * bnorm) ** 2:
                break
            raise NumericalBreakdown(f"non-positive curvature {pAp:.3e}", k + 1)
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        if basis is not None:
            for q in basis:
                r -= inner(q, r) * q
        rr_new = inner(r, r)
        if not np.isfinite(rr_new):
            raise NumericalBreakdown("non-finite residual", k + 1)
        p = r + (rr_new / rr) * p
        rr = rr_new
        if basis is not None and rr > 0.0:
            basis.append(r / np.sqrt(rr))
        k += 1
        if callback is not None:
            callback(k, x, r)
    return x, k


def direct_spd_solve(A, B):
    """Solve ``A X = B`` for symmetric positive-definite ``A`` by Cholesky."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
        raise DimensionError(f"cannot solve {A.shape} system with right-hand side {B.shape}")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise FactorizationError(str(exc)) from exc
    return scipy.linalg.cho_solve(factor, B, check_finite=False)


def _start_vector(shape, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v)


def power_iteration(op, dim=None, iters=100, seed=0):
    """Estimate the largest eigenvalue of a symmetric PSD operator.

    Returns the Rayleigh quotient of the final iterate; for PSD operators the
    sequence of quotients is nondecreasing in ``iters``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    shape = tuple(op.shape) if dim is None else (dim,)
    v = _start_vector(shape, seed).reshape(op.shape)
    for _ in range(iters):
        w = op(v)
        norm = np.sqrt(inner(w, w))
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(inner(v, op(v)))


def inverse_power_iteration(op, iters=50, seed=0, tol=1e-12):
    """Estimate the smallest eigenvalue of an SPD operator.

    Each step solves ``op(w) = v`` with conjugate gradients run to ``tol``,
    so the operator never needs to be materialized.
    """
    v = _start_vector(tuple(op.shape), seed)
    for _ in range(iters):
        w, _ = cg_solve(op, v, max_iters=10 * op.dim, tol=tol)
        v = w / np.sqrt(inner(w, w))
    return float(inner(v, op(v)))
