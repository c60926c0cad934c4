"""Matrix-free linear algebra: operators, CG, randomized SVD, Toeplitz MVM."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericalBreakdown, OracleCapExceeded

logger = logging.getLogger(__name__)

# defaults for the practical solver regime used in training
CG_MAX_ITERS = 50
CG_TOL = 1e-10
CG_DAMPING = 0.1

DENSE_ORACLE_CAP = 2048


@dataclass(frozen=True)
class LinearOperator:
    """A square operator known only through its action on vectors.

    ``mvm`` receives either a vector of length ``dim`` or, when ``block`` is
    set, a ``(dim, k)`` array whose columns are mapped independently.
    """

    dim: int
    mvm: Callable[[np.ndarray], np.ndarray]
    symmetric: bool = True
    description: str = ""
    block: bool = False

    def __post_init__(self):
        if int(self.dim) <= 0:
            raise DimensionError(f"operator dimension must be positive, got {self.dim}")

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise DimensionError(f"{self.description or 'operator'}: expected vector of length {self.dim}, got shape {v.shape}")
        out = np.asarray(self.mvm(v), dtype=float)
        if out.shape != (self.dim,):
            raise DimensionError(f"{self.description or 'operator'}: mvm returned shape {out.shape}")
        return out

    def matmat(self, V):
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[0] != self.dim:
            raise DimensionError(f"expected ({self.dim}, k) block, got shape {V.shape}")
        if self.block:
            out = np.asarray(self.mvm(V), dtype=float)
        else:
            out = np.column_stack([self.mvm(V[:, j]) for j in range(V.shape[1])]) if V.shape[1] else np.zeros((self.dim, 0))
        if out.shape != V.shape:
            raise DimensionError(f"{self.description or 'operator'}: matmat returned shape {out.shape}")
        return out

    def apply(self, v):
        """Apply to a vector or a column block, whichever ``v`` is."""
        v = np.asarray(v, dtype=float)
        return self.matvec(v) if v.ndim == 1 else self.matmat(v)

    __matmul__ = apply

    def scaled(self, a: float) -> "LinearOperator":
        return scaled_sum([(a, self)])

    def __add__(self, other):
        return scaled_sum([(1.0, self), (1.0, other)])

    def __rmul__(self, a):
        return self.scaled(float(a))


def scaled_sum(terms, description=None) -> LinearOperator:
    """Operator ``sum_i a_i A_i`` for a list of ``(a_i, A_i)`` pairs."""
    terms = [(float(a), op) for a, op in terms]
    dims = {op.dim for _, op in terms}
    if len(dims) != 1:
        raise DimensionError(f"cannot combine operators of dimensions {sorted(dims)}")
    dim = dims.pop()

    def mvm(v):
        out = np.zeros_like(v, dtype=float)
        for a, op in terms:
            if a != 0.0:
                out += a * op.apply(v)
        return out

    desc = description or " + ".join(f"{a:g}*{op.description or 'A'}" for a, op in terms)
    return LinearOperator(dim, mvm, all(op.symmetric for _, op in terms), desc, block=True)


def matrix_operator(M, description="matrix") -> LinearOperator:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"matrix operator needs a square matrix, got {M.shape}")
    return LinearOperator(M.shape[0], lambda v: M @ v, bool(np.allclose(M, M.T)), description, block=True)


def diag_operator(d, description="diag") -> LinearOperator:
    d = np.asarray(d, dtype=float)
    return LinearOperator(d.size, lambda v: d * v if v.ndim == 1 else d[:, None] * v, True, description, block=True)


def identity_operator(dim) -> LinearOperator:
    return LinearOperator(dim, lambda v: v.copy(), True, "I", block=True)


def dense_materialize(op: LinearOperator, cap: int = DENSE_ORACLE_CAP) -> np.ndarray:
    """Form the full matrix of ``op`` by applying it to the standard basis."""
    if op.dim > cap:
        raise OracleCapExceeded(f"operator dimension {op.dim} exceeds dense oracle cap {cap}")
    return op.matmat(np.eye(op.dim))


# --------------------------------------------------------------------------
# Conjugate gradients
# --------------------------------------------------------------------------


@dataclass
class CGInfo:
    iterations: int
    residual: float  # worst relative residual over columns
    converged: bool
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))


def cg_solve(
    op: LinearOperator,
    rhs,
    shift: float = 0.0,
    max_iters: int = CG_MAX_ITERS,
    tol: float = CG_TOL,
    damping: float = 0.0,
    return_info: bool = False,
):
    """Solve ``(op + (shift + damping) I) x = rhs`` by conjugate gradients.

    ``rhs`` may be a vector or a ``(dim, k)`` block; block columns are solved
    as independent CG recursions sharing one operator application per step.
    If the tolerance is not met within ``max_iters`` the lowest-residual
    iterate per column is returned and a warning is logged.
    """
    b = np.asarray(rhs, dtype=float)
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    if b.ndim != 2 or b.shape[0] != op.dim:
        raise DimensionError(f"rhs shape {np.shape(rhs)} does not match operator dimension {op.dim}")
    if shift < 0 or damping < 0:
        raise ValueError("shift and damping must be non-negative")
    if not np.all(np.isfinite(b)):
        raise NumericalBreakdown("non-finite right-hand side")
    diag = float(shift) + float(damping)

    def A(X):
        return op.matmat(X) + diag * X

    k = b.shape[1]
    bnorm = np.linalg.norm(b, axis=0)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.einsum("ij,ij->j", r, r)
    active = bnorm > 0
    target = tol * bnorm
    best_x = x.copy()
    best_res = np.sqrt(rs)
    it = 0
    while it < max_iters and np.any(active & (best_res > target)):
        cols = np.flatnonzero(active)
        Ap = A(p[:, cols])
        pAp = np.einsum("ij,ij->j", p[:, cols], Ap)
        if not np.all(np.isfinite(Ap)) or not np.all(np.isfinite(pAp)):
            raise NumericalBreakdown(f"non-finite values in CG iteration {it}")
        # curvature collapse means the column is solved to working precision
        ok = pAp > 0
        if not np.all(ok):
            active[cols[~ok]] = False
            cols, Ap, pAp = cols[ok], Ap[:, ok], pAp[ok]
            if cols.size == 0:
                break
        alpha = rs[cols] / pAp
        x[:, cols] += alpha * p[:, cols]
        r[:, cols] -= alpha * Ap
        rs_new = np.einsum("ij,ij->j", r[:, cols], r[:, cols])
        if not np.all(np.isfinite(x[:, cols])):
            raise NumericalBreakdown(f"non-finite iterate in CG iteration {it}")
        res = np.sqrt(rs_new)
        better = res < best_res[cols]
        best_res[cols[better]] = res[better]
        best_x[:, cols[better]] = x[:, cols[better]]
        beta = rs_new / rs[cols]
        p[:, cols] = r[:, cols] + beta * p[:, cols]
        rs[cols] = rs_new
        done = res <= target[cols]
        active[cols[done]] = False
        it += 1

    rel = np.where(bnorm > 0, best_res / np.where(bnorm > 0, bnorm, 1.0), 0.0)
    converged = bool(np.all(rel <= tol))
    info = CGInfo(it, float(rel.max()) if k else 0.0, converged, rel)
    if not converged:
        logger.debug("CG stopped after %d iterations with relative residual %.3e", it, info.residual)
    out = best_x[:, 0] if vector else best_x
    return (out, info) if return_info else out


# --------------------------------------------------------------------------
# Randomized SVD
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TruncatedSpectrum:
    """Top eigenpairs: ``vectors`` has orthonormal columns, ``values`` is non-increasing."""

    vectors: np.ndarray
    values: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.values.size)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[0])


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _orth(Y):
    Q, _ = scipy.linalg.qr(Y, mode="economic", check_finite=False)
    return Q


def _normalize(Y):
    """Cheap well-conditioned basis for intermediate power steps (pivoted LU factor)."""
    L = scipy.linalg.lu(Y, permute_l=True, check_finite=False)[0]
    return L if np.all(np.isfinite(L)) else _orth(Y)


def randomized_svd(
    op: LinearOperator,
    rank: int,
    oversample: int = 10,
    power_iters: int = 2,
    seed=None,
) -> TruncatedSpectrum:
    """Top-``rank`` eigenpairs of a symmetric PSD operator by subspace sketching.

    The sketch width ``rank + oversample`` is clipped to ``op.dim``; at full
    width the result is exact up to rounding.
    """
    if rank <= 0 or rank > op.dim:
        raise DimensionError(f"rank must lie in [1, {op.dim}], got {rank}")
    rng = _rng(seed)
    width = min(rank + max(oversample, 0), op.dim)
    Y = op.matmat(rng.standard_normal((op.dim, width)))
    for _ in range(power_iters):
        Y = op.matmat(_normalize(Y))
    Q = _orth(Y)
    B = Q.T @ op.matmat(Q)
    B = 0.5 * (B + B.T)
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1][:rank]
    vals = np.clip(vals[order], 0.0, None)
    return TruncatedSpectrum(Q @ vecs[:, order], vals)


def randomized_range_svd(matmat, rmatmat, shape, rank, oversample=10, power_iters=2, seed=None):
    """Truncated SVD of a rectangular ``A`` given ``A @ X`` and ``A.T @ Y``.

    Returns ``(left, s, right)`` with ``A ~= left @ diag(s) @ right.T``.
    """
    m, n = shape
    if rank <= 0 or rank > min(m, n):
        raise DimensionError(f"rank must lie in [1, {min(m, n)}], got {rank}")
    rng = _rng(seed)
    width = min(rank + max(oversample, 0), m, n)
    Y = matmat(rng.standard_normal((n, width)))
    for _ in range(power_iters):
        Z = rmatmat(_normalize(Y))
        Y = matmat(_normalize(Z))
    Q = _orth(Y)
    Bt = rmatmat(Q)  # (n, width) = (Q^T A)^T
    W, s, Vt = np.linalg.svd(Bt, full_matrices=False)
    left = Q @ Vt.T
    return left[:, :rank], s[:rank], W[:, :rank]


# --------------------------------------------------------------------------
# Toeplitz
# --------------------------------------------------------------------------


class ToeplitzSpec:
    """Symmetric Toeplitz matrix ``T[i, j] = first_column[|i - j|]``.

    The circulant embedding (length: next power of two >= 2m - 1) and its
    real FFT are computed once at construction.
    """

    def __init__(self, first_column):
        c = np.asarray(first_column, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise DimensionError("first_column must be a non-empty vector")
        self.first_column = c
        m = c.size
        size = 1
        while size < 2 * m - 1:
            size *= 2
        circ = np.zeros(size)
        circ[:m] = c
        if m > 1:
            circ[size - m + 1:] = c[:0:-1]
        self.size = size
        self.fft_workspace = np.fft.rfft(circ)

    @property
    def m(self):
        return self.first_column.size

    def dense(self):
        idx = np.arange(self.m)
        return self.first_column[np.abs(idx[:, None] - idx[None, :])]


def toeplitz_mvm(spec: ToeplitzSpec, v) -> np.ndarray:
    """``T @ v`` in O(m log m) through the circulant embedding."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != spec.m or v.ndim > 2:
        raise DimensionError(f"vector length {v.shape[0]} does not match Toeplitz size {spec.m}")
    ws = spec.fft_workspace if v.ndim == 1 else spec.fft_workspace[:, None]
    out = np.fft.irfft(ws * np.fft.rfft(v, n=spec.size, axis=0), n=spec.size, axis=0)
    return out[: spec.m]


def toeplitz_operator(spec: ToeplitzSpec) -> LinearOperator:
    return LinearOperator(spec.m, lambda v: toeplitz_mvm(spec, v), True, "toeplitz", block=True)
