"""State kernel, structured kernel interpolation, Fisher kernel and GP marginal likelihood.

The composite GP kernel over state-action samples is
``K = c1 * Ks + c2 * Kf`` with ``Ks`` an additive deep-RBF state kernel
(approximated by SKI on per-feature Toeplitz grids) and
``Kf = U^T G^{-1} U`` the Fisher kernel of the policy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.linalg.lapack
import scipy.sparse

from .errors import ConfigError, DimensionError, InputError, NumericalBreakdown
from .linalg_ops import (
    CG_MAX_ITERS,
    CG_TOL,
    LinearOperator,
    ToeplitzSpec,
    cg_solve,
    randomized_range_svd,
    scaled_sum,
    toeplitz_mvm,
)
from .nn import MLP
from .optim import Adam
from .policy import ScoreOperator, fisher_operator

logger = logging.getLogger(__name__)

FEATURE_HIDDEN = (64, 48, 10)
GRID_MARGIN = 3  # grid cells kept beyond the extreme feature values
MLL_DENSE_CAP = 1024
FISHER_ROUTES = ("truncated_svd", "jacobian_products")


class DeepRBFKernel:
    """Additive RBF kernel on learned features ``f = phi(s)``.

    ``k(s1, s2) = sum_d sf * exp(-(f_d(s1) - f_d(s2))^2 / (2 l_d^2))``.
    The parameter vector is the feature-net weights, then ``log l``, then
    ``log sf``.  ``feature_net=None`` uses the raw state as features.
    """

    def __init__(self, state_dim, feature_net: Optional[MLP] = None, params=None, seed=0,
                 lengthscale=1.0, signal_scale=1.0):
        self.state_dim = int(state_dim)
        self.feature_net = feature_net
        if feature_net is not None and feature_net.sizes[0] != self.state_dim:
            raise DimensionError("feature net input size must equal the state dimension")
        self.n_features = feature_net.sizes[-1] if feature_net is not None else self.state_dim
        if params is None:
            rng = np.random.default_rng(seed)
            net = feature_net.init_params(rng) if feature_net is not None else np.zeros(0)
            params = np.concatenate([net, np.full(self.n_features, np.log(lengthscale)), [np.log(signal_scale)]])
        self.set_params(params)

    @classmethod
    def deep(cls, state_dim, hidden=FEATURE_HIDDEN, seed=0, **kw):
        return cls(state_dim, MLP((state_dim, *hidden), "tanh"), seed=seed, **kw)

    @property
    def n_net_params(self):
        return self.feature_net.n_params if self.feature_net is not None else 0

    @property
    def n_params(self):
        return self.n_net_params + self.n_features + 1

    def get_params(self):
        return self._params.copy()

    def set_params(self, params):
        params = np.array(params, dtype=float)
        if params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} kernel parameters, got {params.shape}")
        self._params = params

    def copy(self):
        return DeepRBFKernel(self.state_dim, self.feature_net, self._params)

    @property
    def net_params(self):
        return self._params[: self.n_net_params]

    @property
    def lengthscales(self):
        return np.exp(self._params[self.n_net_params:-1])

    @property
    def signal_scale(self):
        return float(np.exp(self._params[-1]))

    def features(self, states, return_cache=False):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if not np.all(np.isfinite(states)):
            raise InputError("non-finite state")
        if self.feature_net is None:
            return (states, None) if return_cache else states
        out, cache = self.feature_net.forward(self.net_params, states)
        return (out, cache) if return_cache else out

    def feature_backward(self, cache, dF):
        """Gradient w.r.t. the feature-net parameters of ``sum(dF * features)``."""
        if self.feature_net is None:
            return np.zeros(0)
        return self.feature_net.backward(self.net_params, cache, dF)

    def gram_from_features(self, F1, F2):
        ls = self.lengthscales
        diff = (F1[:, None, :] - F2[None, :, :]) / ls
        return self.signal_scale * np.exp(-0.5 * diff ** 2).sum(axis=2)

    def gram(self, S1, S2=None):
        F1 = self.features(S1)
        F2 = F1 if S2 is None else self.features(S2)
        return self.gram_from_features(F1, F2)

    def __call__(self, s1, s2):
        return float(self.gram(np.reshape(s1, (1, -1)), np.reshape(s2, (1, -1)))[0, 0])


def state_kernel_eval(kernel: DeepRBFKernel, s1, s2):
    return kernel(s1, s2)


@dataclass
class KernelModel:
    """Everything that defines the composite GP prior over Q."""

    state_kernel: DeepRBFKernel
    c1: float = 1.0
    c2: float = 5e-5
    sigma2: float = 1e-4
    grid_size: int = 128
    fisher_route: str = "truncated_svd"
    fisher_rank: Optional[int] = None  # None: min(|Theta|, 512, n)
    fisher_damping: float = 0.0  # 0 uses the pseudo-inverse of G
    svd_oversample: int = 10
    svd_power_iters: int = 2
    fisher_cg_iters: int = CG_MAX_ITERS
    fisher_cg_tol: float = CG_TOL

    def __post_init__(self):
        if self.c1 < 0 or self.c2 < 0 or self.sigma2 <= 0:
            raise ConfigError("need c1 >= 0, c2 >= 0 and sigma2 > 0")
        if self.fisher_route not in FISHER_ROUTES:
            raise ConfigError(f"unknown Fisher route {self.fisher_route!r}")
        if self.grid_size < 2 * GRID_MARGIN + 2:
            raise ConfigError(f"grid size must be at least {2 * GRID_MARGIN + 2}")

    @classmethod
    def default(cls, state_dim, seed=0, **kw):
        return cls(DeepRBFKernel.deep(state_dim, seed=seed), **kw)


# --------------------------------------------------------------------------
# Structured kernel interpolation
# --------------------------------------------------------------------------


def _keys_cubic(d):
    d = np.abs(d)
    return np.where(
        d <= 1.0,
        1.5 * d ** 3 - 2.5 * d ** 2 + 1.0,
        np.where(d < 2.0, -0.5 * d ** 3 + 2.5 * d ** 2 - 4.0 * d + 2.0, 0.0),
    )


def cubic_interp_weights(x, lo, h, m):
    """Cubic-convolution weights of points ``x`` on the grid ``lo + h * arange(m)``.

    Returns ``(idx, w)`` of shape ``(n, 4)``; indices past the grid ends are
    clipped onto the boundary node so each row still sums to one.
    """
    pos = (np.asarray(x, dtype=float) - lo) / h
    base = np.floor(pos).astype(int)
    t = pos - base
    offsets = np.arange(-1, 3)
    idx = base[:, None] + offsets
    w = _keys_cubic(t[:, None] - offsets)
    return np.clip(idx, 0, m - 1), w


@dataclass
class GridDim:
    lo: float
    h: float
    m: int
    weights: Optional[scipy.sparse.csr_matrix]  # None for a collapsed (constant) dimension
    toeplitz: Optional[ToeplitzSpec]

    @property
    def points(self):
        return self.lo + self.h * np.arange(self.m)


class SKIOperator:
    """``Ks ~= sum_d W_d T_d W_d^T`` with sparse cubic ``W_d`` and Toeplitz ``T_d``."""

    def __init__(self, dims, signal_scale, n):
        self.dims = dims
        self.signal_scale = signal_scale
        self.n = n
        self.op = LinearOperator(n, self._mvm, True, "ski", block=True)

    def _mvm(self, v):
        out = np.zeros_like(v, dtype=float)
        for g in self.dims:
            if g.weights is None:
                out += self.signal_scale * v.sum(axis=0)
            else:
                out += g.weights @ toeplitz_mvm(g.toeplitz, g.weights.T @ v)
        return out

    def matvec(self, v):
        return self.op.matvec(v)

    def dense(self):
        out = np.zeros((self.n, self.n))
        for g in self.dims:
            if g.weights is None:
                out += self.signal_scale
            else:
                W = g.weights.toarray()
                out += W @ g.toeplitz.dense() @ W.T
        return out


def _grid_for(values, m, grid=None):
    lo_v, hi_v = float(values.min()), float(values.max())
    if grid is not None:
        lo, h = grid
        if lo <= lo_v and hi_v <= lo + h * (m - 1):
            return lo, h
        logger.debug("supplied grid does not cover features; expanding")
    h = (hi_v - lo_v) / (m - 1 - 2 * GRID_MARGIN)
    return lo_v - GRID_MARGIN * h, h


def ski_build(kernel, states, grid_size=None, grids=None) -> SKIOperator:
    """Interpolate the additive state kernel onto evenly spaced per-feature grids.

    ``kernel`` is a :class:`KernelModel` or a bare :class:`DeepRBFKernel`.
    ``grids`` optionally fixes ``(lo, spacing)`` per feature dimension.
    """
    if isinstance(kernel, KernelModel):
        grid_size = grid_size or kernel.grid_size
        kernel = kernel.state_kernel
    m = int(grid_size or 128)
    F = kernel.features(states)
    n = F.shape[0]
    sf = kernel.signal_scale
    dims = []
    for d in range(F.shape[1]):
        f = F[:, d]
        span = f.max() - f.min()
        if span <= 1e-12 * max(1.0, abs(f.max())):
            dims.append(GridDim(float(f[0]), 0.0, 1, None, None))
            continue
        lo, h = _grid_for(f, m, None if grids is None else grids[d])
        idx, w = cubic_interp_weights(f, lo, h, m)
        rows = np.repeat(np.arange(n), 4)
        W = scipy.sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, m))
        col = sf * np.exp(-0.5 * (h * np.arange(m) / kernel.lengthscales[d]) ** 2)
        dims.append(GridDim(lo, h, m, W, ToeplitzSpec(col)))
    return SKIOperator(dims, sf, n)


# --------------------------------------------------------------------------
# Fisher kernel
# --------------------------------------------------------------------------


class FisherKernel:
    """``Kf = U^T (G + damping I)^+ U`` on the batch, with ``G = U U^T / n``.

    ``jacobian_products`` applies ``U``, a CG solve with ``G`` and ``U^T`` per
    product.  ``truncated_svd`` factors ``U = P S R^T`` once (rank ``delta``)
    and applies ``R diag(n s^2 / (s^2 + n damping)) R^T``, which is
    ``n R R^T`` when ``damping == 0``.
    """

    def __init__(self, scores: ScoreOperator, route="truncated_svd", rank=None, damping=0.0,
                 oversample=10, power_iters=2, seed=None, cg_iters=CG_MAX_ITERS, cg_tol=CG_TOL):
        if route not in FISHER_ROUTES:
            raise ConfigError(f"unknown Fisher route {route!r}")
        self.scores = scores
        self.route = route
        self.damping = float(damping)
        self.n = scores.n
        self.cg_iters, self.cg_tol = cg_iters, cg_tol
        self.last_cg = None
        self._basis = None
        if route == "truncated_svd":
            full = min(scores.n_params, scores.n)
            rank = min(full, 512) if rank is None else min(int(rank), full)
            left, s, _ = randomized_range_svd(
                scores.matmat, scores.rmatmat, (scores.n, scores.n_params), rank,
                oversample=oversample, power_iters=power_iters, seed=seed,
            )
            # drop numerically null directions; they carry no score information
            keep = s > s.max(initial=0.0) * max(scores.n, scores.n_params) * np.finfo(float).eps if s.size else s > 0
            self.R = left[:, keep]
            self.singular_values = s[keep]
            s2 = self.singular_values ** 2
            self.eig = self.n * s2 / (s2 + self.n * self.damping)
            self.rank = int(keep.sum())
        else:
            self.fisher = fisher_operator(None, None, scores)
            self.rank = None
        self.op = LinearOperator(self.n, self._mvm, True, f"fisher_kernel[{route}]", block=True)

    def _mvm(self, v):
        if self.route == "truncated_svd":
            coef = self.R.T @ v
            coef = self.eig * coef if v.ndim == 1 else self.eig[:, None] * coef
            return self.R @ coef
        x, info = cg_solve(self.fisher, self.scores.apply(v), damping=self.damping,
                           max_iters=self.cg_iters, tol=self.cg_tol, return_info=True)
        self.last_cg = info
        return self.scores.apply_t(x)

    def matvec(self, v):
        return self.op.matvec(v)

    @property
    def score_basis(self):
        """Orthonormal ``P`` with ``U ~= P S R^T`` (truncated route only).

        ``Kf = n R R^T`` is exactly the Fisher kernel of the projected scores
        ``P P^T U``, so estimators project score products onto ``P``.
        """
        if self.route != "truncated_svd":
            return None
        if self._basis is None:
            self._basis = self.scores.rmatmat(self.R) / self.singular_values
        return self._basis

    def project(self, x):
        """``P P^T x`` for parameter-space vectors or blocks (identity on the CG route)."""
        P = self.score_basis
        return x if P is None else P @ (P.T @ x)

    def dense_block(self, idx):
        """``Kf[idx][:, idx]`` for a small index set."""
        idx = np.asarray(idx)
        if self.route == "truncated_svd":
            Ri = self.R[idx]
            return (Ri * self.eig) @ Ri.T
        E = np.zeros((self.n, idx.size))
        E[idx, np.arange(idx.size)] = 1.0
        return self._mvm(E)[idx]


def fisher_kernel_operator(policy, batch, route="truncated_svd", rank=None, damping=0.0, seed=None,
                           oversample=10, power_iters=2, scores=None, **cg) -> FisherKernel:
    scores = scores if scores is not None else ScoreOperator.for_batch(policy, batch)
    return FisherKernel(scores, route, rank, damping, oversample, power_iters, seed, **cg)


@dataclass
class CompositeKernel:
    """``K = c1 * Ks_hat + c2 * Kf`` on one batch; absent parts are skipped."""

    op: LinearOperator
    c1: float
    c2: float
    ski: Optional[SKIOperator]
    fisher: Optional[FisherKernel]
    scores: ScoreOperator
    info: dict = field(default_factory=dict)


def composite_kernel_operator(kernel: KernelModel, policy, batch, seed=None, scores=None) -> CompositeKernel:
    scores = scores if scores is not None else ScoreOperator.for_batch(policy, batch)
    ski = ski_build(kernel, batch.states) if kernel.c1 > 0 else None
    fisher = None
    if kernel.c2 > 0:
        fisher = FisherKernel(
            scores, kernel.fisher_route, kernel.fisher_rank, kernel.fisher_damping,
            kernel.svd_oversample, kernel.svd_power_iters, seed,
            cg_iters=kernel.fisher_cg_iters, cg_tol=kernel.fisher_cg_tol,
        )
    terms = []
    if ski is not None:
        terms.append((kernel.c1, ski.op))
    if fisher is not None:
        terms.append((kernel.c2, fisher.op))
    if terms:
        op = scaled_sum(terms, "composite")
    else:
        op = LinearOperator(batch.n, lambda v: np.zeros_like(v), True, "zero", block=True)
    return CompositeKernel(op, kernel.c1, kernel.c2, ski, fisher, scores)


# --------------------------------------------------------------------------
# Marginal likelihood
# --------------------------------------------------------------------------


@dataclass
class MLLResult:
    mll: float
    grad: np.ndarray
    sigma2_used: float
    n: int
    indices: np.ndarray


def _cholesky_with_jitter(K, sigma2):
    """Factor ``K + s I`` starting at ``s = sigma2``, escalating by 10x up to 3 times."""
    s = sigma2
    for attempt in range(4):
        try:
            L = scipy.linalg.cholesky(K + s * np.eye(len(K)), lower=True)
            return L, s
        except np.linalg.LinAlgError:
            if attempt == 3:
                break
            logger.warning("Cholesky failed at noise %.3e; escalating jitter", s)
            s *= 10.0
    raise NumericalBreakdown(f"Cholesky failed after jitter escalation to {s:.3e}")


def gp_mll_and_grad(kernel: KernelModel, batch, fisher: Optional[FisherKernel] = None, rng=None,
                    max_points=MLL_DENSE_CAP, indices=None) -> MLLResult:
    """Dense GP objective ``J = -(log|K + s2 I| + Q^T (K + s2 I)^{-1} Q) / n`` and its gradient.

    The gradient covers all state-kernel parameters (feature net, log
    lengthscales, log signal scale).  ``c2 * Kf`` enters as a fixed additive
    term when a Fisher kernel is supplied.  Batches larger than
    ``max_points`` are subsampled without replacement.
    """
    Q_all = batch.require_q()
    if indices is None:
        if batch.n > max_points:
            rng = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(rng.choice(batch.n, size=max_points, replace=False))
        else:
            indices = np.arange(batch.n)
    indices = np.asarray(indices)
    S = batch.states[indices]
    Q = Q_all[indices]
    n = len(indices)
    sk = kernel.state_kernel
    F, cache = sk.features(S, return_cache=True)
    ls, sf = sk.lengthscales, sk.signal_scale

    diffs = [F[:, d][:, None] - F[:, d][None, :] for d in range(F.shape[1])]
    expo = [np.exp(-0.5 * (D / ls[d]) ** 2) for d, D in enumerate(diffs)]
    Ks = sf * np.sum(expo, axis=0)
    K = kernel.c1 * Ks
    if fisher is not None and kernel.c2 > 0:
        K = K + kernel.c2 * fisher.dense_block(indices)
    K = 0.5 * (K + K.T)

    L, s2 = _cholesky_with_jitter(K, kernel.sigma2)
    alpha = scipy.linalg.cho_solve((L, True), Q)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    mll = -(logdet + Q @ alpha) / n

    Kinv, info = scipy.linalg.lapack.dpotri(L, lower=1)
    if info != 0:
        raise NumericalBreakdown(f"inverse from Cholesky factor failed (info={info})")
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    dJ_dKs = -(kernel.c1 / n) * (Kinv - np.outer(alpha, alpha))

    g_logsf = float(np.sum(dJ_dKs * Ks))
    g_logls = np.empty(F.shape[1])
    dF = np.empty_like(F)
    for d, (D, E) in enumerate(zip(diffs, expo)):
        A = dJ_dKs * E * sf
        g_logls[d] = np.sum(A * D ** 2) / ls[d] ** 2
        dF[:, d] = -2.0 / ls[d] ** 2 * (F[:, d] * A.sum(axis=1) - A @ F[:, d])
    g_net = sk.feature_backward(cache, dF)
    grad = np.concatenate([g_net, g_logls, [g_logsf]])
    return MLLResult(float(mll), grad, s2, n, indices)


def update_kernel_params(kernel: KernelModel, grad_phi, optimizer: Adam) -> KernelModel:
    """One ascent step on the marginal likelihood; returns ``kernel`` updated in place."""
    grad_phi = np.asarray(grad_phi, dtype=float)
    if not np.all(np.isfinite(grad_phi)):
        raise InputError("non-finite kernel gradient")
    sk = kernel.state_kernel
    sk.set_params(optimizer.ascend(sk.get_params(), grad_phi))
    return kernel
