"""Monte-Carlo, Bayesian-quadrature and uncertainty-aware policy-gradient estimators.

With ``U`` the score matrix, ``Q`` the action-value targets and
``K = c1 Ks + c2 Kf`` the composite kernel on the batch:

* MC:       ``L = U Q / n``
* BQ mean:  ``L = c2 U (K + s2 I)^{-1} Q``
* BQ cov:   ``C = c2 G - c2^2 U (K + s2 I)^{-1} U^T``
* natural:  ``G^{-1} L`` with a damped CG solve.

UAPG rescales an estimate along the top-``delta`` principal directions of
its uncertainty so every direction carries comparable uncertainty.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EstimatorError, NumericalBreakdown, SpectrumError
from .kernels import CompositeKernel, KernelModel, composite_kernel_operator, ski_build
from .linalg_ops import (
    CG_DAMPING,
    CG_MAX_ITERS,
    CG_TOL,
    LinearOperator,
    TruncatedSpectrum,
    cg_solve,
    randomized_svd,
)
from .policy import ScoreOperator, fisher_operator

logger = logging.getLogger(__name__)

UAPG_RANK = 100
UAPG_EPSILON = 3.0
KINDS = ("mc", "mc_natural", "bq_vanilla", "bq_natural", "uapg_vanilla", "uapg_natural")


@dataclass
class GradientEstimate:
    mean: np.ndarray
    kind: str
    covariance_op: Optional[LinearOperator] = None
    spectrum: Optional[TruncatedSpectrum] = None
    diagnostics: dict = field(default_factory=dict)
    # intermediate objects reused by downstream transforms
    context: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimate kind {self.kind!r}")
        if not np.all(np.isfinite(self.mean)):
            raise EstimatorError(f"non-finite {self.kind} gradient mean", self.diagnostics)


def _scores(policy, batch, scores=None):
    return scores if scores is not None else ScoreOperator.for_batch(policy, batch)


def mc_gradient(policy, batch, scores=None, weighted=False) -> GradientEstimate:
    """``(1/n) U Q``; ``weighted=True`` scales each sample by its stored ``gamma^t`` weight."""
    U = _scores(policy, batch, scores)
    Q = batch.require_q()
    if weighted:
        Q = Q * np.asarray(batch.discount_weights, float)
    return GradientEstimate(U.vjp(Q) / batch.n, "mc", context={"scores": U})


def _kernel_solve(composite: CompositeKernel, rhs, sigma2, cg_iters, cg_tol, diagnostics, key):
    try:
        x, info = cg_solve(composite.op, rhs, shift=sigma2, max_iters=cg_iters, tol=cg_tol, return_info=True)
    except NumericalBreakdown as exc:
        raise EstimatorError(f"kernel solve failed: {exc}", dict(diagnostics)) from exc
    diagnostics[f"{key}_cg_iterations"] = info.iterations
    diagnostics[f"{key}_cg_residual"] = info.residual
    return x


def dbqpg_gradient(policy, batch, kernel: KernelModel, seed=None, composite: Optional[CompositeKernel] = None,
                   cg_iters=CG_MAX_ITERS, cg_tol=CG_TOL, scores=None) -> GradientEstimate:
    """BQ posterior mean of the gradient with a lazy posterior-covariance operator."""
    Q = batch.require_q()
    U = composite.scores if composite is not None else _scores(policy, batch, scores)
    P = U.n_params
    diag = {}
    if kernel.c2 == 0.0:
        # the Fisher kernel is what couples Q to the gradient; without it both moments vanish
        zero = LinearOperator(P, lambda v: np.zeros_like(v, dtype=float), True, "zero covariance", block=True)
        return GradientEstimate(np.zeros(P), "bq_vanilla", zero, diagnostics=diag,
                                context={"scores": U, "kernel": kernel, "composite": composite})
    if composite is None:
        composite = composite_kernel_operator(kernel, policy, batch, seed=seed, scores=U)
    fisher_k = composite.fisher
    if fisher_k.rank is not None:
        diag["fisher_rank"] = fisher_k.rank
    c2, s2 = kernel.c2, kernel.sigma2
    alpha = _kernel_solve(composite, Q, s2, cg_iters, cg_tol, diag, "mean")
    mean = c2 * fisher_k.project(U.vjp(alpha))
    G = fisher_operator(None, None, U)

    def cov_mvm(v):
        v = fisher_k.project(v)
        inner = _kernel_solve(composite, U.apply_t(v), s2, cg_iters, cg_tol, diag, "cov")
        return fisher_k.project(c2 * G.apply(v) - c2 * c2 * U.apply(inner))

    cov = LinearOperator(P, cov_mvm, True, "bq covariance", block=True)
    ctx = {"scores": U, "kernel": kernel, "composite": composite, "alpha": alpha,
           "cg_iters": cg_iters, "cg_tol": cg_tol}
    return GradientEstimate(mean, "bq_vanilla", cov, diagnostics=diag, context=ctx)


def dbqpg_covariance_mvm(estimate: GradientEstimate, v):
    if estimate.kind != "bq_vanilla" or estimate.covariance_op is None:
        raise EstimatorError("covariance products need a vanilla BQ estimate")
    return estimate.covariance_op.apply(v)


def natural_gradient(policy, batch, estimate: GradientEstimate, damping=CG_DAMPING,
                     cg_iters=CG_MAX_ITERS, cg_tol=CG_TOL) -> GradientEstimate:
    """``(G + damping I)^{-1}`` applied to the estimate's mean."""
    kinds = {"mc": "mc_natural", "bq_vanilla": "bq_natural"}
    if estimate.kind not in kinds:
        raise EstimatorError(f"cannot precondition a {estimate.kind} estimate")
    U = estimate.context.get("scores") or ScoreOperator.for_batch(policy, batch)
    G = fisher_operator(None, None, U)
    try:
        x, info = cg_solve(G, estimate.mean, damping=damping, max_iters=cg_iters, tol=cg_tol, return_info=True)
    except NumericalBreakdown as exc:
        raise EstimatorError(f"Fisher solve failed: {exc}", dict(estimate.diagnostics)) from exc
    diag = dict(estimate.diagnostics, fisher_cg_iterations=info.iterations, fisher_cg_residual=info.residual)
    ctx = dict(estimate.context, vanilla=estimate, damping=damping)
    return GradientEstimate(x, kinds[estimate.kind], diagnostics=diag, context=ctx)


# --------------------------------------------------------------------------
# Uncertainty-aware transforms
# --------------------------------------------------------------------------


def _check_floor(spectrum: TruncatedSpectrum):
    nu = spectrum.values
    floor = nu[0] * spectrum.dim * np.finfo(float).eps if nu.size else 0.0
    if nu.size == 0 or nu[-1] <= floor:
        raise SpectrumError(f"smallest retained eigenvalue {nu[-1] if nu.size else 0.0:.3e} is not positive")
    return nu[-1]


def uapg_vanilla_transform(mean, spectrum: TruncatedSpectrum):
    """``nu_d^{-1/2} (I + sum_i h_i (sqrt(nu_d / nu_i) - 1) h_i^T) mean``."""
    nu_d = _check_floor(spectrum)
    H, nu = spectrum.vectors, spectrum.values
    coef = (np.sqrt(nu_d / nu) - 1.0) * (H.T @ mean)
    return (mean + H @ coef) / np.sqrt(nu_d)


def uapg_natural_transform(natural_mean, spectrum: TruncatedSpectrum, epsilon=UAPG_EPSILON):
    """``nu_d^{1/2} (I + sum_i h_i (min(sqrt(nu_i / nu_d), eps) - 1) h_i^T) natural_mean``.

    ``spectrum`` holds the top eigenpairs of the inverse natural covariance.
    ``epsilon=None`` disables the clip.
    """
    nu_d = _check_floor(spectrum)
    H, nu = spectrum.vectors, spectrum.values
    ratio = np.sqrt(nu / nu_d)
    if epsilon is not None:
        ratio = np.minimum(ratio, epsilon)
    coef = (ratio - 1.0) * (H.T @ natural_mean)
    return np.sqrt(nu_d) * (natural_mean + H @ coef)


def uapg_vanilla(estimate: GradientEstimate, delta=UAPG_RANK, seed=None, oversample=10, power_iters=2) -> GradientEstimate:
    if estimate.kind != "bq_vanilla" or estimate.covariance_op is None:
        raise EstimatorError("vanilla UAPG needs a vanilla BQ estimate")
    cov = estimate.covariance_op
    spectrum = randomized_svd(cov, min(int(delta), cov.dim), oversample, power_iters, seed)
    mean = uapg_vanilla_transform(estimate.mean, spectrum)
    diag = dict(estimate.diagnostics, uapg_rank=spectrum.rank, uapg_nu_max=float(spectrum.values[0]),
                uapg_nu_min=float(spectrum.values[-1]), pre_transform_norm=float(np.linalg.norm(estimate.mean)))
    return GradientEstimate(mean, "uapg_vanilla", cov, spectrum, diag, dict(estimate.context, base=estimate))


def natural_precision_operator(policy, batch, kernel: KernelModel, damping=CG_DAMPING, composite=None,
                               cg_iters=CG_MAX_ITERS, cg_tol=CG_TOL, seed=None, scores=None) -> LinearOperator:
    """Inverse natural covariance ``(1/c2) (G_damped + c2 U (c1 Ks + s2 I)^{-1} U^T)`` as an operator."""
    if kernel.c2 <= 0:
        raise EstimatorError("the natural covariance is undefined for c2 = 0")
    U = composite.scores if composite is not None else _scores(policy, batch, scores)
    ski = composite.ski if composite is not None else None
    if ski is None and kernel.c1 > 0:
        ski = ski_build(kernel, batch.states)
    c1, c2, s2 = kernel.c1, kernel.c2, kernel.sigma2
    G = fisher_operator(None, None, U)
    diag = {}

    def state_solve(rhs):
        if c1 == 0 or ski is None:
            return rhs / s2
        state_op = ski.op.scaled(c1)
        x, info = cg_solve(state_op, rhs, shift=s2, max_iters=cg_iters, tol=cg_tol, return_info=True)
        diag["state_cg_residual"] = info.residual
        return x

    def mvm(v):
        return (G.apply(v) + damping * v) / c2 + U.apply(state_solve(U.apply_t(v)))

    return LinearOperator(U.n_params, mvm, True, "natural precision", block=True)


def uapg_natural(policy, batch, kernel: KernelModel, estimate: GradientEstimate, delta=UAPG_RANK,
                 epsilon=UAPG_EPSILON, damping=CG_DAMPING, seed=None, oversample=10, power_iters=2,
                 cg_iters=None, cg_tol=None) -> GradientEstimate:
    if estimate.kind != "bq_natural":
        raise EstimatorError("natural UAPG needs a natural BQ estimate")
    if epsilon is not None and epsilon <= 1:
        raise EstimatorError("the clip epsilon must exceed 1")
    ctx = estimate.context
    cg_iters = cg_iters or ctx.get("cg_iters", CG_MAX_ITERS)
    cg_tol = cg_tol or ctx.get("cg_tol", CG_TOL)
    prec = natural_precision_operator(policy, batch, kernel, damping, ctx.get("composite"), cg_iters, cg_tol,
                                      scores=ctx.get("scores"))
    spectrum = randomized_svd(prec, min(int(delta), prec.dim), oversample, power_iters, seed)
    mean = uapg_natural_transform(estimate.mean, spectrum, epsilon)
    diag = dict(estimate.diagnostics, uapg_rank=spectrum.rank, uapg_nu_max=float(spectrum.values[0]),
                uapg_nu_min=float(spectrum.values[-1]), pre_transform_norm=float(np.linalg.norm(estimate.mean)))
    return GradientEstimate(mean, "uapg_natural", prec, spectrum, diag, dict(ctx, base=estimate))
