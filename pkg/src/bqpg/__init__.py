"""Bayesian-quadrature policy gradients with matrix-free linear algebra.

Modules: ``linalg_ops`` (operators, CG, randomized SVD, Toeplitz MVM),
``policy`` (Gaussian MLP policy and score products), ``kernels`` (deep RBF
state kernel, SKI, Fisher kernel, marginal likelihood), ``estimators`` (MC,
DBQPG, UAPG), ``envs`` (LQR, point mass, pendulum, rollouts, GAE),
``algos`` (vanilla, NPG and TRPO updates, training loop) and ``harness``
(config, CLI, gradient-quality study).
"""

from .errors import (
    BQPGError,
    ConfigError,
    DimensionError,
    EstimatorError,
    InputError,
    NumericalBreakdown,
    OracleCapExceeded,
    SpectrumError,
)
from .estimators import GradientEstimate, dbqpg_gradient, mc_gradient, natural_gradient, uapg_natural, uapg_vanilla
from .kernels import DeepRBFKernel, KernelModel
from .policy import GaussianMLPPolicy, SampleBatch, ScoreOperator

__version__ = "0.1.0"
