"""Gradient-quality study: cosine accuracy and normalized variance versus sample size.

For each probe size ``n`` and repeat ``r`` one batch is drawn and every
estimator is evaluated on that same batch, so comparisons are paired.
Accuracy is the cosine similarity to an MC gradient computed from a much
larger oracle batch.  Normalized variance is the trace of the sample
covariance (``ddof = 1``) of the ``R`` estimates divided by the squared norm
of their mean.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..envs import GAEConfig, LinearCritic, collect_batch, discounted_returns, gae_advantages, make_env
from ..errors import ConfigError
from ..estimators import dbqpg_gradient, mc_gradient, uapg_vanilla
from ..kernels import DeepRBFKernel, KernelModel, gp_mll_and_grad, update_kernel_params
from ..optim import Adam
from ..policy import GaussianMLPPolicy, ScoreOperator

logger = logging.getLogger(__name__)

CSV_SCHEMA = "gradquality-v1"
CSV_COLUMNS = ("estimator", "n", "accuracy_mean", "accuracy_stderr", "normvar", "repeats", "flag")
ESTIMATORS = ("mc", "dbqpg", "uapg")


@dataclass
class GradQualityConfig:
    env: str = "lqr"
    env_params: dict = field(default_factory=dict)
    sample_sizes: tuple = (512, 2048, 8192)
    repeats: int = 25
    oracle_n: int = 100_000
    estimators: tuple = ("mc", "dbqpg")
    q: str = "gae"  # returns | gae
    gamma: float = 0.995
    tau: float = 0.97
    cg_iters: int = 50
    cg_tol: float = 1e-10
    uapg_delta: int = 100
    kernel_fit_steps: int = 0
    fit_critic: bool = True  # least-squares linear value critic used by q = "gae"
    kernel_fit_n: int = 2048
    kernel_lr: float = 1e-2
    policy_hidden: tuple = (64, 64)
    c1: float = 1.0
    c2: float = 5e-5
    sigma2: float = 1e-4
    features: str = "deep"
    fisher_rank: Optional[int] = None
    svd_power_iters: int = 2
    seed: int = 0

    def __post_init__(self):
        self.sample_sizes = tuple(int(n) for n in self.sample_sizes)
        self.estimators = tuple(self.estimators)
        if not self.sample_sizes or min(self.sample_sizes) <= 0 or self.repeats < 1:
            raise ConfigError("need positive sample sizes and at least one repeat")
        if self.oracle_n < 10 * max(self.sample_sizes):
            raise ConfigError(f"oracle size {self.oracle_n} must be at least 10x the largest probe size")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ConfigError(f"unknown estimators {sorted(bad)}")
        if self.q not in ("returns", "gae"):
            raise ConfigError("q must be 'returns' or 'gae'")


@dataclass
class StudyResult:
    rows: list
    oracle: np.ndarray
    oracle_split_cosine: float
    estimates: dict  # (estimator, n) -> (R, |Theta|) array
    info: dict = field(default_factory=dict)

    def csv_text(self):
        lines = [f"# schema {CSV_SCHEMA}", ",".join(CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([
                r["estimator"], str(r["n"]), f"{r['accuracy_mean']:.17g}", f"{r['accuracy_stderr']:.17g}",
                f"{r['normvar']:.17g}", str(r["repeats"]), r["flag"],
            ]))
        return "\n".join(lines) + "\n"

    def row(self, estimator, n):
        for r in self.rows:
            if r["estimator"] == estimator and r["n"] == n:
                return r
        raise KeyError((estimator, n))


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0


def normalized_variance(estimates):
    """``tr(Cov) / |mean|^2`` over repeated estimates (rows); 0 for a single estimate."""
    E = np.asarray(estimates, float)
    if len(E) < 2:
        return 0.0
    mean = E.mean(axis=0)
    tr = float(np.sum(E.var(axis=0, ddof=1)))
    denom = float(mean @ mean)
    return tr / denom if denom > 0 else float("inf")


def _targets(cfg, batch, critic=None):
    if cfg.q == "returns":
        return discounted_returns(batch, cfg.gamma)
    return gae_advantages(batch, critic, GAEConfig(cfg.gamma, cfg.tau), write=False)


def fit_critic(features: DeepRBFKernel, env, policy, cfg: GradQualityConfig, rng):
    """Least-squares linear value critic on returns, over a frozen copy of ``features``."""
    if cfg.q != "gae" or not cfg.fit_critic:
        return None
    frozen = features.copy()
    batch = collect_batch(env, policy, cfg.kernel_fit_n, rng, cfg.gamma)
    F = frozen.features(batch.states)
    X = np.concatenate([F, np.ones((len(F), 1))], axis=1)
    p = np.linalg.lstsq(X, discounted_returns(batch, cfg.gamma), rcond=None)[0]
    return LinearCritic(frozen.features, frozen.n_features, p[:-1], p[-1])


def fit_kernel(kernel: KernelModel, env, policy, cfg: GradQualityConfig, rng, critic=None):
    """Marginal-likelihood ascent on a dedicated batch before the study."""
    if cfg.kernel_fit_steps <= 0:
        return kernel
    batch = collect_batch(env, policy, cfg.kernel_fit_n, rng, cfg.gamma)
    batch.q_values = _targets(cfg, batch, critic)
    opt = Adam(cfg.kernel_lr)
    for _ in range(cfg.kernel_fit_steps):
        res = gp_mll_and_grad(kernel, batch, None, rng)
        update_kernel_params(kernel, res.grad, opt)
    return kernel


def _estimate(name, policy, batch, kernel, cfg, seed):
    if name == "mc":
        return mc_gradient(policy, batch).mean
    scores = ScoreOperator.for_batch(policy, batch)
    est = dbqpg_gradient(policy, batch, kernel, seed=seed, cg_iters=cfg.cg_iters, cg_tol=cfg.cg_tol, scores=scores)
    if name == "uapg":
        est = uapg_vanilla(est, cfg.uapg_delta, seed)
    return est.mean


def grad_quality_study(cfg: GradQualityConfig, policy: Optional[GaussianMLPPolicy] = None,
                       kernel: Optional[KernelModel] = None) -> StudyResult:
    env = make_env(cfg.env, cfg.env_params)
    seeds = np.random.SeedSequence(cfg.seed)
    oracle_seq, fit_seq, init_seq, probe_seq = seeds.spawn(4)
    if policy is None:
        policy = GaussianMLPPolicy(env.state_dim, env.action_dim, cfg.policy_hidden,
                                   seed=int(init_seq.generate_state(1)[0]))
    kseed = int(init_seq.generate_state(2)[1])
    sk = DeepRBFKernel.deep(env.state_dim, seed=kseed) if cfg.features == "deep" else DeepRBFKernel(env.state_dim)
    if kernel is None and set(cfg.estimators) & {"dbqpg", "uapg"}:
        kernel = KernelModel(sk, cfg.c1, cfg.c2, cfg.sigma2, fisher_rank=cfg.fisher_rank,
                             svd_power_iters=cfg.svd_power_iters)
    critic_seq, kfit_seq = fit_seq.spawn(2)
    critic = fit_critic(kernel.state_kernel if kernel is not None else sk, env, policy, cfg,
                        np.random.default_rng(critic_seq))
    if kernel is not None:
        kernel = fit_kernel(kernel, env, policy, cfg, np.random.default_rng(kfit_seq), critic)

    t0 = time.perf_counter()
    oracle_batch = collect_batch(env, policy, cfg.oracle_n, np.random.default_rng(oracle_seq), cfg.gamma)
    oracle_batch.q_values = _targets(cfg, oracle_batch, critic)
    scores = ScoreOperator.for_batch(policy, oracle_batch)
    oracle = mc_gradient(policy, oracle_batch, scores).mean
    half = oracle_batch.n // 2
    w = oracle_batch.q_values.copy()
    w_a, w_b = w.copy(), w.copy()
    w_a[half:] = 0.0
    w_b[:half] = 0.0
    split = cosine(scores.vjp(w_a), scores.vjp(w_b))
    del scores, oracle_batch

    estimates = {(e, n): [] for e in cfg.estimators for n in cfg.sample_sizes}
    size_seqs = probe_seq.spawn(len(cfg.sample_sizes))
    for n, seq in zip(cfg.sample_sizes, size_seqs):
        for r, sub in enumerate(seq.spawn(cfg.repeats)):
            rng = np.random.default_rng(sub)
            batch = collect_batch(env, policy, n, rng, cfg.gamma)
            batch.q_values = _targets(cfg, batch, critic)
            est_seed = int(rng.integers(2 ** 31))
            for name in cfg.estimators:
                estimates[(name, n)].append(_estimate(name, policy, batch, kernel, cfg, est_seed))
        logger.info("probe size %d done", n)

    rows = []
    for name in cfg.estimators:
        for n in cfg.sample_sizes:
            E = np.array(estimates[(name, n)])
            acc = np.array([cosine(e, oracle) for e in E])
            stderr = float(acc.std(ddof=1) / np.sqrt(len(acc))) if len(acc) > 1 else 0.0
            flag = "degenerate_single_repeat" if len(acc) < 2 else ""
            rows.append({"estimator": name, "n": n, "accuracy_mean": float(acc.mean()), "accuracy_stderr": stderr,
                         "normvar": normalized_variance(E), "repeats": len(acc), "flag": flag})
    info = {"elapsed_s": time.perf_counter() - t0}
    return StudyResult(rows, oracle, split, {k: np.array(v) for k, v in estimates.items()}, info)
