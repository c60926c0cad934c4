"""Policy-optimization drivers (vanilla PG, NPG, TRPO) over any gradient estimator, and the training loop."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import save_kernel, save_policy
from .envs import GAEConfig, LinearCritic, collect_batch, critic_update, discounted_returns, gae_advantages, make_env
from .errors import BQPGError, ConfigError
from .estimators import (
    UAPG_EPSILON,
    UAPG_RANK,
    GradientEstimate,
    dbqpg_gradient,
    mc_gradient,
    natural_gradient,
    uapg_natural,
    uapg_vanilla,
)
from .kernels import (
    CompositeKernel,
    DeepRBFKernel,
    FisherKernel,
    KernelModel,
    gp_mll_and_grad,
    ski_build,
    update_kernel_params,
)
from .linalg_ops import CG_DAMPING, CG_MAX_ITERS, CG_TOL, scaled_sum
from .optim import Adam
from .policy import GaussianMLPPolicy, ScoreOperator, fisher_operator

logger = logging.getLogger(__name__)

TRUST_REGION = 0.01
VANILLA_LR = 7e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 10
NATURAL_KINDS = ("mc_natural", "bq_natural", "uapg_natural")


@dataclass
class StepResult:
    policy: GaussianMLPPolicy
    accepted: bool
    info: dict = field(default_factory=dict)


def vanilla_step(policy, estimate: GradientEstimate, optimizer: Adam) -> StepResult:
    """One adaptive-moment ascent step along the estimate's mean."""
    g = estimate.mean
    if not np.all(np.isfinite(g)):
        logger.warning("non-finite gradient; vanilla step rejected")
        return StepResult(policy, False, {"reason": "non-finite gradient"})
    theta = optimizer.ascend(policy.get_theta(), g)
    if not np.all(np.isfinite(theta)):
        logger.warning("non-finite update; vanilla step rejected")
        return StepResult(policy, False, {"reason": "non-finite update"})
    return StepResult(policy.with_theta(theta), True, {"step_norm": float(np.linalg.norm(theta - policy.get_theta()))})


def _natural_direction(policy, batch, estimate, damping, scores):
    if estimate.kind in NATURAL_KINDS:
        return estimate.mean
    return natural_gradient(policy, batch, estimate, damping).mean


def _kl_scale(G, d, damping, radius):
    quad = float(d @ (G.apply(d) + damping * d))
    if not np.isfinite(quad) or quad <= 0:
        return None, quad
    return np.sqrt(2.0 * radius / quad), quad


def npg_step(policy, batch, estimate: GradientEstimate, damping=CG_DAMPING, radius=TRUST_REGION, scores=None) -> StepResult:
    """``theta + sqrt(2 r / d^T (G + damping I) d) d`` along the natural direction ``d``."""
    scores = scores or estimate.context.get("scores") or ScoreOperator.for_batch(policy, batch)
    d = _natural_direction(policy, batch, estimate, damping, scores)
    if not np.any(d):
        return StepResult(policy, True, {"step_norm": 0.0})
    scale, quad = _kl_scale(fisher_operator(None, None, scores), d, damping, radius)
    if scale is None:
        logger.warning("non-positive curvature %.3e along step; NPG step rejected", quad)
        return StepResult(policy, False, {"reason": "non-positive curvature"})
    theta = policy.get_theta() + scale * d
    return StepResult(policy.with_theta(theta), True, {"step_norm": float(scale * np.linalg.norm(d)), "quad": quad})


def surrogate(policy, batch, advantages=None):
    """Importance-weighted advantage against the behavior log-probs."""
    adv = batch.require_q() if advantages is None else advantages
    ratio = np.exp(policy.log_probs(batch.states, batch.actions) - batch.logprobs_behavior)
    return float(np.mean(ratio * adv))


def trpo_step(policy, batch, estimate: GradientEstimate, damping=CG_DAMPING, radius=TRUST_REGION, scores=None,
              backtrack=BACKTRACK, max_backtracks=MAX_BACKTRACKS) -> StepResult:
    """KL-scaled natural step followed by a backtracking line search.

    The first candidate with a non-negative surrogate improvement and mean
    KL within ``radius`` is accepted; otherwise the policy is unchanged.
    """
    scores = scores or estimate.context.get("scores") or ScoreOperator.for_batch(policy, batch)
    d = _natural_direction(policy, batch, estimate, damping, scores)
    if not np.any(d):
        return StepResult(policy, True, {"step_norm": 0.0, "backtracks": 0})
    scale, quad = _kl_scale(fisher_operator(None, None, scores), d, damping, radius)
    if scale is None:
        return StepResult(policy, False, {"reason": "non-positive curvature", "backtracks": 0})
    theta0 = policy.get_theta()
    base = surrogate(policy, batch)
    frac = 1.0
    for k in range(max_backtracks + 1):
        cand = policy.with_theta(theta0 + frac * scale * d)
        gain = surrogate(cand, batch) - base
        kl = policy.kl(batch.states, cand)
        if np.isfinite(gain) and gain >= 0 and kl <= radius:
            return StepResult(cand, True, {"backtracks": k, "surrogate_gain": gain, "kl": kl,
                                           "step_norm": float(frac * scale * np.linalg.norm(d))})
        frac *= backtrack
    return StepResult(policy, False, {"reason": "line search exhausted", "backtracks": max_backtracks})


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    env: str = "lqr"
    env_params: dict = field(default_factory=dict)
    algorithm: str = "vanilla"  # vanilla | npg | trpo
    estimator: str = "mc"  # mc | dbqpg | uapg
    iterations: int = 200
    batch_size: int = 15000
    step_size: float = TRUST_REGION  # KL radius for npg / trpo
    lr: float = VANILLA_LR
    damping: float = CG_DAMPING
    gamma: float = 0.995
    tau: float = 0.97
    normalize_advantages: bool = True
    policy_hidden: tuple = (64, 64)
    cg_iters: int = CG_MAX_ITERS
    cg_tol: float = CG_TOL
    c1: float = 1.0
    c2: float = 5e-5
    sigma2: float = 1e-4
    grid_size: int = 128
    features: str = "deep"  # deep | identity
    feature_hidden: tuple = (64, 48, 10)
    fisher_route: str = "truncated_svd"
    fisher_rank: Optional[int] = None
    fisher_damping: float = 0.0
    svd_power_iters: int = 2
    svd_oversample: int = 10
    kernel_lr: float = 1e-3
    mll_points: int = 1024
    critic_lr: float = 0.5
    critic_steps: int = 25
    uapg_delta: int = UAPG_RANK
    uapg_epsilon: float = UAPG_EPSILON
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        self.policy_hidden = tuple(int(h) for h in self.policy_hidden)
        self.feature_hidden = tuple(int(h) for h in self.feature_hidden)
        if self.algorithm not in ("vanilla", "npg", "trpo"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.estimator not in ("mc", "dbqpg", "uapg"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.features not in ("deep", "identity"):
            raise ConfigError(f"unknown feature map {self.features!r}")
        if self.iterations < 0 or self.batch_size <= 0:
            raise ConfigError("iterations must be >= 0 and batch_size > 0")
        if self.step_size <= 0 or self.lr <= 0:
            raise ConfigError("step size and learning rate must be positive")

    def kernel_model(self, state_dim, seed):
        if self.features == "deep":
            sk = DeepRBFKernel.deep(state_dim, self.feature_hidden, seed=seed)
        else:
            sk = DeepRBFKernel(state_dim, None, seed=seed)
        return KernelModel(sk, self.c1, self.c2, self.sigma2, self.grid_size, self.fisher_route, self.fisher_rank,
                           self.fisher_damping, self.svd_oversample, self.svd_power_iters, self.cg_iters, self.cg_tol)


CSV_COLUMNS = (
    "iteration", "mean_return", "n_episodes", "n_samples", "kl", "grad_norm", "pre_transform_norm",
    "cg_iterations", "cg_residual", "fisher_rank", "nu_max", "nu_min", "mll", "value_loss", "accepted", "diverged",
)
CSV_SCHEMA = "train-v1"


@dataclass
class RunRecord:
    config: TrainConfig
    rows: list = field(default_factory=list)
    complete: bool = True
    error: Optional[str] = None
    policy: Optional[GaussianMLPPolicy] = None
    kernel: Optional[KernelModel] = None
    initial_return: Optional[float] = None

    def final_return(self, window=10):
        vals = [r["mean_return"] for r in self.rows[-window:]]
        return float(np.mean(vals)) if vals else float("nan")

    def csv_text(self):
        lines = [f"# schema {CSV_SCHEMA} complete={int(self.complete)}", ",".join(CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row.get(c)) for c in CSV_COLUMNS))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def _normalized(adv):
    sd = adv.std()
    return (adv - adv.mean()) / sd if sd > 0 else adv - adv.mean()


def _estimate(cfg: TrainConfig, policy, batch, kernel, scores, rng, kernel_opt, critic_feature_grad, diag):
    """Kernel learning followed by the configured gradient estimate."""
    if cfg.estimator == "mc":
        est = mc_gradient(policy, batch, scores)
        if critic_feature_grad is not None and critic_feature_grad.size:
            n_ls = kernel.state_kernel.n_features + 1
            update_kernel_params(kernel, np.concatenate([critic_feature_grad, np.zeros(n_ls)]), kernel_opt)
    else:
        seed = int(rng.integers(2 ** 31))
        fisher = FisherKernel(scores, kernel.fisher_route, kernel.fisher_rank, kernel.fisher_damping,
                              kernel.svd_oversample, kernel.svd_power_iters, seed,
                              cg_iters=cfg.cg_iters, cg_tol=cfg.cg_tol) if kernel.c2 > 0 else None
        mll = gp_mll_and_grad(kernel, batch, fisher, rng, cfg.mll_points)
        grad = mll.grad.copy()
        if critic_feature_grad is not None and critic_feature_grad.size:
            grad[:critic_feature_grad.size] += critic_feature_grad
        update_kernel_params(kernel, grad, kernel_opt)
        diag["mll"] = mll.mll
        ski = ski_build(kernel, batch.states) if kernel.c1 > 0 else None
        terms = [(kernel.c1, ski.op)] if ski is not None else []
        if fisher is not None:
            terms.append((kernel.c2, fisher.op))
        composite = CompositeKernel(scaled_sum(terms, "composite"), kernel.c1, kernel.c2, ski, fisher, scores)
        est = dbqpg_gradient(policy, batch, kernel, composite=composite, cg_iters=cfg.cg_iters, cg_tol=cfg.cg_tol)
    if cfg.algorithm in ("npg", "trpo"):
        est = natural_gradient(policy, batch, est, cfg.damping, cfg.cg_iters, cfg.cg_tol)
    if cfg.estimator == "uapg":
        seed = int(rng.integers(2 ** 31))
        if cfg.algorithm == "vanilla":
            est = uapg_vanilla(est, cfg.uapg_delta, seed, cfg.svd_oversample, cfg.svd_power_iters)
        else:
            est = uapg_natural(policy, batch, kernel, est, cfg.uapg_delta, cfg.uapg_epsilon, cfg.damping, seed,
                               cfg.svd_oversample, cfg.svd_power_iters)
    return est


def train(config: TrainConfig) -> RunRecord:
    """Algorithm loop: collect, advantages, kernel/critic update, estimate, (UAPG), step."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    env = make_env(cfg.env, cfg.env_params)
    policy = GaussianMLPPolicy(env.state_dim, env.action_dim, cfg.policy_hidden, seed=int(rng.integers(2 ** 31)))
    kernel = cfg.kernel_model(env.state_dim, int(rng.integers(2 ** 31)))
    critic = LinearCritic(kernel.state_kernel.features, kernel.state_kernel.n_features)
    policy_opt = Adam(cfg.lr)
    kernel_opt = Adam(cfg.kernel_lr)
    gae = GAEConfig(cfg.gamma, cfg.tau)
    record = RunRecord(cfg)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        for it in range(cfg.iterations):
            batch = collect_batch(env, policy, cfg.batch_size, rng, cfg.gamma)
            returns = batch.episode_returns()
            if it == 0:
                record.initial_return = float(returns.mean())
            adv = gae_advantages(batch, critic, gae)
            batch.q_values = _normalized(adv) if cfg.normalize_advantages else adv
            targets = discounted_returns(batch, cfg.gamma, critic)
            critic, feat_grad = critic_update(critic, kernel.state_kernel, batch, targets, cfg.critic_lr, cfg.critic_steps)
            diag = {}
            scores = ScoreOperator.for_batch(policy, batch)
            est = _estimate(cfg, policy, batch, kernel, scores, rng, kernel_opt, feat_grad, diag)
            if cfg.algorithm == "vanilla":
                step = vanilla_step(policy, est, policy_opt)
            elif cfg.algorithm == "npg":
                step = npg_step(policy, batch, est, cfg.damping, cfg.step_size, scores)
            else:
                step = trpo_step(policy, batch, est, cfg.damping, cfg.step_size, scores)
            kl = policy.kl(batch.states, step.policy)
            d = est.diagnostics
            record.rows.append({
                "iteration": it, "mean_return": float(returns.mean()), "n_episodes": len(returns),
                "n_samples": batch.n, "kl": kl, "grad_norm": float(np.linalg.norm(est.mean)),
                "pre_transform_norm": d.get("pre_transform_norm"),
                "cg_iterations": d.get("mean_cg_iterations"), "cg_residual": d.get("mean_cg_residual"),
                "fisher_rank": d.get("fisher_rank"), "nu_max": d.get("uapg_nu_max"), "nu_min": d.get("uapg_nu_min"),
                "mll": diag.get("mll"), "value_loss": 0.5 * float(np.mean((critic(batch.states) - targets) ** 2)),
                "accepted": step.accepted, "diverged": batch.diverged,
            })
            policy = step.policy
            logger.info("iter %d return %.4f", it, returns.mean())
            if cfg.out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_policy(os.path.join(cfg.out_dir, f"policy_{it + 1:05d}.ckpt"), policy)
                save_kernel(os.path.join(cfg.out_dir, f"kernel_{it + 1:05d}.ckpt"), kernel)
    except (BQPGError, ArithmeticError, ValueError) as exc:
        logger.error("training stopped at iteration %d: %s", len(record.rows), exc)
        record.complete = False
        record.error = str(exc)
    record.policy, record.kernel = policy, kernel
    if cfg.out_dir:
        write_run(record, cfg.out_dir)
    return record


def write_run(record: RunRecord, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "train.csv"), "w", newline="") as fh:
        fh.write(record.csv_text())
    meta = {"schema": CSV_SCHEMA, "config": _jsonable(asdict(record.config)), "complete": record.complete,
            "error": record.error}
    with open(os.path.join(out_dir, "train.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if record.policy is not None:
        save_policy(os.path.join(out_dir, "policy_final.ckpt"), record.policy)
    if record.kernel is not None:
        save_kernel(os.path.join(out_dir, "kernel_final.ckpt"), record.kernel)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
