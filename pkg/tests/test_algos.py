import json
import os

import numpy as np
import pytest

from bqpg import algos
from bqpg.algos import RunRecord, TrainConfig, npg_step, surrogate, train, trpo_step, vanilla_step
from bqpg.envs import GAEConfig, collect_batch, gae_advantages, make_env
from bqpg.errors import ConfigError, EstimatorError
from bqpg.estimators import GradientEstimate, mc_gradient, natural_gradient
from bqpg.optim import Adam
from bqpg.policy import GaussianMLPPolicy, ScoreOperator, fisher_mvm, fisher_operator

from conftest import dense_scores, rel


class IdentityScores:
    """Stand-in score operator with ``G = (1/n) U U^T = I``."""

    n, n_params = 4, 4

    def apply(self, w):
        return 2.0 * w

    def apply_t(self, v):
        return 2.0 * v


def lqr_batch(seed=0, n=2000, hidden=(8,)):
    env = make_env("lqr")
    rng = np.random.default_rng(seed)
    policy = GaussianMLPPolicy(env.state_dim, env.action_dim, hidden, seed=seed)
    batch = collect_batch(env, policy, n, rng)
    adv = gae_advantages(batch, None, GAEConfig())
    batch.q_values = (adv - adv.mean()) / adv.std()
    return policy, batch


def test_vanilla_zero_gradient_keeps_theta():
    p = GaussianMLPPolicy(2, 1, (3,), seed=0)
    out = vanilla_step(p, GradientEstimate(np.zeros(p.n_params), "mc"), Adam())
    assert out.accepted and np.array_equal(out.policy.get_theta(), p.get_theta())


def test_vanilla_constant_gradient_matches_moment_recursion(rng):
    p = GaussianMLPPolicy(2, 1, (3,), seed=0)
    g = rng.standard_normal(p.n_params)
    opt = Adam(1e-2)
    theta = p.get_theta()
    for t in range(1, 21):
        p = vanilla_step(p, GradientEstimate(g, "mc"), opt).policy
        # with bias correction the moments of a constant gradient are exactly g and g^2
        m_hat = g * (1 - 0.9 ** t) / (1 - 0.9 ** t)
        v_hat = g * g * (1 - 0.999 ** t) / (1 - 0.999 ** t)
        theta = theta + 1e-2 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.allclose(p.get_theta(), theta, rtol=1e-12, atol=1e-15)
    step = opt.direction(g)
    assert np.allclose(step, 1e-2 * np.sign(g), rtol=1e-6)


def test_vanilla_is_deterministic(rng):
    p = GaussianMLPPolicy(2, 1, (3,), seed=0)
    g = rng.standard_normal(p.n_params)
    a = vanilla_step(p, GradientEstimate(g, "mc"), Adam()).policy.get_theta()
    b = vanilla_step(p, GradientEstimate(g, "mc"), Adam()).policy.get_theta()
    assert np.array_equal(a, b)


def test_vanilla_rejects_non_finite():
    p = GaussianMLPPolicy(2, 1, (3,), seed=0)
    est = GradientEstimate(np.zeros(p.n_params), "mc")
    est.mean = np.full(p.n_params, np.nan)
    out = vanilla_step(p, est, Adam())
    assert not out.accepted and out.policy is p


def test_npg_zero_direction_and_unit_step():
    p = GaussianMLPPolicy(2, 1, ())
    assert p.n_params == 4
    zero = GradientEstimate(np.zeros(4), "bq_natural", context={"scores": IdentityScores()})
    out = npg_step(p, None, zero, damping=0.0, radius=0.01)
    assert np.array_equal(out.policy.get_theta(), p.get_theta())
    d = np.array([0.6, 0.0, -0.8, 0.0])
    est = GradientEstimate(d, "bq_natural", context={"scores": IdentityScores()})
    out = npg_step(p, None, est, damping=0.0, radius=0.01)
    assert np.linalg.norm(out.policy.get_theta() - p.get_theta()) == pytest.approx(np.sqrt(0.02), rel=1e-12)


def test_npg_quadratic_form_matches_dense(rng):
    policy, batch = lqr_batch(n=300, hidden=(3,))
    G = fisher_operator(policy, batch)
    U = dense_scores(policy, batch)
    d = rng.standard_normal(policy.n_params)
    quad = d @ (fisher_mvm(G, d) + 0.1 * d)
    dense = d @ (U @ U.T / batch.n + 0.1 * np.eye(len(d))) @ d
    assert quad == pytest.approx(dense, rel=1e-6)


def test_npg_step_hits_kl_budget():
    # linear policy: the empirical Fisher is well conditioned, so damping does not eat the budget
    policy, batch = lqr_batch(seed=1, hidden=())
    est = natural_gradient(policy, batch, mc_gradient(policy, batch), damping=1e-8, cg_iters=500, cg_tol=1e-12)
    out = npg_step(policy, batch, est, damping=1e-8, radius=1e-3)
    kl = policy.kl(batch.states, out.policy)
    assert 0.7e-3 <= kl <= 1.3e-3


def test_trpo_accepts_early_and_never_lowers_surrogate():
    for seed in range(3):
        policy, batch = lqr_batch(seed=seed)
        est = mc_gradient(policy, batch)
        out = trpo_step(policy, batch, est, radius=1e-3)
        assert out.accepted and out.info["backtracks"] <= 1
        assert surrogate(out.policy, batch) >= surrogate(policy, batch)
        assert out.info["kl"] <= 1e-3


def test_trpo_zero_and_adversarial_directions():
    policy, batch = lqr_batch(seed=2)
    zero = GradientEstimate(np.zeros(policy.n_params), "mc_natural")
    assert np.array_equal(trpo_step(policy, batch, zero).policy.get_theta(), policy.get_theta())
    good = natural_gradient(policy, batch, mc_gradient(policy, batch))
    bad = GradientEstimate(-good.mean, "mc_natural", context=good.context)
    out = trpo_step(policy, batch, bad, radius=0.01)
    assert not out.accepted and out.info["backtracks"] == 10
    assert np.array_equal(out.policy.get_theta(), policy.get_theta())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(algorithm="ppo")
    with pytest.raises(ConfigError):
        TrainConfig(estimator="gp")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(step_size=0.0)


def small_config(**kw):
    base = dict(env="lqr", iterations=3, batch_size=256, policy_hidden=(8,), feature_hidden=(8, 4),
                fisher_rank=16, svd_power_iters=1, mll_points=128, critic_steps=5, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_iterations_returns_initial_policy():
    rec = train(small_config(iterations=0))
    assert rec.rows == [] and rec.complete
    ref = GaussianMLPPolicy(2, 1, (8,), seed=int(np.random.default_rng(3).integers(2 ** 31)))
    assert np.array_equal(rec.policy.get_theta(), ref.get_theta())


@pytest.mark.parametrize("algorithm,estimator", [
    ("vanilla", "mc"), ("vanilla", "dbqpg"), ("vanilla", "uapg"),
    ("npg", "mc"), ("npg", "dbqpg"), ("trpo", "dbqpg"), ("trpo", "uapg"),
])
def test_train_runs_every_combination(algorithm, estimator):
    rec = train(small_config(algorithm=algorithm, estimator=estimator, uapg_delta=8))
    assert rec.complete, rec.error
    assert len(rec.rows) == 3
    assert all(np.isfinite(r["mean_return"]) for r in rec.rows)
    if estimator != "mc":
        assert rec.rows[0]["mll"] is not None and rec.rows[0]["cg_iterations"] is not None
    if estimator == "uapg":
        assert rec.rows[0]["nu_max"] >= rec.rows[0]["nu_min"] > 0


def test_train_is_byte_deterministic():
    a = train(small_config(estimator="dbqpg")).csv_text()
    b = train(small_config(estimator="dbqpg")).csv_text()
    assert a == b
    assert a.splitlines()[0] == "# schema train-v1 complete=1"
    assert a.splitlines()[1].split(",") == list(algos.CSV_COLUMNS)


def test_train_failure_marks_record_incomplete(monkeypatch):
    calls = {"n": 0}
    real = algos.mc_gradient

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise EstimatorError("boom")
        return real(*args, **kw)

    monkeypatch.setattr(algos, "mc_gradient", flaky)
    rec = train(small_config())
    assert not rec.complete and len(rec.rows) == 1 and "boom" in rec.error
    assert rec.csv_text().startswith("# schema train-v1 complete=0")


def test_train_writes_outputs_and_checkpoints(tmp_path):
    out = tmp_path / "run"
    rec = train(small_config(out_dir=str(out), checkpoint_every=2))
    files = set(os.listdir(out))
    assert {"train.csv", "train.json", "policy_final.ckpt", "kernel_final.ckpt", "policy_00002.ckpt"} <= files
    meta = json.loads((out / "train.json").read_text())
    assert meta["complete"] and meta["config"]["batch_size"] == 256
    assert (out / "train.csv").read_text() == rec.csv_text()


def test_run_record_summaries():
    rec = RunRecord(TrainConfig(), rows=[{"mean_return": float(i)} for i in range(20)])
    assert rec.final_return(10) == pytest.approx(14.5)
    assert np.isnan(RunRecord(TrainConfig()).final_return())
