"""Acceptance criteria 1-11, one PASS/FAIL line each (see the summary section).

Criteria 8, 9 and 11 are the slow studies (roughly 10, 17 and 1 minutes on
one core).  Run only this file with ``pytest tests/test_acceptance.py -s``.
"""

import time

import numpy as np
import pytest

from bqpg.algos import TrainConfig, train
from bqpg.envs import LinearCritic, collect_batch, critic_update, make_env, value_loss
from bqpg.estimators import (
    dbqpg_gradient,
    mc_gradient,
    natural_gradient,
    uapg_natural,
    uapg_natural_transform,
    uapg_vanilla,
    uapg_vanilla_transform,
)
from bqpg.harness.gradquality import GradQualityConfig, grad_quality_study
from bqpg.kernels import DeepRBFKernel, KernelModel, fisher_kernel_operator, gp_mll_and_grad, ski_build
from bqpg.linalg_ops import (
    TruncatedSpectrum,
    ToeplitzSpec,
    cg_solve,
    dense_materialize,
    matrix_operator,
    randomized_svd,
    toeplitz_mvm,
)
from bqpg.policy import GaussianMLPPolicy, SampleBatch, ScoreOperator

from conftest import dense_scores, random_spd, rel, report, tiny_instance

EXACT = dict(cg_iters=3000, cg_tol=1e-13)


def dense_eq7(policy, batch, kernel):
    """BQ gradient mean and covariance from explicit matrices, independent of the operator code."""
    n = batch.n
    U = dense_scores(policy, batch)
    G = U @ U.T / n
    Kf = U.T @ np.linalg.pinv(G, rcond=1e-12) @ U
    Ks = ski_build(kernel, batch.states).dense() if kernel.c1 > 0 else np.zeros((n, n))
    A = kernel.c1 * Ks + kernel.c2 * Kf + kernel.sigma2 * np.eye(n)
    mean = kernel.c2 * U @ np.linalg.solve(A, batch.q_values)
    cov = kernel.c2 * G - kernel.c2 ** 2 * U @ np.linalg.solve(A, U.T)
    return mean, cov, U, G


# --------------------------------------------------------------------------
# 1. closed-form oracle equivalence
# --------------------------------------------------------------------------


def test_01_closed_form_oracle():
    t0 = time.perf_counter()
    worst_mean = worst_cov = 0.0
    for seed in range(10):
        n = 20 + 3 * seed  # n <= 50
        p, batch, kernel = tiny_instance(100 + seed, n=n, state_dim=3, action_dim=2, hidden=(1,))
        assert p.n_params == 10
        est = dbqpg_gradient(p, batch, kernel, seed=seed, **EXACT)
        mean, cov, _, _ = dense_eq7(p, batch, kernel)
        worst_mean = max(worst_mean, rel(est.mean, mean))
        rng = np.random.default_rng(seed)
        for _ in range(3):
            v = rng.standard_normal(p.n_params)
            worst_cov = max(worst_cov, rel(est.covariance_op.matvec(v), cov @ v))
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-5 and worst_cov <= 1e-5 and elapsed < 10
    report(1, ok, f"mean rel {worst_mean:.2e}, cov rel {worst_cov:.2e} (gate 1e-5), {elapsed:.1f}s (gate 10s)")
    assert ok


# --------------------------------------------------------------------------
# 2. degenerate-case identities
# --------------------------------------------------------------------------


def test_02_degenerate_identities():
    p, batch, kernel = tiny_instance(7, n=45, c1=0.0)
    n, c2, s2 = batch.n, kernel.c2, kernel.sigma2
    est = dbqpg_gradient(p, batch, kernel, seed=0, **EXACT)
    U = dense_scores(p, batch)
    G = U @ U.T / n
    mean_err = rel(est.mean, c2 / (s2 + c2 * n) * U @ batch.q_values)
    rng = np.random.default_rng(0)
    cov_err = max(rel(est.covariance_op.matvec(v), s2 * c2 / (s2 + c2 * n) * G @ v)
                  for v in rng.standard_normal((20, p.n_params)))
    mc = mc_gradient(p, batch).mean
    cos = est.mean @ mc / (np.linalg.norm(est.mean) * np.linalg.norm(mc))
    p0, b0, k0 = tiny_instance(8, n=30, c2=0.0)
    zero = dbqpg_gradient(p0, b0, k0)
    zero_ok = not np.any(zero.mean) and not np.any(zero.covariance_op.matvec(rng.standard_normal(p0.n_params)))
    ok = mean_err <= 1e-6 and cov_err <= 1e-5 and abs(cos - 1) <= 1e-10 and zero_ok
    report(2, ok, f"c1=0 mean {mean_err:.2e} (1e-6), cov {cov_err:.2e} (1e-5), |cos-1| {abs(cos - 1):.1e} (1e-10); "
                  f"c2=0 exact zero {zero_ok}")
    assert ok


# --------------------------------------------------------------------------
# 3. score identities
# --------------------------------------------------------------------------


def test_03_score_identities():
    rng = np.random.default_rng(3)
    p = GaussianMLPPolicy(2, 1, (3,), seed=3)
    p.set_theta(p.get_theta() + 0.3 * rng.standard_normal(p.n_params))
    ref_S = rng.standard_normal((300, 2))
    ref = ScoreOperator(p, ref_S, p.sample(ref_S, rng))
    G = ref.rmatmat(ref.matmat(np.eye(p.n_params))) / ref.n
    w = np.linalg.solve(G + 1e-3 * np.eye(p.n_params), ref.block(0, 1)[0])
    worst_score = worst_kf = 0.0
    for _ in range(5):
        s = rng.standard_normal(2)
        S = np.repeat(s[None], 100_000, axis=0)
        ops = ScoreOperator(p, S, p.sample(S, rng))
        Ublock = ops.block(0, ops.n)
        mean, se = Ublock.mean(axis=0), Ublock.std(axis=0, ddof=1) / np.sqrt(ops.n)
        live = se > 0  # parameters that cannot move the output have identically zero scores
        worst_score = max(worst_score, float(np.max(np.abs(mean[live]) / se[live])))
        kf = ops.jvp(w)  # k_f(z, z') for fixed z' over sampled actions
        worst_kf = max(worst_kf, abs(kf.mean()) / (kf.std(ddof=1) / np.sqrt(len(kf))))
    ok = worst_score <= 3 and worst_kf <= 3
    report(3, ok, f"max |score mean|/SE {worst_score:.2f}, max |k_f mean|/SE {worst_kf:.2f} (gate 3)")
    assert ok


# --------------------------------------------------------------------------
# 4. solver suite
# --------------------------------------------------------------------------


def test_04_solver_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    cg_err = 0.0
    for n in (10, 50, 120, 200):
        M = random_spd(rng, n, 1e3)
        b = rng.standard_normal(n)
        cg_err = max(cg_err, rel(cg_solve(matrix_operator(M), b, max_iters=10 * n, tol=1e-12), np.linalg.solve(M, b)))
    toe_err = 0.0
    for m in (1, 7, 64, 333, 512):
        spec = ToeplitzSpec(rng.standard_normal(m))
        v = rng.standard_normal(m)
        toe_err = max(toe_err, float(np.abs(toeplitz_mvm(spec, v) - spec.dense() @ v).max()))
    svd_err = 0.0
    for dim, delta in ((50, 10), (120, 15), (200, 20)):
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        vals = 1.5 ** -np.arange(float(dim))
        M = (Q * vals) @ Q.T
        got = randomized_svd(matrix_operator(M), delta, seed=rng).values
        svd_err = max(svd_err, rel(got, np.linalg.eigvalsh(M)[::-1][:delta]))
    route_err = 0.0
    for seed in range(3):
        p, batch, _ = tiny_instance(40 + seed, n=20)
        v = rng.standard_normal(batch.n)
        a = fisher_kernel_operator(p, batch, "truncated_svd", damping=0.1, seed=seed).matvec(v)
        b = fisher_kernel_operator(p, batch, "jacobian_products", damping=0.1, cg_iters=1000, cg_tol=1e-12).matvec(v)
        route_err = max(route_err, rel(a, b))
    elapsed = time.perf_counter() - t0
    ok = cg_err <= 1e-6 and toe_err <= 1e-10 and svd_err <= 1e-3 and route_err <= 1e-3 and elapsed < 60
    report(4, ok, f"CG {cg_err:.1e} (1e-6), Toeplitz {toe_err:.1e} (1e-10 abs), rSVD {svd_err:.1e} (1e-3), "
                  f"Fisher routes {route_err:.1e} (1e-3), {elapsed:.1f}s (60s)")
    assert ok


# --------------------------------------------------------------------------
# 5. SKI fidelity
# --------------------------------------------------------------------------


def test_05_ski_fidelity():
    worst = 0.0
    for dims in (1, 2, 3, 4):
        for seed in range(3):
            rng = np.random.default_rng(50 + 10 * dims + seed)
            S = rng.standard_normal((100, dims))
            for k in (DeepRBFKernel(dims), DeepRBFKernel.deep(dims, hidden=(16, dims), seed=seed)):
                worst = max(worst, rel(ski_build(k, S, 128).dense(), k.gram(S)))
    ok = worst <= 0.02
    report(5, ok, f"worst relative Frobenius error {worst:.2e} over feature dims 1-4 (gate 2e-2)")
    assert ok


# --------------------------------------------------------------------------
# 6. differentiation suite
# --------------------------------------------------------------------------


def _fd_worst(f, x, grad, coords, h, floor):
    worst = 0.0
    for i in coords:
        e = np.zeros_like(x)
        e[i] = h
        fd = (f(x + e) - f(x - e)) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), floor))
    return worst


def test_06_differentiation_suite():
    rng = np.random.default_rng(6)
    p = GaussianMLPPolicy(3, 2, (64, 64), seed=6)
    p.set_theta(p.get_theta() + 0.05 * rng.standard_normal(p.n_params))
    s, a = rng.standard_normal(3), rng.standard_normal(2)
    u = p.score_vector(s, a)
    coords = rng.choice(p.n_params, 30, replace=False)
    score_err = _fd_worst(lambda th: p.with_theta(th).log_prob(s, a), p.get_theta(), u, coords, 1e-5,
                          1e-4 * np.abs(u).max())

    _, batch, kernel = tiny_instance(60, n=60, sigma2=1e-2)
    kernel.state_kernel = DeepRBFKernel.deep(3, seed=6)
    sk = kernel.state_kernel
    res = gp_mll_and_grad(kernel, batch)

    def mll(phi):
        old = sk.get_params()
        sk.set_params(phi)
        val = gp_mll_and_grad(kernel, batch).mll
        sk.set_params(old)
        return val

    coords = np.concatenate([rng.choice(sk.n_net_params, 20, replace=False), np.arange(sk.n_net_params, sk.n_params)])
    mll_err = _fd_worst(mll, sk.get_params(), res.grad, coords, 1e-4, 1e-3 * np.abs(res.grad).max())

    critic = LinearCritic(sk.features, sk.n_features, rng.standard_normal(sk.n_features), 0.3)
    targets = rng.standard_normal(batch.n)
    _, fgrad = critic_update(critic, sk, batch, targets)

    def neg_loss(phi):
        old = sk.get_params()
        sk.set_params(phi)
        val = -value_loss(critic, batch.states, targets)
        sk.set_params(old)
        return val

    critic_err = _fd_worst(neg_loss, sk.get_params(), np.concatenate([fgrad, np.zeros(sk.n_features + 1)]),
                           rng.choice(sk.n_net_params, 20, replace=False), 1e-5, 1e-3 * np.abs(fgrad).max())
    ok = score_err <= 1e-4 and mll_err <= 1e-3 and critic_err <= 1e-4
    report(6, ok, f"score {score_err:.1e} (1e-4), MLL {mll_err:.1e} (1e-3), critic features {critic_err:.1e} (1e-4)")
    assert ok


# --------------------------------------------------------------------------
# 7. UAPG whitening
# --------------------------------------------------------------------------


def test_07_uapg_whitening():
    p, batch, kernel = tiny_instance(70, n=60, c1=1.0, c2=1.0, sigma2=1e-2)
    full = p.n_params
    est = dbqpg_gradient(p, batch, kernel, seed=0, **EXACT)
    C = dense_materialize(est.covariance_op)
    C = 0.5 * (C + C.T)
    van = uapg_vanilla(est, delta=full, seed=1, oversample=0, power_iters=4)
    T = np.column_stack([uapg_vanilla_transform(e, van.spectrum) for e in np.eye(full)])
    vanilla_dev = np.linalg.norm(T @ C @ T.T - np.eye(full), 2)

    p2, b2, k2 = tiny_instance(71, n=40, c2=0.5, sigma2=1e-2)
    nat = natural_gradient(p2, b2, dbqpg_gradient(p2, b2, k2, seed=0, **EXACT), damping=0.1, cg_iters=1000,
                           cg_tol=1e-13)
    U = dense_scores(p2, b2)
    Ks = ski_build(k2, b2.states).dense()
    M = (U @ U.T / b2.n + 0.1 * np.eye(p2.n_params)) / k2.c2 + U @ np.linalg.solve(k2.c1 * Ks + k2.sigma2 * np.eye(b2.n), U.T)
    delta = 6
    out = uapg_natural(p2, b2, k2, nat, delta=delta, epsilon=None, damping=0.1, seed=0, power_iters=8, **EXACT)
    vals, vecs = np.linalg.eigh(M)
    dense_spec = TruncatedSpectrum(vecs[:, ::-1][:, :delta], vals[::-1][:delta])
    natural_err = rel(out.mean, uapg_natural_transform(nat.mean, dense_spec, None))

    clip = uapg_natural_transform(np.ones(3), TruncatedSpectrum(np.eye(3)[:, :2], np.array([100.0, 1.0])), 3.0)
    ratio = clip[0] / clip[2]
    ok = vanilla_dev <= 1e-4 and natural_err <= 1e-4 and abs(ratio - 3.0) <= 1e-12
    report(7, ok, f"vanilla whitening deviation {vanilla_dev:.1e} (1e-4), natural top-{delta} {natural_err:.1e} (1e-4), "
                  f"clip ratio {ratio:.15g} (3)")
    assert ok


# --------------------------------------------------------------------------
# 8. gradient-quality study
# --------------------------------------------------------------------------

STUDY = dict(repeats=25, sample_sizes=(512, 2048, 8192), oracle_n=100_000, q="gae", fit_critic=True,
             cg_iters=1000, cg_tol=1e-6, svd_power_iters=1, seed=0)


@pytest.mark.slow
def test_08_gradient_quality_study():
    t0 = time.perf_counter()
    failures, parts = [], []
    for env in ("lqr", "pointmass"):
        res = grad_quality_study(GradQualityConfig(env=env, **STUDY))
        for n in STUDY["sample_sizes"]:
            mc, bq = res.row("mc", n), res.row("dbqpg", n)
            parts.append(f"{env}@{n}: acc {bq['accuracy_mean']:.3f} vs {mc['accuracy_mean']:.3f}, "
                         f"nv {bq['normvar']:.3f} vs {mc['normvar']:.3f}")
            if bq["accuracy_mean"] < mc["accuracy_mean"] or bq["normvar"] > mc["normvar"]:
                failures.append(f"{env}@{n}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 15 * 60
    report(8, ok, f"DBQPG vs MC; {'; '.join(parts)}; {elapsed / 60:.1f} min (15 min)"
                  + (f"; failing {failures}" if failures else ""))
    assert ok


# --------------------------------------------------------------------------
# 9. end-to-end training smoke
# --------------------------------------------------------------------------

SMOKE = dict(env="lqr", iterations=200, batch_size=2048, fisher_rank=64, svd_power_iters=1)


@pytest.mark.slow
def test_09_training_smoke():
    t0 = time.perf_counter()
    mc_final, bq_final, improvements = [], [], []
    for seed in range(5):
        mc = train(TrainConfig(estimator="mc", seed=seed, **SMOKE))
        bq = train(TrainConfig(estimator="dbqpg", seed=seed, **SMOKE))
        assert mc.complete and bq.complete, (mc.error, bq.error)
        mc_final.append(mc.final_return())
        bq_final.append(bq.final_return())
        improvements.append((mc.final_return() - mc.initial_return) / abs(mc.initial_return))
    mc_final, bq_final = np.array(mc_final), np.array(bq_final)
    pooled_sd = np.sqrt(0.5 * (mc_final.var(ddof=1) + bq_final.var(ddof=1)))
    pooled_se = pooled_sd * np.sqrt(2.0 / 5)
    elapsed = time.perf_counter() - t0
    ok_a = min(improvements) >= 0.2
    ok_b = bq_final.mean() >= mc_final.mean() - pooled_se
    ok = ok_a and ok_b and elapsed < 30 * 60
    report(9, ok, f"(a) MC improvement min {min(improvements):.1%} (20%); (b) DBQPG {bq_final.mean():.3f} vs "
                  f"MC {mc_final.mean():.3f} - SE {pooled_se:.3f}; {elapsed / 60:.1f} min (30 min)")
    assert ok


# --------------------------------------------------------------------------
# 10. determinism
# --------------------------------------------------------------------------


def test_10_determinism():
    def run():
        cfg = TrainConfig(env="pointmass", estimator="uapg", algorithm="trpo", iterations=3, batch_size=256,
                          policy_hidden=(8,), feature_hidden=(8, 4), fisher_rank=16, uapg_delta=8, critic_steps=5,
                          mll_points=128, seed=10)
        study = GradQualityConfig(env="lqr", sample_sizes=(64,), repeats=3, oracle_n=640, policy_hidden=(8,),
                                  fisher_rank=16, estimators=("mc", "dbqpg", "uapg"), uapg_delta=8, seed=10)
        return train(cfg).csv_text(), grad_quality_study(study).csv_text()

    first, second = run(), run()
    ok = first == second
    report(10, ok, f"train and gradquality CSVs byte-identical across repeated runs: {ok}")
    assert ok


# --------------------------------------------------------------------------
# 11. scaling sanity
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_11_scaling():
    env = make_env("lqr")
    policy = GaussianMLPPolicy(env.state_dim, env.action_dim, seed=11)
    kernel = KernelModel.default(env.state_dim, seed=11)
    times = {}
    for n in (4096, 16384):
        batch = collect_batch(env, policy, n, np.random.default_rng(n))
        batch.q_values = np.random.default_rng(0).standard_normal(batch.n)
        best = np.inf
        for rep in range(2):
            t0 = time.perf_counter()
            dbqpg_gradient(policy, batch, kernel, seed=rep)
            best = min(best, time.perf_counter() - t0)
        times[n] = best
    ratio = times[16384] / times[4096]
    ok = ratio <= 6
    report(11, ok, f"DBQPG time n=4096 {times[4096]:.2f}s, n=16384 {times[16384]:.2f}s, ratio {ratio:.2f} (6)")
    assert ok
