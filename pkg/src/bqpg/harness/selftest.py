"""End-to-end dense-oracle checks printed as one PASS/FAIL line each."""

from __future__ import annotations

import traceback

import numpy as np

from ..checkpoint import policy_bytes, policy_from_bytes
from ..envs import GAEConfig, collect_batch, discounted_returns, gae_advantages, make_env
from ..estimators import (
    dbqpg_gradient,
    mc_gradient,
    natural_precision_operator,
    uapg_natural_transform,
    uapg_vanilla_transform,
)
from ..kernels import DeepRBFKernel, KernelModel, fisher_kernel_operator, ski_build
from ..linalg_ops import (
    TruncatedSpectrum,
    ToeplitzSpec,
    cg_solve,
    dense_materialize,
    matrix_operator,
    randomized_svd,
    toeplitz_mvm,
)
from ..policy import GaussianMLPPolicy, SampleBatch, ScoreOperator


def _rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def _spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, 1.0 / cond, n)) @ Q.T


def _tiny_instance(rng, n=30, c1=1.0):
    policy = GaussianMLPPolicy(3, 2, (2,), seed=int(rng.integers(1 << 30)))
    S = rng.standard_normal((n, 3))
    A = policy.sample(S, rng)
    batch = SampleBatch.from_arrays(S, A, rng.standard_normal(n), policy)
    kernel = KernelModel(DeepRBFKernel(3, seed=1), c1=c1)
    return policy, batch, kernel


def check_cg(rng):
    M = _spd(rng, 60)
    b = rng.standard_normal(60)
    x = cg_solve(matrix_operator(M), b, max_iters=500, tol=1e-12)
    return _rel(x, np.linalg.solve(M, b)) <= 1e-6


def check_toeplitz(rng):
    col = rng.standard_normal(200)
    v = rng.standard_normal(200)
    spec = ToeplitzSpec(col)
    return float(np.abs(toeplitz_mvm(spec, v) - spec.dense() @ v).max()) <= 1e-10


def check_randomized_svd(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((80, 80)))
    vals = 2.0 ** -np.arange(80.0)
    op = matrix_operator((Q * vals) @ Q.T)
    spec = randomized_svd(op, 10, seed=rng)
    return _rel(spec.values, vals[:10]) <= 1e-3


def check_score_fd(rng):
    policy = GaussianMLPPolicy(3, 2, (5, 4), seed=3)
    s, a = rng.standard_normal(3), rng.standard_normal(2)
    u = policy.score_vector(s, a)
    theta = policy.get_theta()
    h = 1e-5
    worst = 0.0
    for i in rng.choice(theta.size, 20, replace=False):
        e = np.zeros_like(theta)
        e[i] = h
        fd = (policy.with_theta(theta + e).log_prob(s, a) - policy.with_theta(theta - e).log_prob(s, a)) / (2 * h)
        worst = max(worst, abs(fd - u[i]) / max(abs(fd), 1e-6))
    return worst <= 1e-4


def check_adjoint(rng):
    policy, batch, _ = _tiny_instance(rng)
    U = ScoreOperator.for_batch(policy, batch)
    w, v = rng.standard_normal(batch.n), rng.standard_normal(policy.n_params)
    return abs(U.vjp(w) @ v - w @ U.jvp(v)) <= 1e-8 * abs(w @ U.jvp(v)) + 1e-12


def check_fisher_routes(rng):
    policy, batch, _ = _tiny_instance(rng, n=20)
    v = rng.standard_normal(batch.n)
    a = fisher_kernel_operator(policy, batch, "truncated_svd", damping=0.1, seed=0).matvec(v)
    b = fisher_kernel_operator(policy, batch, "jacobian_products", damping=0.1, cg_iters=500, cg_tol=1e-12).matvec(v)
    return _rel(a, b) <= 1e-3


def check_ski(rng):
    kernel = DeepRBFKernel(2, seed=0)
    S = rng.standard_normal((100, 2))
    exact = kernel.gram(S)
    return _rel(ski_build(kernel, S, 128).dense(), exact) <= 0.02


def check_dbqpg_dense(rng):
    policy, batch, kernel = _tiny_instance(rng)
    est = dbqpg_gradient(policy, batch, kernel, seed=0, cg_iters=2000, cg_tol=1e-13)
    U = ScoreOperator.for_batch(policy, batch).dense()
    n = batch.n
    Kf = U.T @ np.linalg.pinv(U @ U.T / n) @ U
    Ks = dense_materialize(ski_build(kernel, batch.states).op)
    K = kernel.c1 * Ks + kernel.c2 * Kf + kernel.sigma2 * np.eye(n)
    return _rel(est.mean, kernel.c2 * U @ np.linalg.solve(K, batch.q_values)) <= 1e-5


def check_degenerate(rng):
    policy, batch, kernel = _tiny_instance(rng, c1=0.0)
    est = dbqpg_gradient(policy, batch, kernel, seed=0, cg_iters=500, cg_tol=1e-13)
    mc = mc_gradient(policy, batch).mean
    cos = est.mean @ mc / (np.linalg.norm(est.mean) * np.linalg.norm(mc))
    return abs(cos - 1) <= 1e-10


def check_uapg(rng):
    C = _spd(rng, 12, cond=50)
    vals, vecs = np.linalg.eigh(C)
    spec = TruncatedSpectrum(vecs[:, ::-1], vals[::-1])
    T = np.column_stack([uapg_vanilla_transform(e, spec) for e in np.eye(12)])
    whitened = T @ C @ T.T
    ok_vanilla = np.linalg.norm(whitened - np.eye(12), 2) <= 1e-4
    spec2 = TruncatedSpectrum(np.eye(3)[:, :2], np.array([100.0, 1.0]))
    out = uapg_natural_transform(np.array([1.0, 1.0, 1.0]), spec2, 3.0)
    return ok_vanilla and abs(out[0] / out[2] - 3.0) <= 1e-12


def check_natural_precision(rng):
    policy, batch, kernel = _tiny_instance(rng, c1=0.0)
    op = natural_precision_operator(policy, batch, kernel, damping=0.1)
    M = dense_materialize(op)
    return np.allclose(M, M.T, atol=1e-8 * np.abs(M).max()) and np.linalg.eigvalsh(M).min() > 0


def check_gae(rng):
    env = make_env("lqr", {"horizon": 7})
    batch = collect_batch(env, GaussianMLPPolicy(2, 1, (4,), seed=0), 21, rng)
    adv = gae_advantages(batch, None, GAEConfig(0.9, 1.0), write=False)
    return float(np.abs(adv - discounted_returns(batch, 0.9)).max()) <= 1e-12


def check_checkpoint(rng):
    policy = GaussianMLPPolicy(3, 2, (5, 4), seed=int(rng.integers(1000)))
    back = policy_from_bytes(policy_bytes(policy))
    return np.array_equal(back.get_theta(), policy.get_theta()) and back.hidden_sizes == policy.hidden_sizes


CHECKS = [
    ("cg_matches_dense_solve", check_cg),
    ("toeplitz_fft_matches_dense", check_toeplitz),
    ("randomized_svd_matches_eigensolver", check_randomized_svd),
    ("score_matches_finite_differences", check_score_fd),
    ("score_products_adjoint", check_adjoint),
    ("fisher_kernel_routes_agree", check_fisher_routes),
    ("ski_gram_within_2_percent", check_ski),
    ("dbqpg_matches_dense_closed_form", check_dbqpg_dense),
    ("degenerate_bq_parallel_to_mc", check_degenerate),
    ("uapg_whitening_and_clip", check_uapg),
    ("natural_precision_symmetric_pd", check_natural_precision),
    ("gae_td1_equals_returns", check_gae),
    ("checkpoint_round_trip", check_checkpoint),
]


def run_selftest(seed=0, out=print):
    """Run every check; returns the number of failures."""
    failures = 0
    for i, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        try:
            ok = bool(fn(rng))
            detail = ""
        except Exception as exc:  # a crashing check is reported, not raised
            ok, detail = False, f": {type(exc).__name__}: {exc}"
            traceback.print_exc()
        failures += not ok
        out(f"{'PASS' if ok else 'FAIL'} {name}{detail}")
    out(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return failures
