"""Small continuous-control MDPs, batched trajectory collection, GAE and the linear critic.

Environments are vectorized: ``reset`` draws ``k`` internal states and
``step`` advances ``k`` lanes at once.  Dynamics and reward constants:

lqr
    ``x' = A x + B a + noise_std * e``, reward ``-(x^T Qc x + a^T Rc a)``.
    Defaults: double integrator ``A = [[1, dt], [0, 1]]``,
    ``B = [[dt^2/2], [dt]]`` with ``dt = 0.1``, ``Qc = I``, ``Rc = 0.1 I``,
    ``noise_std = 0.1``, ``x0 ~ N(0, 0.2^2 I)``, horizon 50.
pointmass
    Planar mass, state ``(px, py, vx, vy)``, force ``a`` clipped to
    ``[-1, 1]^2``: ``v' = v + dt a``, ``p' = clip(p + dt v', -2, 2)`` with the
    velocity zeroed on wall contact.  Reward ``-(|p|^2 + 0.01 |a|^2)``,
    ``dt = 0.1``, ``p0 ~ U[-1, 1]^2``, ``v0 = 0``, horizon 50.
pendulum
    Torque-limited pendulum with ``theta = 0`` upright.  Observation
    ``(cos, sin, theta_dot)``; ``g = 10``, ``m = l = 1``, ``dt = 0.05``,
    torque clipped to ``[-2, 2]``, speed to ``[-8, 8]``.  Reward
    ``-(theta^2 + 0.1 theta_dot^2 + 0.001 u^2)``, horizon 100.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import ConfigError, InputError
from .policy import SampleBatch

logger = logging.getLogger(__name__)

GAMMA = 0.995
TAU = 0.97


class Environment:
    name = "env"
    state_dim: int
    action_dim: int
    horizon: int
    reward_bound: float
    state_bound: float  # leaving this box counts as divergence

    def reset(self, rng, k):
        raise NotImplementedError

    def observe(self, x):
        return x

    def step(self, x, a, rng):
        """Returns ``(x_next, reward, done)`` for ``k`` lanes."""
        raise NotImplementedError

    def describe(self):
        return {"name": self.name, "state_dim": self.state_dim, "action_dim": self.action_dim, "horizon": self.horizon}


class LQR(Environment):
    name = "lqr"

    def __init__(self, A=None, B=None, Qc=None, Rc=None, noise_std=0.1, init_std=0.2, horizon=50, dt=0.1,
                 state_bound=100.0, action_bound=20.0):
        self.A = np.array(A, float) if A is not None else np.array([[1.0, dt], [0.0, 1.0]])
        self.B = np.array(B, float) if B is not None else np.array([[0.5 * dt * dt], [dt]])
        self.state_dim, self.action_dim = self.B.shape
        if self.A.shape != (self.state_dim, self.state_dim):
            raise ConfigError("A must be square with as many rows as B")
        self.Qc = np.array(Qc, float) if Qc is not None else np.eye(self.state_dim)
        self.Rc = np.array(Rc, float) if Rc is not None else 0.1 * np.eye(self.action_dim)
        self.noise_std, self.init_std = float(noise_std), float(init_std)
        self.horizon = int(horizon)
        self.state_bound, self.action_bound = float(state_bound), float(action_bound)
        self.reward_bound = (np.linalg.eigvalsh(self.Qc).max() * self.state_dim * self.state_bound ** 2
                             + np.linalg.eigvalsh(self.Rc).max() * self.action_dim * self.action_bound ** 2)

    def reset(self, rng, k):
        return self.init_std * rng.standard_normal((k, self.state_dim))

    def _reward(self, x, a):
        return -(np.einsum("ki,ij,kj->k", x, self.Qc, x) + np.einsum("ki,ij,kj->k", a, self.Rc, a))

    def step(self, x, a, rng):
        a = np.clip(a, -self.action_bound, self.action_bound)
        r = self._reward(x, a)
        x2 = x @ self.A.T + a @ self.B.T
        if self.noise_std > 0:
            x2 = x2 + self.noise_std * rng.standard_normal(x2.shape)
        return x2, r, np.zeros(len(x), bool)

    def linear_policy_return(self, W, b=None, std=None, gamma=1.0, horizon=None):
        """Exact expected return of ``a = W x + b + std * e`` by moment propagation."""
        W = np.atleast_2d(np.asarray(W, float))
        b = np.zeros(self.action_dim) if b is None else np.asarray(b, float)
        var_a = np.zeros(self.action_dim) if std is None else np.asarray(std, float) ** 2
        horizon = self.horizon if horizon is None else horizon
        M = self.A + self.B @ W
        mean = np.zeros(self.state_dim)
        cov = self.init_std ** 2 * np.eye(self.state_dim)
        total, disc = 0.0, 1.0
        for _ in range(horizon):
            am = W @ mean + b
            acov = W @ cov @ W.T + np.diag(var_a)
            cost = np.trace(self.Qc @ cov) + mean @ self.Qc @ mean + np.trace(self.Rc @ acov) + am @ self.Rc @ am
            total -= disc * cost
            disc *= gamma
            mean = M @ mean + self.B @ b
            cov = M @ cov @ M.T + self.B @ np.diag(var_a) @ self.B.T + self.noise_std ** 2 * np.eye(self.state_dim)
        return total

    def policy_return(self, policy, gamma=1.0):
        """Closed-form return of a linear Gaussian policy (no hidden layers)."""
        if policy.hidden_sizes:
            raise InputError("the closed-form return needs a policy without hidden layers")
        (W, b), = policy.net.unpack(policy.net_params)
        return self.linear_policy_return(W, b, np.exp(policy.log_std), gamma)

    def optimal_gain(self, gamma=GAMMA):
        """Infinite-horizon discounted optimal feedback ``a = -K x`` from the Riccati equation."""
        g = np.sqrt(gamma)
        P = scipy.linalg.solve_discrete_are(g * self.A, g * self.B, self.Qc, self.Rc)
        return gamma * np.linalg.solve(self.Rc + gamma * self.B.T @ P @ self.B, self.B.T @ P @ self.A)


class PointMass(Environment):
    name = "pointmass"
    state_dim, action_dim = 4, 2

    def __init__(self, dt=0.1, horizon=50, arena=2.0, action_cost=0.01, noise_std=0.0):
        self.dt, self.horizon, self.arena = float(dt), int(horizon), float(arena)
        self.action_cost, self.noise_std = float(action_cost), float(noise_std)
        self.state_bound = 1e3
        self.reward_bound = 2 * self.arena ** 2 + self.action_cost * 2

    def reset(self, rng, k):
        return np.concatenate([rng.uniform(-1, 1, (k, 2)), np.zeros((k, 2))], axis=1)

    def step(self, x, a, rng):
        a = np.clip(a, -1.0, 1.0)
        p, v = x[:, :2], x[:, 2:]
        r = -(np.sum(p ** 2, axis=1) + self.action_cost * np.sum(a ** 2, axis=1))
        v2 = v + self.dt * a
        if self.noise_std > 0:
            v2 = v2 + self.noise_std * rng.standard_normal(v2.shape)
        p2 = p + self.dt * v2
        hit = np.abs(p2) > self.arena
        p2 = np.clip(p2, -self.arena, self.arena)
        v2 = np.where(hit, 0.0, v2)
        return np.concatenate([p2, v2], axis=1), r, np.zeros(len(x), bool)


class Pendulum(Environment):
    name = "pendulum"
    state_dim, action_dim = 3, 1

    def __init__(self, g=10.0, mass=1.0, length=1.0, dt=0.05, horizon=100, max_torque=2.0, max_speed=8.0,
                 noise_std=0.0):
        self.g, self.mass, self.length, self.dt = g, mass, length, dt
        self.horizon, self.max_torque, self.max_speed = int(horizon), max_torque, max_speed
        self.noise_std = float(noise_std)
        self.state_bound = 1e3
        self.reward_bound = np.pi ** 2 + 0.1 * max_speed ** 2 + 0.001 * max_torque ** 2

    def reset(self, rng, k):
        return np.stack([rng.uniform(-np.pi, np.pi, k), rng.uniform(-1, 1, k)], axis=1)

    def observe(self, x):
        return np.stack([np.cos(x[:, 0]), np.sin(x[:, 0]), x[:, 1]], axis=1)

    def step(self, x, a, rng):
        th, thdot = x[:, 0], x[:, 1]
        u = np.clip(a[:, 0], -self.max_torque, self.max_torque)
        th_n = (th + np.pi) % (2 * np.pi) - np.pi
        r = -(th_n ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
        acc = 3 * self.g / (2 * self.length) * np.sin(th) + 3.0 / (self.mass * self.length ** 2) * u
        thdot2 = thdot + acc * self.dt
        if self.noise_std > 0:
            thdot2 = thdot2 + self.noise_std * rng.standard_normal(thdot2.shape)
        thdot2 = np.clip(thdot2, -self.max_speed, self.max_speed)
        return np.stack([th + thdot2 * self.dt, thdot2], axis=1), r, np.zeros(len(x), bool)


ENVIRONMENTS = {"lqr": LQR, "pointmass": PointMass, "pendulum": Pendulum}


def make_env(name, params: Optional[dict] = None) -> Environment:
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    try:
        return ENVIRONMENTS[name](**(params or {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from exc


# --------------------------------------------------------------------------
# Collection
# --------------------------------------------------------------------------


def collect_batch(env: Environment, policy, n, rng, gamma=GAMMA) -> SampleBatch:
    """Run whole episodes until at least ``n`` samples are gathered.

    Episodes are simulated in waves of parallel lanes and concatenated in
    lane order.  A lane whose state leaves the environment's box or turns
    non-finite is cut before the offending transition and the batch is
    flagged ``diverged``.
    """
    if n <= 0:
        raise InputError("sample count must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    episodes = []
    total, diverged = 0, False
    while total < n:
        k = -(-(n - total) // env.horizon)
        x = env.reset(rng, k)
        lanes = [dict(s=[], a=[], r=[], s2=[], term=[], lp=[]) for _ in range(k)]
        active = np.ones(k, bool)
        for _ in range(env.horizon):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            obs = env.observe(x[idx])
            act = policy.sample(obs, rng)
            lp = policy.log_probs(obs, act)
            x2, r, done = env.step(x[idx], act, rng)
            bad = ~np.all(np.isfinite(x2), axis=1) | np.any(np.abs(x2) > env.state_bound, axis=1)
            obs2 = env.observe(np.where(bad[:, None], x[idx], x2))
            for j, lane in enumerate(idx):
                if bad[j]:
                    active[lane] = False
                    diverged = True
                    continue
                L = lanes[lane]
                L["s"].append(obs[j]); L["a"].append(act[j]); L["r"].append(r[j])
                L["s2"].append(obs2[j]); L["term"].append(done[j]); L["lp"].append(lp[j])
                if done[j]:
                    active[lane] = False
            x[idx[~bad]] = x2[~bad]
        for L in lanes:
            if L["s"]:
                episodes.append(L)
                total += len(L["s"])
        if not any(L["s"] for L in lanes):
            break  # every lane diverged immediately
    if total == 0:
        raise InputError("no samples could be collected; the environment diverged on reset")
    if diverged:
        logger.warning("episode truncated after divergence")

    def cat(key):
        return np.concatenate([np.asarray(L[key]) for L in episodes])

    lengths = np.array([len(L["s"]) for L in episodes])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    weights = np.concatenate([gamma ** np.arange(m) for m in lengths])
    return SampleBatch(
        states=cat("s"), actions=cat("a"), rewards=cat("r").astype(float), next_states=cat("s2"),
        terminals=cat("term").astype(bool), logprobs_behavior=cat("lp"), discount_weights=weights,
        episode_starts=starts, diverged=diverged, info={"episodes": len(episodes)},
    )


def dump_trajectories(batch: SampleBatch, path):
    """Write one row per sample: episode, t, state, action, reward, terminal."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        sd, ad = batch.states.shape[1], batch.actions.shape[1]
        w.writerow(["episode", "t"] + [f"s{i}" for i in range(sd)] + [f"a{i}" for i in range(ad)] + ["reward", "terminal"])
        for e, sl in enumerate(batch.episode_slices):
            for t, i in enumerate(range(sl.start, sl.stop)):
                w.writerow([e, t, *(f"{v:.17g}" for v in batch.states[i]), *(f"{v:.17g}" for v in batch.actions[i]),
                            f"{batch.rewards[i]:.17g}", int(batch.terminals[i])])


# --------------------------------------------------------------------------
# Advantages and the explicit critic
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GAEConfig:
    gamma: float = GAMMA
    tau: float = TAU

    def __post_init__(self):
        if not (0 <= self.gamma < 1 and 0 <= self.tau <= 1):
            raise ConfigError("need 0 <= gamma < 1 and 0 <= tau <= 1")


def _values(critic, states):
    return np.zeros(len(states)) if critic is None else critic(states)


def gae_advantages(batch: SampleBatch, critic=None, config: GAEConfig = GAEConfig(), write=True):
    """GAE(gamma, tau) per episode; ``critic=None`` means ``V = 0``.

    True terminals use ``V = 0``; an episode ending without a terminal is a
    time-limit cut and bootstraps ``V(s_T)``.
    """
    g, lam = config.gamma, config.tau
    v = _values(critic, batch.states)
    v_next = _values(critic, batch.next_states) * (~batch.terminals)
    delta = batch.rewards + g * v_next - v
    adv = np.empty(batch.n)
    for sl in batch.episode_slices:
        acc = 0.0
        for t in range(sl.stop - 1, sl.start - 1, -1):
            acc = delta[t] + g * lam * acc
            adv[t] = acc
    if write:
        batch.q_values = adv
    return adv


def discounted_returns(batch: SampleBatch, gamma=GAMMA, critic=None):
    """Discounted return-to-go per step, bootstrapped at time-limit cuts when a critic is given."""
    out = np.empty(batch.n)
    for sl in batch.episode_slices:
        last = sl.stop - 1
        acc = 0.0
        if critic is not None and not batch.terminals[last]:
            acc = float(critic(batch.next_states[last:last + 1])[0])
        for t in range(last, sl.start - 1, -1):
            acc = batch.rewards[t] + gamma * acc
            out[t] = acc
    return out


class LinearCritic:
    """``V(s) = w . phi(s) + b`` on the features of a shared feature map."""

    def __init__(self, feature_fn, n_features, w=None, b=0.0):
        self.feature_fn = feature_fn
        self.w = np.zeros(n_features) if w is None else np.array(w, float)
        self.b = float(b)

    def __call__(self, states):
        return self.feature_fn(states) @ self.w + self.b

    def params(self):
        return np.concatenate([self.w, [self.b]])

    def with_params(self, p):
        return LinearCritic(self.feature_fn, len(self.w), p[:-1], p[-1])


def value_loss(critic: LinearCritic, states, targets):
    return 0.5 * float(np.mean((critic(states) - targets) ** 2))


def critic_update(critic: LinearCritic, state_kernel, batch: SampleBatch, targets, lr=0.5, steps=1):
    """Gradient steps on the mean squared value error.

    The step size is ``lr / mean(|x|^2)`` with ``x = (phi(s), 1)``, which
    bounds it by the inverse curvature so the loss cannot increase for
    ``lr <= 1``.  Returns ``(critic', feature_grad)`` where ``feature_grad``
    ascends ``-loss`` in the shared feature-net parameters, evaluated at the
    incoming critic.
    """
    targets = np.asarray(targets, float)
    F, cache = state_kernel.features(batch.states, return_cache=True)
    n = len(F)
    resid = F @ critic.w + critic.b - targets
    feature_grad = state_kernel.feature_backward(cache, -np.outer(resid, critic.w) / n)
    X = np.concatenate([F, np.ones((n, 1))], axis=1)
    eta = lr / max(np.mean(np.sum(X * X, axis=1)), 1e-12)
    p = critic.params()
    for _ in range(steps):
        p = p - eta * (X.T @ (X @ p - targets)) / n
    return critic.with_params(p), feature_grad
