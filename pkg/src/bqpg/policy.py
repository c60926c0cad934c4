"""Diagonal-Gaussian MLP policy, score-matrix products and the Fisher operator.

Notation: ``U`` is the ``|Theta| x n`` matrix whose columns are the score
vectors ``u(z_i) = grad_theta log pi(a_i | s_i)`` of a batch.  Nothing here
forms the whole of ``U``; block products stream it in row chunks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DimensionError, InputError
from .linalg_ops import CG_DAMPING, CG_MAX_ITERS, CG_TOL, LinearOperator, cg_solve
from .nn import MLP

LOG_2PI = np.log(2.0 * np.pi)
CHUNK = 1024
DENSE_SCORE_CAP = 40_000_000  # entries of U kept in memory for repeated block products


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InputError("non-finite state or action")


class GaussianMLPPolicy:
    """``a ~ N(mu_theta(s), diag(exp(log_std))^2)`` with a tanh MLP mean.

    The flat parameter vector is the mean network's parameters followed by the
    state-independent ``log_std`` vector.
    """

    def __init__(self, state_dim, action_dim, hidden_sizes=(64, 64), theta=None, seed=0):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.net = MLP((self.state_dim, *self.hidden_sizes, self.action_dim), "linear")
        if theta is None:
            rng = np.random.default_rng(seed)
            theta = np.concatenate([self.net.init_params(rng, hidden_gain=1.0, out_gain=0.01), np.zeros(self.action_dim)])
        self.set_theta(theta)

    @property
    def n_params(self):
        return self.net.n_params + self.action_dim

    def get_theta(self):
        return self._theta.copy()

    def set_theta(self, theta):
        theta = np.array(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        self._theta = theta

    def with_theta(self, theta):
        return GaussianMLPPolicy(self.state_dim, self.action_dim, self.hidden_sizes, theta)

    def copy(self):
        return self.with_theta(self._theta)

    @property
    def net_params(self):
        return self._theta[: self.net.n_params]

    @property
    def log_std(self):
        return self._theta[self.net.n_params:]

    def mean(self, states):
        return self.net.forward(self.net_params, states)[0]

    def log_probs(self, states, actions):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.asarray(actions, dtype=float).reshape(len(states), self.action_dim)
        _finite(states, actions)
        z = (actions - self.mean(states)) * np.exp(-self.log_std)
        return -0.5 * np.sum(z ** 2, axis=1) - np.sum(self.log_std) - 0.5 * self.action_dim * LOG_2PI

    def log_prob(self, s, a):
        return float(self.log_probs(np.reshape(s, (1, -1)), np.reshape(a, (1, -1)))[0])

    def sample(self, states, rng):
        mu = self.mean(states)
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)

    def score_vector(self, s, a):
        ops = ScoreOperator(self, np.reshape(s, (1, -1)), np.reshape(a, (1, -1)))
        return ops.block(0, 1)[0]

    def kl(self, states, other):
        """Mean over ``states`` of KL(pi_self(.|s) || pi_other(.|s))."""
        mu0, mu1 = self.mean(states), other.mean(states)
        ls0, ls1 = self.log_std, other.log_std
        var0, var1 = np.exp(2 * ls0), np.exp(2 * ls1)
        per = ls1 - ls0 + (var0 + (mu0 - mu1) ** 2) / (2 * var1) - 0.5
        return float(np.mean(np.sum(per, axis=1)))


@dataclass
class SampleBatch:
    """On-policy samples; rows of every per-step array are aligned."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    logprobs_behavior: np.ndarray
    discount_weights: np.ndarray
    episode_starts: np.ndarray
    q_values: Optional[np.ndarray] = None
    diverged: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.states)
        if n == 0:
            raise DimensionError("a batch needs at least one sample")
        for name in ("actions", "rewards", "next_states", "terminals", "logprobs_behavior", "discount_weights"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    @property
    def n(self):
        return len(self.states)

    @property
    def episode_slices(self):
        bounds = list(self.episode_starts) + [self.n]
        return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def episode_returns(self):
        return np.array([self.rewards[s].sum() for s in self.episode_slices])

    def require_q(self):
        if self.q_values is None:
            raise InputError("q_values must be populated before estimation")
        return np.asarray(self.q_values, dtype=float)

    def take(self, idx):
        """Row subset; episode structure collapses to a single segment."""
        idx = np.asarray(idx)
        q = None if self.q_values is None else self.q_values[idx]
        return replace(
            self, states=self.states[idx], actions=self.actions[idx], rewards=self.rewards[idx],
            next_states=self.next_states[idx], terminals=self.terminals[idx],
            logprobs_behavior=self.logprobs_behavior[idx], discount_weights=self.discount_weights[idx],
            episode_starts=np.array([0]), q_values=q, info=dict(self.info),
        )

    @classmethod
    def from_arrays(cls, states, actions, q_values=None, policy=None):
        """Batch with only (s, a[, Q]); the remaining fields are placeholders."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        n = len(states)
        if n == 0:
            raise DimensionError("a batch needs at least one sample")
        actions = np.asarray(actions, dtype=float).reshape(n, -1)
        lp = policy.log_probs(states, actions) if policy is not None else np.zeros(n)
        q = None if q_values is None else np.asarray(q_values, dtype=float)
        return cls(states, actions, np.zeros(n), states.copy(), np.zeros(n, bool), lp, np.ones(n), np.array([0]), q)


class ScoreOperator:
    """Products with the score matrix ``U`` of ``policy`` on fixed samples.

    The mean-network forward pass and the output-space score coefficients
    are computed once and reused by every product.
    """

    def __init__(self, policy: GaussianMLPPolicy, states, actions, chunk=CHUNK):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.asarray(actions, dtype=float).reshape(len(states), policy.action_dim)
        _finite(states, actions)
        self.policy = policy
        self.n = len(states)
        self.n_params = policy.n_params
        self.chunk = int(chunk)
        self._states = states
        mu, self._cache = policy.net.forward(policy.net_params, states)
        inv_var = np.exp(-2 * policy.log_std)
        diff = actions - mu
        self.g_mean = diff * inv_var  # d log pi / d mu
        self.g_logstd = diff ** 2 * inv_var - 1.0  # d log pi / d log_std
        self._rows = None

    @classmethod
    def for_batch(cls, policy, batch: SampleBatch, chunk=CHUNK):
        return cls(policy, batch.states, batch.actions, chunk)

    def vjp(self, w):
        """``U @ w`` in one reverse sweep."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n,):
            raise DimensionError(f"weight vector must have length {self.n}, got {w.shape}")
        net = self.policy.net
        g_net = net.backward(self.policy.net_params, self._cache, w[:, None] * self.g_mean)
        return np.concatenate([g_net, w @ self.g_logstd])

    def jvp(self, v):
        """``U.T @ v`` in one forward-mode sweep."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params,):
            raise DimensionError(f"direction must have length {self.n_params}, got {v.shape}")
        net = self.policy.net
        d_mu = net.jvp(self.policy.net_params, self._cache, v[: net.n_params])
        return np.sum(self.g_mean * d_mu, axis=1) + self.g_logstd @ v[net.n_params:]

    def block(self, start, stop):
        """Rows ``start:stop`` of ``U.T`` (per-sample score vectors)."""
        cache = [c[start:stop] for c in self._cache]
        net_rows = self.policy.net.per_sample_grads(self.policy.net_params, cache, self.g_mean[start:stop])
        return np.concatenate([net_rows, self.g_logstd[start:stop]], axis=1)

    def _chunks(self):
        for start in range(0, self.n, self.chunk):
            yield start, min(start + self.chunk, self.n)

    def _dense_rows(self):
        """All score rows when they fit under the cache cap, else None."""
        if self._rows is None and self.n * self.n_params <= DENSE_SCORE_CAP:
            self._rows = self.block(0, self.n)
        return self._rows

    def matmat(self, V):
        """``U.T @ V`` for a ``(|Theta|, k)`` block."""
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[0] != self.n_params:
            raise DimensionError(f"expected ({self.n_params}, k) block, got {V.shape}")
        rows = self._dense_rows()
        if rows is not None:
            return rows @ V
        out = np.empty((self.n, V.shape[1]))
        for a, b in self._chunks():
            out[a:b] = self.block(a, b) @ V
        return out

    def rmatmat(self, W):
        """``U @ W`` for an ``(n, k)`` block."""
        W = np.asarray(W, dtype=float)
        if W.ndim != 2 or W.shape[0] != self.n:
            raise DimensionError(f"expected ({self.n}, k) block, got {W.shape}")
        rows = self._dense_rows()
        if rows is not None:
            return rows.T @ W
        out = np.zeros((self.n_params, W.shape[1]))
        for a, b in self._chunks():
            out += self.block(a, b).T @ W[a:b]
        return out

    def apply_t(self, v):
        """``U.T @ v`` for a vector or block."""
        return self.jvp(v) if np.ndim(v) == 1 else self.matmat(v)

    def apply(self, w):
        """``U @ w`` for a vector or block."""
        return self.vjp(w) if np.ndim(w) == 1 else self.rmatmat(w)

    def dense(self):
        """The full ``U`` (``|Theta| x n``); oracle use only."""
        return self.block(0, self.n).T


def score_vjp(policy, batch, w):
    return ScoreOperator.for_batch(policy, batch).vjp(w)


def score_jvp(policy, batch, v):
    return ScoreOperator.for_batch(policy, batch).jvp(v)


@dataclass(frozen=True)
class FisherOperator(LinearOperator):
    scores: Optional[ScoreOperator] = None


def fisher_operator(policy, batch, scores: Optional[ScoreOperator] = None) -> FisherOperator:
    """Empirical Fisher ``G = (1/n) U U^T`` as a matrix-free operator."""
    U = scores if scores is not None else ScoreOperator.for_batch(policy, batch)
    n = U.n

    def mvm(v):
        return U.apply(U.apply_t(v)) / n

    return FisherOperator(U.n_params, mvm, True, "fisher", True, U)


def fisher_mvm(fisher: LinearOperator, v):
    return fisher.apply(v)


def fisher_solve(fisher: LinearOperator, v, damping=CG_DAMPING, max_iters=CG_MAX_ITERS, tol=CG_TOL, return_info=False):
    """CG solution of ``(G + damping I) x = v``."""
    return cg_solve(fisher, v, shift=0.0, max_iters=max_iters, tol=tol, damping=damping, return_info=return_info)
