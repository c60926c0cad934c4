import numpy as np
import pytest

from bqpg.kernels import DeepRBFKernel, KernelModel
from bqpg.policy import GaussianMLPPolicy, SampleBatch, ScoreOperator


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def random_spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, 1.0 / cond, n)) @ Q.T


def tiny_instance(seed, n=30, state_dim=3, action_dim=2, hidden=(2,), c1=1.0, c2=5e-5, sigma2=1e-4, q=None):
    """Small policy/batch/kernel triple with |Theta| well under n."""
    rng = np.random.default_rng(seed)
    policy = GaussianMLPPolicy(state_dim, action_dim, hidden, seed=seed)
    # perturb so the output layer and log-std are not at their init values
    policy.set_theta(policy.get_theta() + 0.3 * rng.standard_normal(policy.n_params))
    S = rng.standard_normal((n, state_dim))
    A = policy.sample(S, rng)
    Q = rng.standard_normal(n) if q is None else q
    batch = SampleBatch.from_arrays(S, A, Q, policy)
    kernel = KernelModel(DeepRBFKernel(state_dim, seed=seed), c1=c1, c2=c2, sigma2=sigma2)
    return policy, batch, kernel


def dense_scores(policy, batch):
    """``U`` assembled one column at a time from ``score_vector``."""
    return np.column_stack([policy.score_vector(s, a) for s, a in zip(batch.states, batch.actions)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report(criterion, ok, detail=""):
    line = f"ACCEPTANCE {criterion:>2} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
