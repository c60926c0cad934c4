"""Adaptive-moment first-order updates on flat parameter vectors."""

import numpy as np


class Adam:
    def __init__(self, lr=7e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def direction(self, grad):
        """Advance the moment estimates and return the bias-corrected step."""
        g = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def ascend(self, params, grad):
        return params + self.direction(grad)

    def descend(self, params, grad):
        return params - self.direction(grad)

    def state(self):
        return {"t": self.t, "m": None if self.m is None else self.m.copy(), "v": None if self.v is None else self.v.copy()}
