"""Small fully-connected tanh networks with hand-written derivatives.

Parameters live in one flat vector, laid out layer by layer as the
row-major weight matrix ``W (out, in)`` followed by the bias ``b (out,)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def orthogonal(rng, rows, cols, gain=1.0):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


@dataclass(frozen=True)
class MLP:
    sizes: tuple
    out_activation: str = "linear"  # or "tanh"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 1 or min(self.sizes) <= 0:
            raise ValueError(f"invalid layer sizes {self.sizes}")

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def n_params(self):
        return sum((i + 1) * o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def _activate(self, layer):
        return layer < self.n_layers - 1 or self.out_activation == "tanh"

    def unpack(self, theta):
        out, k = [], 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            W = theta[k:k + o * i].reshape(o, i)
            k += o * i
            out.append((W, theta[k:k + o]))
            k += o
        return out

    def init_params(self, rng, hidden_gain=1.0, out_gain=1.0):
        parts = []
        for layer, (i, o) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if layer == self.n_layers - 1 else hidden_gain
            parts += [orthogonal(rng, o, i, gain).ravel(), np.zeros(o)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def forward(self, theta, X):
        """Returns ``(out, cache)``; cache holds each layer's input and output."""
        h = np.atleast_2d(np.asarray(X, dtype=float))
        cache = [h]
        for layer, (W, b) in enumerate(self.unpack(theta)):
            h = h @ W.T + b
            if self._activate(layer):
                h = np.tanh(h)
            cache.append(h)
        return h, cache

    def backward(self, theta, cache, G, need_input_grad=False):
        """Reverse sweep of ``sum_i <G_i, out_i>``: gradient w.r.t. theta (and inputs)."""
        layers = self.unpack(theta)
        grads = [None] * len(layers)
        g = np.asarray(G, dtype=float)
        for layer in range(len(layers) - 1, -1, -1):
            W, _ = layers[layer]
            if self._activate(layer):
                g = g * (1.0 - cache[layer + 1] ** 2)
            grads[layer] = (g.T @ cache[layer]).ravel(), g.sum(axis=0)
            if layer > 0 or need_input_grad:
                g = g @ W
        flat = np.concatenate([np.concatenate(p) for p in grads]) if grads else np.zeros(0)
        return (flat, g) if need_input_grad else flat

    def jvp(self, theta, cache, v):
        """Forward-mode tangent of the outputs along parameter direction ``v``."""
        layers = self.unpack(theta)
        dirs = self.unpack(np.asarray(v, dtype=float))
        t = None
        for layer, ((W, _), (dW, db)) in enumerate(zip(layers, dirs)):
            z = cache[layer] @ dW.T + db
            if t is not None:
                z = z + t @ W.T
            t = z * (1.0 - cache[layer + 1] ** 2) if self._activate(layer) else z
        return t if t is not None else np.zeros_like(cache[0])

    def per_sample_grads(self, theta, cache, G):
        """Rows are the per-sample gradients of ``<G_i, out_i>`` (shape ``(n, n_params)``)."""
        layers = self.unpack(theta)
        n = cache[0].shape[0]
        blocks = [None] * len(layers)
        g = np.asarray(G, dtype=float)
        for layer in range(len(layers) - 1, -1, -1):
            W, _ = layers[layer]
            if self._activate(layer):
                g = g * (1.0 - cache[layer + 1] ** 2)
            dW = (g[:, :, None] * cache[layer][:, None, :]).reshape(n, -1)
            blocks[layer] = (dW, g)
            if layer > 0:
                g = g @ W
        return np.concatenate([m for pair in blocks for m in pair], axis=1)
