"""Small dense networks with hand-written backprop, plus Adam.

Layers are (W, b) pairs with W of shape (fan_out, fan_in). Hidden layers use
tanh (smooth, so finite-difference gradient checks are clean); the output
layer is linear.
"""
from __future__ import annotations

import numpy as np

Layers = list[tuple[np.ndarray, np.ndarray]]


def init_layers(sizes: tuple[int, ...], rng: np.random.Generator) -> Layers:
    """Scaled uniform fan-in initialization: U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((W, b))
    return layers


def zero_layers(sizes: tuple[int, ...]) -> Layers:
    return [
        (np.zeros((fan_out, fan_in)), np.zeros(fan_out))
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:])
    ]


def layer_sizes(layers: Layers) -> tuple[int, ...]:
    return (layers[0][0].shape[1],) + tuple(W.shape[0] for W, _ in layers)


def forward(layers: Layers, X: np.ndarray) -> np.ndarray:
    """Batched forward pass; X has shape (B, fan_in)."""
    A = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        Z = A @ W.T + b
        A = Z if i == last else np.tanh(Z)
    return A


def forward_single(layers: Layers, x: np.ndarray) -> np.ndarray:
    a = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = W @ a + b
        a = z if i == last else np.tanh(z)
    return a


def forward_cache(layers: Layers, X: np.ndarray):
    """Forward pass that also returns what backward() needs."""
    caches = []
    A = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        Z = A @ W.T + b
        if i == last:
            caches.append((A, None))
            A = Z
        else:
            out = np.tanh(Z)
            caches.append((A, out))
            A = out
    return A, caches


def backward(layers: Layers, caches, dY: np.ndarray):
    """Backprop ``dY`` (gradient w.r.t. the output) through the network.

    Returns (per-layer gradients, gradient w.r.t. the input batch).
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    dA = dY
    for i in reversed(range(len(layers))):
        A_in, A_out = caches[i]
        dZ = dA if A_out is None else dA * (1.0 - A_out * A_out)
        grads[i] = (dZ.T @ A_in, dZ.sum(axis=0))
        dA = dZ @ layers[i][0]
    return grads, dA


def flatten_layers(layers: Layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


def unflatten_layers(vec: np.ndarray, sizes: tuple[int, ...]) -> Layers:
    layers = []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n_w = fan_out * fan_in
        W = vec[pos : pos + n_w].reshape(fan_out, fan_in).copy()
        pos += n_w
        b = vec[pos : pos + fan_out].copy()
        pos += fan_out
        layers.append((W, b))
    if pos != vec.size:
        raise ValueError(f"parameter vector has {vec.size} entries; layout needs {pos}")
    return layers


def param_count(sizes: tuple[int, ...]) -> int:
    return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))


class Adam:
    """Adam over a flat list of parameter arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
