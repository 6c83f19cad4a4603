"""Dense MLPs with hand-written reverse-mode gradients, plus Adam.

Everything is a plain numpy array so the same code runs in float32 for
training and float64 for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid", "exponential")


def _activate(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "identity":
        return z
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if tag == "exponential":
        return np.exp(z)
    raise ValueError(f"unknown activation {tag!r}")


def _activation_grad(tag: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d activation / d preactivation, using the cached output a where cheaper."""
    if tag == "identity":
        return np.ones_like(z)
    if tag == "relu":
        return (z > 0).astype(z.dtype)
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "sigmoid":
        return a * (1.0 - a)
    if tag == "exponential":
        return a
    raise ValueError(f"unknown activation {tag!r}")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("inconsistent layer shapes")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class MlpNetwork:
    layers: list[DenseLayer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out


def forward(net: MlpNetwork, x: np.ndarray):
    """Run the network on a (batch, in_dim) matrix; returns (output, cache)."""
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"expected input (batch, {net.in_dim}), got {x.shape}")
    cache = []
    a = x
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        out = _activate(layer.activation, z)
        cache.append((a, z, out))
        a = out
    return a, cache


def backward(net: MlpNetwork, cache, grad_out: np.ndarray):
    """Exact gradients for a forward() cache.

    Returns (param_grads, grad_input) where param_grads is a flat list
    alternating dW, db in layer order, matching net.parameters().
    """
    if grad_out.shape != cache[-1][2].shape:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match output {cache[-1][2].shape}"
        )
    param_grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    grad = grad_out
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x, z, a = cache[i]
        dz = grad * _activation_grad(layer.activation, z, a)
        param_grads[2 * i] = dz.T @ x
        param_grads[2 * i + 1] = dz.sum(axis=0)
        grad = dz @ layer.weights
    return param_grads, grad


def build_mlp(dims, hidden_activation: str, out_activation: str,
              rng: np.random.Generator, dtype=np.float32) -> MlpNetwork:
    """He-uniform init for relu layers, Xavier-uniform otherwise; zero bias."""
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        act = hidden_activation if i < len(dims) - 2 else out_activation
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        layers.append(DenseLayer(weights=w, bias=b, activation=act))
    return MlpNetwork(layers)


class Adam:
    """Bias-corrected adaptive-moment optimizer over a named parameter dict.

    Parameters are updated in place so every structure holding a view of them
    sees the update; per-parameter learning rates come from `lr_for`.
    """

    def __init__(self, params: dict[str, np.ndarray], lr_for,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr_for = lr_for if callable(lr_for) else (lambda name, _lr=lr_for: _lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= self.lr_for(name) * update.astype(p.dtype)
