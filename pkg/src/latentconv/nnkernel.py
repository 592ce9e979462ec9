"""Frame-wise dense networks with hand-written reverse-mode gradients and Adam.

Rows of every 2-D array are samples (frames), columns are features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "leaky_relu", "mish", "tanh")
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(name: str, z):
    if name == "identity":
        return z
    if name == "leaky_relu":
        return np.where(z >= 0, z, LEAKY_SLOPE * z)
    if name == "mish":
        return z * np.tanh(softplus(z))
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name: str, z, a):
    """Derivative of the activation at pre-activation z (a is the output)."""
    if name == "identity":
        return np.ones_like(z)
    if name == "leaky_relu":
        return np.where(z >= 0, 1.0, LEAKY_SLOPE).astype(z.dtype)
    if name == "mish":
        tsp = np.tanh(softplus(z))
        return tsp + z * (1.0 - tsp * tsp) * sigmoid(z)
    if name == "tanh":
        return 1.0 - a * a
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("bias must match weight output dim")


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # layer inputs
    pre: list = field(default_factory=list)  # pre-activations
    post: list = field(default_factory=list)  # activations (layer outputs)


class DenseNet:
    """Sequential stack of dense layers."""

    def __init__(self, layers: list[Dense]):
        if not layers:
            raise ShapeError("network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i - 1].weight.shape[1] != layers[i].weight.shape[0]:
                raise ShapeError(f"layer {i} input dim does not chain")
        self.layers = layers

    @classmethod
    def build(cls, dims, activations, rng: np.random.Generator, dtype=np.float64):
        """He-style init; ``activations`` has one entry per layer."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            std = np.sqrt(2.0 / fan_in) if act != "identity" else np.sqrt(1.0 / fan_in)
            w = (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)
            layers.append(Dense(w, np.zeros(fan_out, dtype=dtype), act))
        return cls(layers)

    @classmethod
    def mlp(cls, in_dim, out_dim, hidden=128, depth=3, act="leaky_relu", rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [in_dim] + [hidden] * depth + [out_dim]
        return cls.build(dims, [act] * depth + ["identity"], rng, dtype)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def describe(self) -> list[dict]:
        return [
            {"in": l.weight.shape[0], "out": l.weight.shape[1], "activation": l.activation}
            for l in self.layers
        ]

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected (*, {self.input_dim}) input, got {x.shape}")

    def forward(self, x):
        self._check(x)
        h = x
        for layer in self.layers:
            h = activate(layer.activation, h @ layer.weight + layer.bias)
        return h

    def forward_cache(self, x):
        self._check(x)
        cache = ForwardCache()
        h = x
        for layer in self.layers:
            cache.inputs.append(h)
            z = h @ layer.weight + layer.bias
            h = activate(layer.activation, z)
            cache.pre.append(z)
            cache.post.append(h)
        return h, cache

    def backward(self, cache: ForwardCache, grad_out, tap_grads=None):
        """Return (param_grads, input_grad).

        ``tap_grads`` optionally maps layer index -> extra upstream gradient on that
        layer's activation, used when intermediate features enter a loss.
        """
        if grad_out.shape != cache.post[-1].shape:
            raise ShapeError(f"upstream grad {grad_out.shape} != output {cache.post[-1].shape}")
        tap_grads = tap_grads or {}
        grads = [None] * (2 * len(self.layers))
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i in tap_grads:
                g = g + tap_grads[i]
            gz = g * activate_grad(layer.activation, cache.pre[i], cache.post[i])
            grads[2 * i] = cache.inputs[i].T @ gz
            grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ layer.weight.T
        return grads, g


def backward(net: DenseNet, x, upstream_grad):
    """Gradients of sum(upstream_grad * net(x)) w.r.t. parameters and input."""
    _, cache = net.forward_cache(x)
    return net.backward(cache, upstream_grad)


def eval_conditioned(net: DenseNet, x_frames, s, p_frames, t_embed):
    """Concatenate per-frame features with speaker, content and time inputs.

    ``x_frames`` (N, d), ``s`` (Ds,), ``p_frames`` (N, Dp), ``t_embed`` (Dt,).
    """
    x_frames = np.atleast_2d(x_frames)
    n = x_frames.shape[0]
    p_frames = np.asarray(p_frames).reshape(n, -1)
    inp = np.concatenate(
        [x_frames, np.broadcast_to(s, (n, len(s))), p_frames, np.broadcast_to(t_embed, (n, len(t_embed)))],
        axis=1,
    )
    if inp.shape[1] != net.input_dim:
        raise ShapeError(f"conditioned input dim {inp.shape[1]} != net input {net.input_dim}")
    return net.forward(inp)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grads(grads, max_norm: float | None):
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return [g * scale for g in grads]
    return grads


class Adam:
    """Adam over a fixed list of arrays updated in place."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=10.0, names=None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.names = names or [f"param[{i}]" for i in range(len(self.params))]
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ShapeError("grad list does not match parameter list")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ShapeError(f"{self.names[i]}: grad {g.shape} != param {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {self.names[i]} (index {i})")
        grads = clip_grads(grads, self.clip_norm)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.step_count}


def adam_step(params, grads, state: Adam):
    state.step(grads)
    return params, state
