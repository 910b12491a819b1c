"""Dense layers with hand-written forward/backward passes, plus SGD and Adam.

Parameters live outside the layers in a ``ParamSet``: a plain ``dict`` mapping
names to numpy arrays, in insertion order. Layer stacks only know the names of
the tensors they read, which keeps broadcast/aggregate a matter of copying dicts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericalError, UsageError

ParamSet = Dict[str, np.ndarray]

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")


def sigmoid(a):
    # split on sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _activate(kind, a):
    if kind == "identity":
        return a
    if kind == "relu":
        return np.maximum(a, 0)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ConfigError(f"unknown activation {kind!r}")


def _activation_grad(kind, a, y, g):
    if kind == "identity":
        return g
    if kind == "relu":
        return g * (a > 0)
    if kind == "tanh":
        return g * (1 - y * y)
    return g * y * (1 - y)


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


@dataclass(frozen=True)
class DenseLayer:
    name: str
    fan_in: int
    fan_out: int
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.fan_in <= 0 or self.fan_out <= 0:
            raise ConfigError(f"layer {self.name}: dims must be positive")

    @property
    def weight_name(self):
        return f"{self.name}.weight"

    @property
    def bias_name(self):
        return f"{self.name}.bias"

    def init(self, rng, dtype=np.float32) -> ParamSet:
        """Glorot-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / (self.fan_in + self.fan_out))
        w = rng.uniform(-limit, limit, size=(self.fan_out, self.fan_in))
        return {
            self.weight_name: w.astype(dtype),
            self.bias_name: np.zeros(self.fan_out, dtype=dtype),
        }


@dataclass
class ForwardCache:
    owner: "LayerStack"
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)


class LayerStack:
    """A feed-forward chain of dense layers operating on row-major batches."""

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ConfigError("a layer stack needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.fan_out != b.fan_in:
                raise ConfigError(f"{a.name} emits {a.fan_out} features but {b.name} expects {b.fan_in}")
        self.layers = list(layers)

    @classmethod
    def mlp(cls, prefix, sizes, hidden="relu", out="identity"):
        """Build ``sizes[0] -> ... -> sizes[-1]`` with ``hidden`` activations between."""
        layers = []
        n = len(sizes) - 1
        for i in range(n):
            act = out if i == n - 1 else hidden
            layers.append(DenseLayer(f"{prefix}.{i}", sizes[i], sizes[i + 1], act))
        return cls(layers)

    @property
    def fan_in(self):
        return self.layers[0].fan_in

    @property
    def fan_out(self):
        return self.layers[-1].fan_out

    def param_names(self):
        names = []
        for layer in self.layers:
            names += [layer.weight_name, layer.bias_name]
        return names

    def init(self, rng, dtype=np.float32) -> ParamSet:
        params = {}
        for layer in self.layers:
            params.update(layer.init(rng, dtype))
        return params

    def forward(self, params: ParamSet, x) -> Tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ConfigError(f"input of shape {x.shape} does not match fan-in {self.fan_in}")
        cache = ForwardCache(self)
        h = x
        for layer in self.layers:
            w = params[layer.weight_name]
            b = params[layer.bias_name]
            a = h @ w.T + b
            y = _activate(layer.activation, a)
            cache.inputs.append(h)
            cache.pre.append(a)
            cache.outputs.append(y)
            h = y
        check_finite(h, f"output of {self.layers[-1].name}")
        return h, cache

    def backward(self, params: ParamSet, cache: Optional[ForwardCache], grad_out) -> Tuple[np.ndarray, ParamSet]:
        if cache is None or cache.owner is not self or len(cache.pre) != len(self.layers):
            raise UsageError("backward called without a matching forward cache")
        grad_out = np.asarray(grad_out)
        if grad_out.shape != cache.outputs[-1].shape:
            raise UsageError(f"output grad shape {grad_out.shape} != output shape {cache.outputs[-1].shape}")
        grads = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            ga = _activation_grad(layer.activation, cache.pre[i], cache.outputs[i], g)
            grads[layer.bias_name] = ga.sum(axis=0)
            grads[layer.weight_name] = ga.T @ cache.inputs[i]
            g = ga @ params[layer.weight_name]
        ordered = {name: grads[name] for name in self.param_names()}
        check_finite(g, "input gradient")
        return g, ordered


def compatible(a: ParamSet, b: ParamSet) -> bool:
    """True iff names, order and shapes match exactly."""
    if list(a) != list(b):
        return False
    return all(a[k].shape == b[k].shape for k in a)


def zeros_like(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_into(acc: ParamSet, grads: ParamSet):
    for k, g in grads.items():
        if k in acc:
            acc[k] = acc[k] + g
        else:
            acc[k] = g
    return acc


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


class SGD:
    kind = "sgd"

    def __init__(self, lr=1e-3):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        if not compatible(params, grads):
            raise ConfigError("parameters and gradients are not aggregation-compatible")
        lr = self.lr
        return {k: (p - lr * grads[k]).astype(p.dtype, copy=False) for k, p in params.items()}


class Adam:
    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: ParamSet = {}
        self.v: ParamSet = {}

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        if not compatible(params, grads):
            raise ConfigError("parameters and gradients are not aggregation-compatible")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[k] + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[k] = (p - update).astype(p.dtype, copy=False)
        return out


def make_optimizer(kind, lr):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")
