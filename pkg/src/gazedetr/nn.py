"""Parameter containers and the small layers everything else is built from."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, dropout, layer_norm, linear, relu


def xavier_uniform(rng, shape, fan_in=None, fan_out=None):
    if fan_in is None:
        fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def he_uniform(rng, shape, fan_in):
    """Variance-preserving uniform init for ReLU layers: bound ``sqrt(6 / fan_in)``."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class DropoutState:
    """Shared dropout switch: one per model so train/eval flips every layer."""

    p: float = 0.1
    training: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __call__(self, x):
        return dropout(x, self.p, self.rng, self.training)


class Module:
    """Attribute-walking parameter registry.

    Parameters are discovered in attribute insertion order, which keeps
    names and checkpoint layouts stable. A parameter reachable under two
    names (shared spatial queries) is reported once, under the first.
    """

    def named_parameters(self, prefix=""):
        seen = set()
        out = []
        self._collect(prefix, seen, out)
        return out

    def _collect(self, prefix, seen, out):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    out.append((name, val))
            elif isinstance(val, Module):
                val._collect(name + ".", seen, out)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item._collect(f"{name}.{i}.", seen, out)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = parameter(xavier_uniform(rng, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """ReLU feed-forward stack, e.g. the three-layer box and gaze regressors."""

    def __init__(self, rng, d_in, d_hidden, d_out, n_layers):
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x
