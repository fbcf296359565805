"""Minimal parameter containers and layers on top of :mod:`phenoyield.numerics`."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigurationError(ValueError):
    pass


class Module:
    """Collects ``Tensor`` parameters, child modules and module lists by attribute name.

    Tensors created with ``requires_grad=False`` are buffers: they are saved in
    checkpoints but never handed to the optimizer.
    """

    def named_tensors(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_tensors(key + "."))
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    out.update(child.named_tensors(f"{key}.{i}."))
        return out

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.named_tensors(prefix).items() if v.requires_grad)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_tensors().items())

    def load_state_dict(self, state, strict: bool = True) -> None:
        tensors = self.named_tensors()
        if strict:
            missing = set(tensors) - set(state)
            unexpected = set(state) - set(tensors)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name not in tensors:
                continue
            t = tensors[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.copy()


def param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(rng, (n_in, n_out), 1.0 / math.sqrt(n_in))
        self.bias = zeros((n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight) if x.ndim >= 2 else nx.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = ones((d,))
        self.bias = zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two-layer perceptron with a GELU in between."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., L, d) -> (..., h, L, d/h)"""
    *lead, length, d = x.shape
    x = x.reshape(*lead, length, n_heads, d // n_heads)
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return nx.transpose(x, tuple(axes))


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, L, dh) -> (..., L, h*dh)"""
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = nx.transpose(x, tuple(axes))
    *lead, length, h, dh = x.shape
    return x.reshape(*lead, length, h * dh)


class MultiHeadAttention(Module):
    """Scaled dot-product attention; ``out_proj=False`` drops the output projection."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, out_proj: bool = True):
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        # a key bias only shifts each logit row by a constant, which softmax ignores
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng) if out_proj else None
        self.last_weights: np.ndarray | None = None

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        h = self.n_heads
        q = split_heads(self.q(query), h)
        k = split_heads(self.k(context), h)
        v = split_heads(self.v(context), h)
        scale = 1.0 / math.sqrt(q.shape[-1])
        weights = nx.softmax(nx.matmul(q, k.swapaxes(-1, -2)) * scale, axis=-1)
        self.last_weights = weights.data
        out = merge_heads(nx.matmul(weights, v))
        return self.o(out) if self.o is not None else out


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d: int, n_heads: int, hidden: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.ln1(x)
        x = x + self.attn(y, y)
        return x + self.mlp(self.ln2(x))
