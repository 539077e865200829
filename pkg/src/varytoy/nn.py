"""Layers built on the autograd tensor: linear, layer norm, attention blocks."""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container. Parameters and submodules are discovered from
    instance attributes (including lists of modules) in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _init(rng: np.random.Generator, shape, std: float) -> Tensor:
    return T.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std=None):
        self.weight = _init(rng, (d_in, d_out), std if std is not None else 1.0 / math.sqrt(d_in))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int, stride: int):
        fan_in = c_in * k * k
        self.kernel = _init(rng, (c_out, c_in, k, k), 1.0 / math.sqrt(fan_in))
        self.bias = T.parameter(np.zeros(c_out))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.stride, self.bias)


_MASKS: dict[tuple[int, type], np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    key = (n, T.default_dtype())
    if key not in _MASKS:
        m = np.triu(np.full((n, n), -np.inf), k=1).astype(key[1])
        _MASKS[key] = m
    return _MASKS[key]


class SelfAttention(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, causal: bool):
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        self.qkv = Linear(rng, d, 3 * d)
        self.proj = Linear(rng, d, d, std=0.5 / math.sqrt(d))
        self.n_heads = n_heads
        self.causal = causal

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)  # 3,b,h,n,dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        probs = T.softmax(scores, causal_mask(n) if self.causal else None)
        out = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int):
        self.fc = Linear(rng, d, hidden)
        self.out = Linear(rng, hidden, d, std=0.5 / math.sqrt(hidden))

    def forward(self, x: Tensor) -> Tensor:
        return self.out(T.gelu(self.fc(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, causal: bool, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(rng, d, n_heads, causal)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, mlp_ratio * d)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))
