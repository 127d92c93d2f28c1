"""Layers built on :mod:`conquer.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Yield (dotted name, parameter); a parameter shared by several owners appears once."""
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val._walk(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return T.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = T.parameter(rng.uniform(-1, 1, size=(d_in, d_out)) / math.sqrt(d_in))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    """Same-padded convolution over (B, L, C) sequences."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator,
                 bias: bool = False):
        std = 1.0 / math.sqrt(c_in * kernel_size)
        self.weight = _normal(rng, (kernel_size, c_in, c_out), std)
        self.bias = T.parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError(f"hidden size {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """x: (B, L, D); mask: (B, L) with True for valid positions."""
        B, L, D = x.shape
        h = self.n_heads
        d = D // h
        qkv = T.reshape(self.qkv(x), (B, L, 3, h, d))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # 3, B, h, L, d
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
        if mask is not None:
            scores = T.masked_fill(scores, np.broadcast_to(~mask[:, None, None, :], scores.shape))
        attn = T.softmax(scores, axis=-1)
        ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.out(T.reshape(ctx, (B, L, D)))


class TransformerBlock(Module):
    """Post-norm encoder block: self-attention then a position-wise feed-forward."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, ff_mult: int = 4):
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln1 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_mult * dim, rng)
        self.ff2 = Linear(ff_mult * dim, dim, rng)
        self.ln2 = LayerNorm(dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = self.ln1(x + self.attn(x, mask))
        return self.ln2(x + self.ff2(T.gelu(self.ff1(x))))


class Transformer(Module):
    """A stack of encoder blocks; ``n_layers=0`` or ``enabled=False`` is the identity."""

    def __init__(self, dim: int, n_layers: int, n_heads: int, rng: np.random.Generator,
                 ff_mult: int = 4):
        self.layers = [TransformerBlock(dim, n_heads, rng, ff_mult) for _ in range(n_layers)]
        self.enabled = True

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if not self.enabled:
            return x
        for layer in self.layers:
            x = layer(x, mask)
        return x
