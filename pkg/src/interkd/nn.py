"""Parameter containers and the layers shared by encoder, decoder and teacher."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``.

    Child modules may be attributes or live in list attributes. Names follow
    attribute paths (``blocks.0.ff1.w1``) and are stable across runs, which
    the checkpoint format relies on.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        if unknown or missing:
            raise KeyError(f"state mismatch: unknown={unknown} missing={missing}")
        for name, p in own.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=T.DTYPE)
            p.grad = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def draw_mask(rng: np.random.Generator | None, shape, p: float) -> np.ndarray | None:
    """Keep-mask for inverted dropout; ``None`` when dropout is off (eval)."""
    if rng is None or p <= 0.0:
        return None
    # float32 uniforms are plenty for a keep/drop decision and half the cost
    return rng.random(shape, dtype=np.float32) >= p


def drop(x: Tensor, rng: np.random.Generator | None, p: float) -> Tensor:
    return T.dropout(x, draw_mask(rng, x.shape, p), p)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = param(glorot(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, num: int, dim: int):
        self.weight = param(rng.normal(0.0, dim ** -0.5, size=(num, dim)))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return table


class FeedForward(Module):
    """Pre-norm position-wise FFN with swish activation."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, dropout: float = 0.0):
        self.norm = LayerNorm(dim)
        self.w1 = Linear(rng, dim, hidden)
        self.w2 = Linear(rng, hidden, dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = T.swish(self.w1(self.norm(x)))
        h = drop(h, rng, self.dropout)
        return drop(self.w2(h), rng, self.dropout)


class MultiHeadAttention(Module):
    """Multi-head attention without its own residual or norm.

    ``mask`` broadcasts to (B, H, Tq, Tk) and is True where attention is allowed.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, dropout: float = 0.0):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.kv = Linear(rng, dim, 2 * dim)
        self.out = Linear(rng, dim, dim)
        self.dropout = dropout

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray | None, rng=None) -> Tensor:
        b, tq, d = x.shape
        q = self._split(self.q(x))
        kv = self.kv(memory)
        k = self._split(kv[..., :d])
        v = self._split(kv[..., d:])
        h = T.attention(q, k, v, mask)
        h = h.transpose(0, 2, 1, 3).reshape(b, tq, d)
        return drop(self.out(h), rng, self.dropout)


def key_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """(B, 1, 1, T) attention mask from sequence lengths."""
    valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    return valid[:, None, None, :]


def frame_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """(B, T, 1) float mask with ones on real frames."""
    valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    return valid[:, :, None].astype(T.DTYPE)


class TransformerLayer(Module):
    """Pre-norm self-attention layer followed by a pre-norm FFN."""

    def __init__(self, rng, dim: int, heads: int, ff_dim: int, dropout: float = 0.0):
        self.att_norm = LayerNorm(dim)
        self.att = MultiHeadAttention(rng, dim, heads, dropout)
        self.ff = FeedForward(rng, dim, ff_dim, dropout)

    def __call__(self, x: Tensor, mask=None, rng=None) -> Tensor:
        a = self.att_norm(x)
        x = x + self.att(a, a, mask, rng)
        return x + self.ff(x, rng)
