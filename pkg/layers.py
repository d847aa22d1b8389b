"""
Neural building blocks on top of diffcore: projections, normalization, embeddings,
multi-head (cross-)attention and pre-norm transformer blocks.
"""

import math
from typing import Optional

import numpy as np

from diffcore import (
    Module,
    Parameter,
    Tensor,
    gelu,
    layer_norm,
    softmax,
    take,
    xavier_uniform,
)


class Linear(Module):
    """y = x W + b with W stored as (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            weight = np.zeros((in_dim, out_dim))
        else:
            weight = xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Linear expects last dimension {self.in_dim}, got {x.shape[-1]}")
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x) * self.weight + self.bias


class Embedding(Module):
    """Token embedding table; also used transposed as the tied output projection."""

    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.num_embeddings = num_embeddings
        self.dim = dim
        self.weight = Parameter(xavier_uniform(rng, (num_embeddings, dim), num_embeddings, dim))

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_embeddings):
            raise ValueError(f"token id out of range [0, {self.num_embeddings})")
        return take(self.weight, ids)


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention over (rows, dim) inputs.

    Self-attention passes the same tensor as query and context; cross-attention passes
    different ones. ``zero_out`` zero-initializes the output projection so a residual
    branch starts as the identity.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 bias: bool = True, zero_out: bool = False):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.query = Linear(dim, dim, rng, bias=bias)
        self.key = Linear(dim, dim, rng, bias=bias)
        self.value = Linear(dim, dim, rng, bias=bias)
        self.out = Linear(dim, dim, rng, bias=bias, zero_init=zero_out)

    def _split(self, x: Tensor) -> Tensor:
        rows = x.shape[0]
        return x.reshape(rows, self.heads, self.dim // self.heads).transpose(1, 0, 2)

    def forward(self, query: Tensor, context: Tensor, value: Optional[Tensor] = None,
                mask: Optional[np.ndarray] = None) -> Tensor:
        value = context if value is None else value
        q = self._split(self.query(query))
        k = self._split(self.key(context))
        v = self._split(self.value(value))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.dim // self.heads))
        if mask is not None:
            mask = np.broadcast_to(mask, scores.shape)
        weights = softmax(scores, axis=-1, mask=mask)
        mixed = (weights @ v).transpose(1, 0, 2).reshape(query.shape[0], self.dim)
        return self.out(mixed)


def causal_mask(rows: int) -> np.ndarray:
    return np.tril(np.ones((rows, rows), dtype=bool))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(dim, hidden, rng)
        self.down = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, causal: bool = False):
        self.causal = causal
        self.norm1 = LayerNorm(dim)
        self.attention = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.feed_forward = FeedForward(dim, 4 * dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        mask = causal_mask(x.shape[0]) if self.causal else None
        x = x + self.attention(h, h, mask=mask)
        return x + self.feed_forward(self.norm2(x))
