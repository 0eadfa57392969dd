"""Neural building blocks: linear maps, embeddings, LSTM, attention, TFM.

All blocks accept inputs with arbitrary leading batch axes; the last axis is
the feature axis and, for sequence blocks, the second-to-last is the row axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import DimensionError, Tensor


@dataclass(frozen=True)
class ModelDims:
    """Sizes shared by every block of the network."""

    T: int = 4
    N: int = 8
    L: int = 12
    d: int = 32
    d_a: int = 16
    d_o: int = 24
    C: int = 13
    heads: int = 4
    vocab: int = 40

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if int(value) != value or value < 1:
                raise ValueError(f"ModelDims.{name} must be a positive integer, got {value!r}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + key + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _dtype(dtype):
    return np.dtype(dtype) if dtype is not None else tc.get_default_dtype()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=None):
        dtype = _dtype(dtype)
        bound = math.sqrt(6.0 / (n_in + n_out))
        self.W = _uniform(rng, (n_in, n_out), bound, dtype)
        self.b = _zeros((n_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)


def linear(x: Tensor, W: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W + bias`` over the last axis."""
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    y = tc.matmul(x, W)
    return y + bias if bias is not None else y


class Embedding(Module):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator, dtype=None):
        self.table = Tensor(rng.normal(0.0, 0.5, size=(vocab, d)).astype(_dtype(dtype)), requires_grad=True)

    def __call__(self, tokens) -> Tensor:
        return embed(tokens, self.table)


def embed(tokens, table: Tensor) -> Tensor:
    return tc.take_rows(table, np.asarray(tokens, dtype=np.int64))


class LayerNorm(Module):
    def __init__(self, d: int, dtype=None):
        dtype = _dtype(dtype)
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = _zeros((d,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm_lastdim(x) * self.gamma + self.beta


class LSTM(Module):
    """Single-layer LSTM; gate blocks are ordered input, forget, cell, output."""

    def __init__(self, n_in: int, d: int, rng: np.random.Generator, dtype=None):
        dtype = _dtype(dtype)
        bound = 1.0 / math.sqrt(d)
        self.d = d
        self.W_ih = _uniform(rng, (n_in, 4 * d), bound, dtype)
        self.W_hh = _uniform(rng, (d, 4 * d), bound, dtype)
        self.b = _zeros((4 * d,), dtype)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_encode(x, self.W_ih, self.W_hh, self.b)


def lstm_encode(x: Tensor, W_ih: Tensor, W_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Run the recurrence over rows of ``x`` (..., L, d_in).

    Returns the per-step hidden states (..., L, d) and the final hidden
    state (..., 1, d).
    """
    d = W_hh.shape[0]
    steps = x.shape[-2]
    if steps < 1:
        raise DimensionError("lstm_encode needs at least one step")
    lead = x.shape[:-2]
    xw = linear(x, W_ih, b)
    h = tc.zeros(lead + (1, d), dtype=x.dtype)
    c = tc.zeros(lead + (1, d), dtype=x.dtype)
    hidden = []
    for t in range(steps):
        z = xw[..., t : t + 1, :] + tc.matmul(h, W_hh)
        i = z[..., 0:d].sigmoid()
        f = z[..., d : 2 * d].sigmoid()
        g = z[..., 2 * d : 3 * d].tanh()
        o = z[..., 3 * d : 4 * d].sigmoid()
        c = f * c + i * g
        h = o * c.tanh()
        hidden.append(h)
    return tc.concat(hidden, axis=-2), h


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=None):
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, return_attention: bool = False):
        return mha(query, key, value, self, return_attention=return_attention)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, rows, d = x.shape
    x = x.reshape(tuple(lead) + (rows, heads, d // heads))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = x.transpose(axes)
    *lead, rows, heads, dh = x.shape
    return x.reshape(tuple(lead) + (rows, heads * dh))


def mha(query: Tensor, key: Tensor, value: Tensor, block: MultiHeadAttention, return_attention: bool = False):
    """Scaled dot-product attention per head, concatenated and re-projected.

    With ``return_attention`` the per-head weights (..., heads, r_q, r_k)
    are returned alongside the output as a plain array.
    """
    if key.shape[-2] != value.shape[-2]:
        raise DimensionError(f"mha: key rows {key.shape[-2]} != value rows {value.shape[-2]}")
    d = block.q.W.shape[0]
    for name, x in (("query", query), ("key", key), ("value", value)):
        if x.shape[-1] != d:
            raise DimensionError(f"mha: {name} width {x.shape[-1]} != {d}")
    h = block.heads
    q = _split_heads(block.q(query), h)
    k = _split_heads(block.k(key), h)
    v = _split_heads(block.v(value), h)
    scores = tc.matmul(q, k.mT) * (1.0 / math.sqrt(d // h))
    weights = tc.softmax_lastdim(scores)
    out = block.o(_merge_heads(tc.matmul(weights, v)))
    if return_attention:
        return out, weights.data
    return out


class FeedForward(Module):
    """linear(d -> 2d), ReLU, linear(2d -> d)."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=None, hidden: int | None = None):
        hidden = hidden or 2 * d
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class TFM(Module):
    """Transformer encoder block: FF(MHA(query, key, value)).

    With ``residual_norm`` each sub-layer output is added to its input and
    layer-normalised; turning it off leaves the bare composition.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=None, residual_norm: bool = True):
        self.residual_norm = residual_norm
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.ff = FeedForward(d, rng, dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.norm2 = LayerNorm(d, dtype)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, return_attention: bool = False):
        out, weights = self.attn(query, key, value, return_attention=True)
        if self.residual_norm:
            out = self.norm1(query + out)
            out = self.norm2(out + self.ff(out))
        else:
            out = self.ff(out)
        return (out, weights) if return_attention else out


def set_identity(block: TFM) -> TFM:
    """Put a TFM into the test-identity configuration in place.

    All attention projections become the identity, the feed-forward network
    is rewired as relu(x) - relu(-x) == x, and residuals are switched off.
    """
    d = block.attn.q.W.shape[0]
    eye = np.eye(d, dtype=block.attn.q.W.dtype)
    for lin in (block.attn.q, block.attn.k, block.attn.v, block.attn.o):
        lin.W.data[...] = eye
        lin.b.data[...] = 0
    block.ff.fc1.W.data[...] = np.concatenate([eye, -eye], axis=1)
    block.ff.fc1.b.data[...] = 0
    block.ff.fc2.W.data[...] = np.concatenate([eye, -eye], axis=0)
    block.ff.fc2.b.data[...] = 0
    block.residual_norm = False
    return block
