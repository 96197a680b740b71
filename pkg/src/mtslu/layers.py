"""Neural building blocks: attention, feedforward, conv subsampler, class attention."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Parameter, ShapeError, Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None


def _param(arr: np.ndarray) -> Parameter:
    return Parameter(arr)


def init_weight(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = math.sqrt(3.0 / fan_in)
    return _param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = init_weight(rng, d_in, (d_in, d_out))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(nx.relu(self.w1(x)))


def causal_mask(tq: int, tk: int) -> np.ndarray:
    """True where query i may NOT see key j (j > i)."""
    return np.triu(np.ones((tq, tk), dtype=bool), k=1)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ShapeError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.w_q = Linear(d_model, d_model, rng)
        self.w_k = Linear(d_model, d_model, rng)
        self.w_v = Linear(d_model, d_model, rng)
        self.w_o = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, q: Tensor, kv: Tensor, key_padding_mask: np.ndarray | None = None,
                 causal: bool = False) -> Tensor:
        """Scaled dot-product attention.

        q: [B, Tq, d] (or [d] for a single shared query); kv: [B, Tk, d].
        key_padding_mask: bool [B, Tk], True marks padding.
        """
        B, tk, d = kv.shape
        if d != self.d_model or q.shape[-1] != self.d_model:
            raise ShapeError(f"attention: expected d_model={self.d_model}, got q {q.shape} kv {kv.shape}")
        h, dh = self.n_heads, d // self.n_heads
        if q.ndim == 1:
            Q = self.w_q(q.reshape(1, d)).reshape(1, h, 1, dh)
            tq = 1
        else:
            tq = q.shape[1]
            Q = self.w_q(q).reshape(q.shape[0], tq, h, dh).transpose(0, 2, 1, 3)
        KT = self.w_k(kv).reshape(B, tk, h, dh).transpose(0, 2, 3, 1)
        V = self.w_v(kv).reshape(B, tk, h, dh).transpose(0, 2, 1, 3)
        scores = (Q @ KT) * (1.0 / math.sqrt(dh))
        mask = None
        if key_padding_mask is not None:
            key_padding_mask = np.asarray(key_padding_mask, dtype=bool)
            if key_padding_mask.shape != (B, tk):
                raise ShapeError(f"key_padding_mask {key_padding_mask.shape} != {(B, tk)}")
            if key_padding_mask.all(axis=1).any():
                raise ShapeError("attention over a fully masked key sequence")
            mask = key_padding_mask[:, None, None, :]
        if causal:
            cm = causal_mask(tq, tk)[None, None]
            mask = cm if mask is None else (mask | cm)
        if mask is not None:
            mask = np.broadcast_to(mask, scores.shape)
            scores = nx.masked_fill(scores, mask, -np.inf)
        attn = nx.softmax(scores, axis=-1)
        self.last_weights = attn.data
        ctx = (attn @ V).transpose(0, 2, 1, 3).reshape(B, tq, d)
        return self.w_o(ctx)


class ConvSubsampler(Module):
    """Two strided 3x3 conv stages (time and frequency halved twice), then a projection."""

    def __init__(self, n_mels: int, channels: tuple[int, int], d_model: int, rng: np.random.Generator):
        c1, c2 = channels
        self.k1 = init_weight(rng, 9, (c1, 1, 3, 3))
        self.b1 = _param(np.zeros(c1))
        self.k2 = init_weight(rng, 9 * c1, (c2, c1, 3, 3))
        self.b2 = _param(np.zeros(c2))
        f2 = nx.conv_out_len(nx.conv_out_len(n_mels))
        self.proj = Linear(c2 * f2, d_model, rng)
        self.n_mels = n_mels

    @staticmethod
    def out_lengths(lengths) -> np.ndarray:
        lengths = np.asarray(lengths, dtype=np.int64)
        return (((lengths - 1) // 2 + 1) - 1) // 2 + 1

    def __call__(self, feats: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
        lengths = np.asarray(lengths, dtype=np.int64)
        B, T, F = feats.shape
        if F != self.n_mels:
            raise ShapeError(f"expected {self.n_mels} feature bins, got {F}")
        if T < 4 or lengths.min() < 4:
            raise ShapeError(f"input too short for subsampling (need T >= 4, got {lengths.min()})")
        l1 = (lengths - 1) // 2 + 1
        l2 = (l1 - 1) // 2 + 1
        x = feats.reshape(B, 1, T, F)
        x = nx.relu(nx.conv2d(x, self.k1, self.b1, stride=2, padding=1))
        x = _zero_beyond(x, l1)
        x = nx.relu(nx.conv2d(x, self.k2, self.b2, stride=2, padding=1))
        x = _zero_beyond(x, l2)
        _, C, T2, F2 = x.shape
        x = x.transpose(0, 2, 1, 3).reshape(B, T2, C * F2)
        return self.proj(x), l2


def _zero_beyond(x: Tensor, lengths: np.ndarray) -> Tensor:
    t = x.shape[2]
    pad = np.arange(t)[None, :] >= lengths[:, None]
    if not pad.any():
        return x
    return nx.masked_fill(x, pad[:, None, :, None], 0.0)


def padding_mask(lengths, max_len: int) -> np.ndarray:
    return np.arange(max_len)[None, :] >= np.asarray(lengths)[:, None]


class TransformerEncoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, pad_mask)
        return x + self.ff(self.norm2(x))


class TransformerDecoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm3 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, y: Tensor, tgt_pad: np.ndarray | None, memory: Tensor, mem_pad: np.ndarray | None) -> Tensor:
        h = self.norm1(y)
        y = y + self.self_attn(h, h, tgt_pad, causal=True)
        y = y + self.cross_attn(self.norm2(y), memory, mem_pad)
        return y + self.ff(self.norm3(y))


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d_model // 2]
    return pe.astype(nx.DEFAULT_DTYPE)


class ClassAttention(Module):
    """Pools a sequence into one prediction with a learned query token.

    The token only queries: keys and values come from the sequence alone.
    An optional feedforward sublayer refines the pooled vector before the
    label projection.
    """

    def __init__(self, d_model: int, n_heads: int, n_labels: int, rng: np.random.Generator, d_ff: int = 0):
        self.x_cls = _param(rng.uniform(-1.0, 1.0, size=d_model) * math.sqrt(3.0 / d_model))
        self.norm_mem = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm_ff = LayerNorm(d_model) if d_ff else None
        self.ff = FeedForward(d_model, d_ff, rng) if d_ff else None
        self.norm_out = LayerNorm(d_model)
        self.out = Linear(d_model, n_labels, rng)

    def __call__(self, memory: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        B = memory.shape[0]
        if pad_mask is not None and np.asarray(pad_mask).all(axis=1).any():
            raise ShapeError("class attention needs at least one unmasked position per item")
        pooled = self.attn(self.x_cls, self.norm_mem(memory), pad_mask)  # [B, 1, d]
        z = pooled.reshape(B, memory.shape[2]) + self.x_cls
        if self.ff is not None:
            z = z + self.ff(self.norm_ff(z))
        return self.out(self.norm_out(z))
