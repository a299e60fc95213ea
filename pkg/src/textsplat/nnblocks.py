"""Reusable network blocks: cross-attention, feed-forward, spatial
transformer, residual conv, upsample, and 2D sinusoidal encodings.

All blocks are pre-norm with residual connections, so zeroing the final
projection of each sub-block collapses the block to an exact identity.
Both attention stages of the spatial transformer attend to the text
context; there is no pixel self-attention.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Tensor


def as_context(context) -> Tensor:
    """Accept a TextEmbedding-like object (has .matrix) or a raw Tensor."""
    if isinstance(context, Tensor):
        return context
    m = getattr(context, "matrix", None)
    if m is None:
        raise TypeError(f"context must be a Tensor or TextEmbedding, got {type(context)!r}")
    return Tensor(m)


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int):
        self.w = store.param(f"{name}.weight", (d_in, d_out), init="uniform_fanin", fan_in=d_in)
        self.b = store.param(f"{name}.bias", (d_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return dc.add(dc.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int, eps: float = 1e-5):
        self.gamma = store.param(f"{name}.gamma", (dim,), init="ones")
        self.beta = store.param(f"{name}.beta", (dim,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv3x3:
    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int):
        self.w = store.param(f"{name}.weight", (c_out, c_in, 3, 3), init="uniform_fanin", fan_in=c_in * 9)
        self.b = store.param(f"{name}.bias", (c_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return dc.conv2d_3x3(x, self.w, self.b)


class CrossAttentionBlock:
    """Pre-norm multi-head cross-attention with residual connection.

    Queries are (N, d_model); the context supplies keys and values. Scores
    are softmax(Q Kᵀ / sqrt(d_head)) per head; heads are concatenated and
    output-projected before the residual add.
    """

    def __init__(self, store: ParameterStore, name: str, d_model: int, context_dim: int,
                 num_heads: int = 4):
        if d_model % num_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by num_heads {num_heads}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.norm = LayerNorm(store, f"{name}.norm", d_model)
        self.wq = Linear(store, f"{name}.wq", d_model, d_model)
        self.wk = Linear(store, f"{name}.wk", context_dim, d_model)
        self.wv = Linear(store, f"{name}.wv", context_dim, d_model)
        self.wo = Linear(store, f"{name}.wo", d_model, d_model)

    def attention_scores(self, queries: Tensor, context) -> Tensor:
        """(heads, N, L) row-stochastic attention matrix (for diagnostics)."""
        ctx = as_context(context)
        q = self.wq(self.norm(queries))
        k = self.wk(ctx)
        return self._scores(q, k)

    def _scores(self, q: Tensor, k: Tensor) -> Tensor:
        n, d = q.shape
        h = self.num_heads
        dh = d // h
        qh = dc.transpose(dc.reshape(q, (n, h, dh)), (1, 0, 2))  # (h,N,dh)
        kh = dc.transpose(dc.reshape(k, (k.shape[0], h, dh)), (1, 2, 0))  # (h,dh,L)
        logits = dc.mul(dc.matmul(qh, kh), 1.0 / np.sqrt(dh))
        return dc.softmax_lastdim(logits)

    def __call__(self, queries: Tensor, context) -> Tensor:
        if queries.shape[-1] != self.d_model:
            raise dc.ShapeError(f"query width {queries.shape[-1]} does not match block d_model {self.d_model}")
        ctx = as_context(context)
        n = queries.shape[0]
        h, dh = self.num_heads, self.d_model // self.num_heads
        qn = self.norm(queries)
        score = self._scores(self.wq(qn), self.wk(ctx))  # (h,N,L)
        v = self.wv(ctx)
        vh = dc.transpose(dc.reshape(v, (v.shape[0], h, dh)), (1, 0, 2))  # (h,L,dh)
        att = dc.matmul(score, vh)  # (h,N,dh)
        att = dc.reshape(dc.transpose(att, (1, 0, 2)), (n, self.d_model))
        return dc.add(queries, self.wo(att))


class FeedForward:
    """Pre-norm two-layer MLP with residual connection."""

    def __init__(self, store: ParameterStore, name: str, d_model: int, hidden: int,
                 act: str = "silu"):
        self.norm = LayerNorm(store, f"{name}.norm", d_model)
        self.lin1 = Linear(store, f"{name}.lin1", d_model, hidden)
        self.lin2 = Linear(store, f"{name}.lin2", hidden, d_model)
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        return dc.add(x, self.lin2(dc.activation(self.lin1(self.norm(x)), self.act)))


def cross_attention(block: CrossAttentionBlock, queries: Tensor, context) -> Tensor:
    return block(queries, context)


def _channels_last_norm(norm: LayerNorm, fmap: Tensor) -> Tensor:
    c, h, w = fmap.shape
    x = dc.transpose(fmap, (1, 2, 0))
    return dc.transpose(norm(x), (2, 0, 1))


class SpatialTransformerBlock:
    """Two text cross-attentions plus a feed-forward over flattened pixels."""

    def __init__(self, store: ParameterStore, name: str, d_model: int, context_dim: int,
                 num_heads: int = 4, ffn_mult: int = 4):
        self.d_model = d_model
        self.attn1 = CrossAttentionBlock(store, f"{name}.attn1", d_model, context_dim, num_heads)
        self.attn2 = CrossAttentionBlock(store, f"{name}.attn2", d_model, context_dim, num_heads)
        self.ffn = FeedForward(store, f"{name}.ffn", d_model, ffn_mult * d_model)

    def __call__(self, fmap: Tensor, context) -> Tensor:
        c, h, w = fmap.shape
        if c != self.d_model:
            raise dc.ShapeError(f"feature map channels {c} do not match block d_model {self.d_model}")
        x = dc.reshape(dc.transpose(fmap, (1, 2, 0)), (h * w, c))
        x = self.attn1(x, context)
        x = self.attn2(x, context)
        x = self.ffn(x)
        return dc.transpose(dc.reshape(x, (h, w, c)), (2, 0, 1))


def spatial_transformer(block: SpatialTransformerBlock, fmap: Tensor, context) -> Tensor:
    return block(fmap, context)


class ResConvBlock:
    """norm -> silu -> conv -> norm -> silu -> conv, with input skip."""

    def __init__(self, store: ParameterStore, name: str, channels: int):
        self.norm1 = LayerNorm(store, f"{name}.norm1", channels)
        self.norm2 = LayerNorm(store, f"{name}.norm2", channels)
        self.conv1 = Conv3x3(store, f"{name}.conv1", channels, channels)
        self.conv2 = Conv3x3(store, f"{name}.conv2", channels, channels)

    def __call__(self, fmap: Tensor) -> Tensor:
        h = self.conv1(dc.silu(_channels_last_norm(self.norm1, fmap)))
        h = self.conv2(dc.silu(_channels_last_norm(self.norm2, h)))
        return dc.add(fmap, h)


def res_conv(block: ResConvBlock, fmap: Tensor) -> Tensor:
    return block(fmap)


class UpsampleBlock:
    """2x bilinear enlargement followed by a 3x3 conv."""

    def __init__(self, store: ParameterStore, name: str, channels: int):
        self.conv = Conv3x3(store, f"{name}.conv", channels, channels)

    def __call__(self, fmap: Tensor) -> Tensor:
        return self.conv(dc.upsample2x_bilinear(fmap))


def upsample_block(block: UpsampleBlock, fmap: Tensor) -> Tensor:
    return block(fmap)


def posenc_2d(height: int, width: int, channels: int) -> np.ndarray:
    """Deterministic 2D sinusoidal encoding, shape (C,H,W).

    C/4 geometric frequency bands from 1 down to ~1e-4 (transformer
    convention); channel blocks are [sin(w_i*row), cos(w_i*row),
    sin(w_i*col), cos(w_i*col)].
    """
    if channels % 4 != 0:
        raise ValueError(f"posenc_2d needs channels divisible by 4, got {channels}")
    bands = channels // 4
    freqs = 10000.0 ** (-np.arange(bands) / bands)
    rows = np.arange(height)[None, :, None] * freqs[:, None, None]  # (B,H,1)
    cols = np.arange(width)[None, None, :] * freqs[:, None, None]  # (B,1,W)
    out = np.concatenate(
        [
            np.broadcast_to(np.sin(rows), (bands, height, width)),
            np.broadcast_to(np.cos(rows), (bands, height, width)),
            np.broadcast_to(np.sin(cols), (bands, height, width)),
            np.broadcast_to(np.cos(cols), (bands, height, width)),
        ],
        axis=0,
    )
    return np.ascontiguousarray(out)


def posenc_points(points: np.ndarray, n_freq: int) -> np.ndarray:
    """Sinusoidal lift of 3D coordinates: (M,3) -> (M, 6*n_freq).

    Octave frequencies pi * 2^k applied per coordinate, sin and cos.
    """
    freqs = np.pi * (2.0 ** np.arange(n_freq))
    ang = points[:, :, None] * freqs[None, None, :]  # (M,3,F)
    m = points.shape[0]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(m, 6 * n_freq)
