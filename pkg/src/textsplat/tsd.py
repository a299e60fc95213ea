"""Text-guided shape deformation.

A fixed anchor lattice is the input shape; a stack of cross-attention /
feed-forward blocks predicts a per-anchor offset from the text, squashed
into (-beta, beta) by 2*beta*sigmoid(out) - beta. The deformed positions
become the Gaussian centers. Anchors themselves are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import nnblocks as nn
from .diffcore import ParameterStore, Tensor


@dataclass(frozen=True)
class AnchorGrid:
    """Regular N^3 lattice spanning [-extent, extent]^3, x varying fastest."""

    points: np.ndarray = field(repr=False)
    n_side: int
    extent: float

    def __post_init__(self):
        self.points.setflags(write=False)

    @property
    def count(self) -> int:
        return self.points.shape[0]


def make_anchor_grid(n_side: int, extent: float, dtype=np.float32) -> AnchorGrid:
    if n_side < 2:
        raise ValueError(f"anchor grid needs n_side >= 2, got {n_side}")
    if extent <= 0:
        raise ValueError(f"anchor grid extent must be positive, got {extent}")
    xs = np.linspace(-extent, extent, n_side, dtype=np.float64)
    ii = np.arange(n_side**3)
    ix = ii % n_side
    iy = (ii // n_side) % n_side
    iz = ii // (n_side * n_side)
    pts = np.stack([xs[ix], xs[iy], xs[iz]], axis=1).astype(dtype)
    return AnchorGrid(points=pts, n_side=n_side, extent=float(extent))


class TsdNetwork:
    """Anchor coordinates -> text-conditioned bounded offsets."""

    def __init__(self, store: ParameterStore, prefix: str, *, d_model: int, context_dim: int,
                 n_blocks: int = 2, num_heads: int = 4, ffn_mult: int = 4, n_freq: int = 6,
                 beta: float = 0.2):
        if beta <= 0:
            raise ValueError(f"freedom beta must be positive, got {beta}")
        self.beta = float(beta)
        self.n_freq = n_freq
        self.point_embed = nn.Linear(store, f"{prefix}.point_embed", 6 * n_freq, d_model)
        self.blocks = []
        for k in range(n_blocks):
            attn = nn.CrossAttentionBlock(store, f"{prefix}.block{k}.attn", d_model, context_dim, num_heads)
            ffn = nn.FeedForward(store, f"{prefix}.block{k}.ffn", d_model, ffn_mult * d_model)
            self.blocks.append((attn, ffn))
        self.head = nn.Linear(store, f"{prefix}.head", d_model, 3)


def deform(net: TsdNetwork, grid: AnchorGrid, context) -> Tensor:
    """Deformed centers p' = p + Delta, Delta strictly inside (-beta, beta)^3."""
    ctx = nn.as_context(context)
    enc = nn.posenc_points(grid.points.astype(np.float64), net.n_freq)
    h = net.point_embed(Tensor(enc.astype(ctx.dtype)))
    for attn, ffn in net.blocks:
        h = attn(h, ctx)
        h = ffn(h)
    out = net.head(h)
    delta = dc.sub(dc.mul(dc.sigmoid(out), 2.0 * net.beta), net.beta)
    assert np.max(np.abs(delta.data)) < net.beta, "offset bound violated"
    return dc.add(delta, Tensor(grid.points.astype(ctx.dtype)))
