"""Text-guided triplane generation.

Three image-like generators with disjoint parameters emit the xy / xz / yz
feature planes; splitting one generator's channels three ways is kept as
an ablation mode (it reintroduces the spatial-inhomogeneity defect the
separate generators exist to fix).

Each generator upsamples a fixed sinusoidal base query through stacks of
residual conv and text cross-attention blocks: final resolution is
base_res * 2^n_up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import nnblocks as nn
from .diffcore import ParameterStore, Tensor


@dataclass
class Triplane:
    """Three independent (C, R, R) feature planes covering [-extent, extent]^2."""

    plane_xy: Tensor
    plane_xz: Tensor
    plane_yz: Tensor
    extent: float

    def __post_init__(self):
        shapes = {self.plane_xy.shape, self.plane_xz.shape, self.plane_yz.shape}
        if len(shapes) != 1:
            raise ValueError(f"triplane planes disagree on shape: {sorted(shapes)}")

    @property
    def channels(self) -> int:
        return self.plane_xy.shape[0]

    @property
    def resolution(self) -> int:
        return self.plane_xy.shape[1]


@dataclass(frozen=True)
class PlaneGeneratorConfig:
    width: int = 32          # working channel count / attention d_model
    channels: int = 16       # output feature channels per plane
    base_res: int = 8        # resolution of the fixed input query
    n_up: int = 2            # number of 2x upsampling stages
    num_heads: int = 4
    ffn_mult: int = 4
    context_dim: int = 256
    n_low: int = 3           # ResConv+SpatialTransformer pairs at base resolution

    @property
    def resolution(self) -> int:
        return self.base_res * (2**self.n_up)


class PlaneGenerator:
    """Fixed positional query -> conditioned feature plane (C, R, R)."""

    def __init__(self, store: ParameterStore, prefix: str, cfg: PlaneGeneratorConfig,
                 out_channels: int | None = None):
        self.cfg = cfg
        self.out_channels = out_channels if out_channels is not None else cfg.channels
        self.base_query = nn.posenc_2d(cfg.base_res, cfg.base_res, cfg.width).astype(store.dtype)
        self.low_stack = []
        for k in range(cfg.n_low):
            rc = nn.ResConvBlock(store, f"{prefix}.low{k}.res", cfg.width)
            st = nn.SpatialTransformerBlock(store, f"{prefix}.low{k}.xattn", cfg.width,
                                            cfg.context_dim, cfg.num_heads, cfg.ffn_mult)
            self.low_stack.append((rc, st))
        self.up_stack = []
        for k in range(cfg.n_up):
            rc = nn.ResConvBlock(store, f"{prefix}.up{k}.res", cfg.width)
            st = nn.SpatialTransformerBlock(store, f"{prefix}.up{k}.xattn", cfg.width,
                                            cfg.context_dim, cfg.num_heads, cfg.ffn_mult)
            up = nn.UpsampleBlock(store, f"{prefix}.up{k}.upsample", cfg.width)
            self.up_stack.append((rc, st, up))
        self.out_conv = nn.Conv3x3(store, f"{prefix}.out_conv", cfg.width, self.out_channels)


def generate_plane(gen: PlaneGenerator, context) -> Tensor:
    """One generator forward pass; differentiable w.r.t. params and context."""
    h = Tensor(gen.base_query)
    for rc, st in gen.low_stack:
        h = rc(h)
        h = st(h, context)
    for rc, st, up in gen.up_stack:
        h = rc(h)
        h = st(h, context)
        h = up(h)
    return gen.out_conv(h)


def generate_triplane(gx: PlaneGenerator, gy: PlaneGenerator, gz: PlaneGenerator,
                      context, extent: float) -> Triplane:
    """Three independent forward passes assembled into a Triplane."""
    if not (gx.cfg == gy.cfg == gz.cfg) or not (gx.out_channels == gy.out_channels == gz.out_channels):
        raise ValueError("triplane generators must share hyperparameters (parameters stay disjoint)")
    return Triplane(
        plane_xy=generate_plane(gx, context),
        plane_xz=generate_plane(gy, context),
        plane_yz=generate_plane(gz, context),
        extent=float(extent),
    )


def single_generator_mode(g: PlaneGenerator, context, extent: float) -> Triplane:
    """Ablation: one generator's 3C channels split into the three planes."""
    if g.out_channels % 3 != 0:
        raise ValueError(f"single-generator mode needs output channels divisible by 3, got {g.out_channels}")
    c = g.out_channels // 3
    out = generate_plane(g, context)
    return Triplane(
        plane_xy=out[0:c],
        plane_xz=out[c : 2 * c],
        plane_yz=out[2 * c : 3 * c],
        extent=float(extent),
    )
