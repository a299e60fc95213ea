"""Gaussian attribute decoding from triplane features.

Each center is projected onto the xy / xz / yz planes; the three bilinear
samples are averaged into a per-Gaussian feature vector, which two small
MLPs turn into opacity, scaling, rotation and DC color. Every attribute
range is enforced by construction: opacity through a sigmoid, scaling
through a sigmoid mapped onto the (a, b) log-extent interval, rotation by
quaternion normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nnblocks as nn
from .diffcore import ParameterStore, Tensor
from .ttg import Triplane


@dataclass
class GaussianSet:
    """Attribute arrays for M Gaussians (all graph-connected tensors).

    scaling_raw holds log-domain extents in (a, b); the renderer applies
    exp. opacity_logit is the pre-sigmoid value backing opacity, kept so
    on-disk round trips are bit-exact.
    """

    centers: Tensor        # (M,3)
    scaling_raw: Tensor    # (M,3)
    rotation: Tensor       # (M,4) unit quaternions, scalar-first
    opacity: Tensor        # (M,1) in (0,1)
    sh_dc: Tensor          # (M,3) degree-0 SH coefficients
    opacity_logit: Tensor  # (M,1)

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    def detached(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).detach() for f in
                             ("centers", "scaling_raw", "rotation", "opacity", "sh_dc", "opacity_logit")))


class GaussianDecoder:
    """Two 2-layer MLPs: features (+ coordinates) -> shape and color attributes."""

    def __init__(self, store: ParameterStore, prefix: str, *, feature_dim: int,
                 hidden: int = 32, scale_bounds: tuple = (-9.0, -3.0),
                 use_coords: bool = True):
        a, b = float(scale_bounds[0]), float(scale_bounds[1])
        if not a < b:
            raise ValueError(f"scale bounds must satisfy a < b, got ({a}, {b})")
        self.scale_bounds = (a, b)
        self.use_coords = bool(use_coords)
        d_in = feature_dim + (3 if self.use_coords else 0)
        self.shape_lin1 = nn.Linear(store, f"{prefix}.shape.lin1", d_in, hidden)
        self.shape_lin2 = nn.Linear(store, f"{prefix}.shape.lin2", hidden, 8)
        self.color_lin1 = nn.Linear(store, f"{prefix}.color.lin1", d_in, hidden)
        self.color_lin2 = nn.Linear(store, f"{prefix}.color.lin2", hidden, 3)


def sample_triplane(tri: Triplane, centers: Tensor) -> Tensor:
    """Average of the three plane samples at each center's projections.

    Projections: xy-plane at (x,y), xz at (x,z), yz at (y,z), normalized by
    the plane extent; the first projected coordinate maps to plane width.
    """
    scale = 1.0 / tri.extent
    u = dc.mul(centers, scale)
    xy = dc.stack([u[:, 0], u[:, 1]], axis=1)
    xz = dc.stack([u[:, 0], u[:, 2]], axis=1)
    yz = dc.stack([u[:, 1], u[:, 2]], axis=1)
    f_xy = dc.grid_sample_bilinear(tri.plane_xy, xy)
    f_xz = dc.grid_sample_bilinear(tri.plane_xz, xz)
    f_yz = dc.grid_sample_bilinear(tri.plane_yz, yz)
    return dc.mul(dc.add(dc.add(f_xy, f_xz), f_yz), 1.0 / 3.0)


def _mlp(lin1: nn.Linear, lin2: nn.Linear, x: Tensor) -> Tensor:
    return lin2(dc.silu(lin1(x)))


def decode(dec: GaussianDecoder, features: Tensor, centers: Tensor) -> GaussianSet:
    """Turn per-Gaussian features (+ centers) into a complete GaussianSet."""
    if dec.use_coords:
        inp = dc.concat([features, centers], axis=1)
    else:
        inp = features
    shape_raw = _mlp(dec.shape_lin1, dec.shape_lin2, inp)  # (M, 1+3+4)
    sh_dc = _mlp(dec.color_lin1, dec.color_lin2, inp)      # (M, 3)

    opacity_logit = shape_raw[:, 0:1]
    opacity = dc.sigmoid(opacity_logit)
    a, b = dec.scale_bounds
    scaling_raw = dc.add(dc.mul(dc.sigmoid(shape_raw[:, 1:4]), b - a), a)

    q_raw = shape_raw[:, 4:8]
    norm = dc.sqrt(dc.sum_(dc.mul(q_raw, q_raw), axis=1, keepdims=True))
    degenerate = norm.data < 1e-8  # (M,1)
    safe_norm = dc.where_const(degenerate, Tensor(np.ones_like(norm.data)), norm)
    identity = np.zeros((q_raw.shape[0], 4), dtype=q_raw.dtype)
    identity[:, 0] = 1.0
    rotation = dc.where_const(degenerate, Tensor(identity), dc.div(q_raw, safe_norm))

    return GaussianSet(
        centers=centers,
        scaling_raw=scaling_raw,
        rotation=rotation,
        opacity=opacity,
        sh_dc=sh_dc,
        opacity_logit=opacity_logit,
    )
