"""Central finite-difference gradient checking.

The checker re-runs a user-supplied forward closure while nudging raw
parameter buffers, so it stays independent of the reverse-mode path it
verifies. Use f64 tensors; f32 has too little headroom for h=1e-5.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f, t: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar f() w.r.t. selected coords of t.data.

    Returns an array shaped like t with untested coords left at zero.
    """
    flat = t.data.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    g = np.zeros_like(flat)
    for i in idxs:
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f().data)
        flat[i] = keep - h
        fm = float(f().data)
        flat[i] = keep
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(t.shape)


def gradcheck(f, tensors, h: float = 1e-5, max_coords: int | None = None, seed: int = 0,
              atol: float = 1e-8):
    """Compare reverse-mode gradients of scalar f() against central differences.

    tensors: list of requires_grad Tensors that f() reads. When max_coords
    is set, a seeded subset of coordinates per tensor is checked (all
    tensors are still covered). Returns the worst per-tensor relative
    error max |a-n| / max(|a|_inf, |n|_inf, atol); the atol floor keeps
    genuinely-zero gradients (where central differences return pure
    roundoff noise) from reading as mismatches.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for t in tensors:
        t.grad = None

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = t.data.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        num = numeric_grad(f, t, h=h, coords=coords).reshape(-1)
        af = a.reshape(-1)
        scale = max(float(np.max(np.abs(af[coords]))), float(np.max(np.abs(num[coords]))), atol)
        err = float(np.max(np.abs(af[coords] - num[coords]))) / scale
        worst = max(worst, err)
    return worst
