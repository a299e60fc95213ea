"""Adam with bias correction over a ParameterStore.

Moment buffers persist inside the store under "opt.m.<name>" /
"opt.v.<name>" (plus a scalar "opt.step"), so checkpoints carry optimizer
state. Gradients are zeroed after each step.
"""

from __future__ import annotations

import numpy as np

from .params import OPT_PREFIX, ParameterStore


class MissingGradientError(RuntimeError):
    """A parameter was stepped without a populated gradient."""


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.99,
              eps: float = 1e-8) -> None:
    step_t = store.buffer(OPT_PREFIX + "step", (), dtype=np.float64)
    t = int(step_t.data) + 1

    for name, p in list(store.trainable()):
        if p.grad is None:
            raise MissingGradientError(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        m = store.buffer(OPT_PREFIX + "m." + name, p.shape, dtype=p.dtype)
        v = store.buffer(OPT_PREFIX + "v." + name, p.shape, dtype=p.dtype)
        m.data = beta1 * m.data + (1.0 - beta1) * g
        v.data = beta2 * v.data + (1.0 - beta2) * (g * g)
        m_hat = m.data / (1.0 - beta1**t)
        v_hat = v.data / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None

    step_t.data = np.asarray(float(t))
