import numpy as np
import pytest

from textsplat import diffcore as dc
from textsplat.decoder import GaussianSet


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_gaussian_set(rng, m=8, dtype=np.float64, spread=0.7, scale_range=(-3.0, -1.6),
                        requires_grad=False):
    """A generic f64 scene with footprints a few pixels wide at desk cameras."""
    centers = rng.uniform(-spread, spread, (m, 3))
    scaling = rng.uniform(*scale_range, (m, 3))
    quat = rng.standard_normal((m, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    logit = rng.uniform(-1.0, 1.5, (m, 1))
    sh = rng.uniform(-1.2, 1.2, (m, 3))
    tl = dc.Tensor(logit.astype(dtype), requires_grad=requires_grad)
    return GaussianSet(
        centers=dc.Tensor(centers.astype(dtype), requires_grad=requires_grad),
        scaling_raw=dc.Tensor(scaling.astype(dtype), requires_grad=requires_grad),
        rotation=dc.Tensor(quat.astype(dtype), requires_grad=requires_grad),
        opacity=dc.sigmoid(tl),
        sh_dc=dc.Tensor(sh.astype(dtype), requires_grad=requires_grad),
        opacity_logit=tl,
    )
