"""Network blocks: attention oracle, residual-zero identities, gradchecks."""

import numpy as np
import pytest

from textsplat import diffcore as dc
from textsplat import nnblocks as nn
from textsplat.diffcore import ParameterStore, Tensor


def _store(dtype=np.float64, seed=0):
    return ParameterStore(seed=seed, dtype=dtype)


def _zero(store, name):
    store[name].data = np.zeros_like(store[name].data)


# -- cross attention ----------------------------------------------------------

def test_cross_attention_single_key(rng):
    store = _store()
    blk = nn.CrossAttentionBlock(store, "ca", d_model=8, context_dim=6, num_heads=2)
    q = Tensor(rng.standard_normal((3, 8)))
    y = Tensor(rng.standard_normal((1, 6)))
    scores = blk.attention_scores(q, y)
    assert np.allclose(scores.data, 1.0)  # softmax over one key
    # output = residual + W_O(W_V(y0)) broadcast over queries
    out = blk(q, y)
    v = y.data @ store["ca.wv.weight"].data + store["ca.wv.bias"].data
    expect = q.data + (v @ store["ca.wo.weight"].data + store["ca.wo.bias"].data)
    assert np.abs(out.data - expect).max() < 1e-12


def test_cross_attention_identical_keys_uniform(rng):
    store = _store()
    blk = nn.CrossAttentionBlock(store, "ca", d_model=8, context_dim=5, num_heads=4)
    q = Tensor(rng.standard_normal((4, 8)))
    row = rng.standard_normal(5)
    y = Tensor(np.tile(row, (6, 1)))
    scores = blk.attention_scores(q, y).data
    assert np.abs(scores - 1.0 / 6.0).max() < 1e-12


def test_cross_attention_matches_dense_oracle(rng):
    store = _store()
    blk = nn.CrossAttentionBlock(store, "ca", d_model=8, context_dim=10, num_heads=1)
    q = rng.standard_normal((3, 8))
    y = rng.standard_normal((4, 10))
    got = blk(Tensor(q), Tensor(y)).data

    # dense f64 re-derivation of score = softmax(WQ(p) WK(y)^T / sqrt(d)), h = score WV(y)
    def lin(x, name):
        return x @ store[f"ca.{name}.weight"].data + store[f"ca.{name}.bias"].data

    mu = q.mean(axis=1, keepdims=True)
    var = ((q - mu) ** 2).mean(axis=1, keepdims=True)
    qn = (q - mu) / np.sqrt(var + 1e-5)
    logits = lin(qn, "wq") @ lin(y, "wk").T / np.sqrt(8)
    score = np.exp(logits - logits.max(axis=1, keepdims=True))
    score /= score.sum(axis=1, keepdims=True)
    h = score @ lin(y, "wv")
    expect = q + lin(h, "wo")
    assert np.abs(got - expect).max() < 1e-10


def test_cross_attention_score_rows_sum_to_one(rng):
    store = _store()
    blk = nn.CrossAttentionBlock(store, "ca", d_model=16, context_dim=7, num_heads=4)
    scores = blk.attention_scores(Tensor(rng.standard_normal((5, 16))),
                                  Tensor(rng.standard_normal((9, 7))))
    assert np.abs(scores.data.sum(axis=-1) - 1.0).max() < 1e-6


def test_cross_attention_d_mismatch():
    store = _store()
    blk = nn.CrossAttentionBlock(store, "ca", d_model=8, context_dim=4, num_heads=2)
    with pytest.raises(dc.ShapeError):
        blk(Tensor(np.ones((3, 6))), Tensor(np.ones((2, 4))))


def test_cross_attention_head_divisibility():
    with pytest.raises(ValueError):
        nn.CrossAttentionBlock(_store(), "ca", d_model=10, context_dim=4, num_heads=4)


def test_cross_attention_gradcheck(rng):
    store = _store()
    blk = nn.CrossAttentionBlock(store, "ca", d_model=4, context_dim=5, num_heads=2)
    q = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    probe = rng.standard_normal((3, 4))

    def loss():
        return dc.sum_(dc.mul(blk(q, y), Tensor(probe)))

    # wk.bias shifts every key equally: softmax is invariant, its true
    # gradient is structurally zero, so FD there is pure roundoff noise.
    params = [store[n] for n in store.names() if n != "ca.wk.bias"]
    assert dc.gradcheck(loss, [q, y] + params, h=1e-5) < 1e-5
    dc.backward(loss())
    assert np.abs(store["ca.wk.bias"].grad).max() < 1e-12


# -- spatial transformer ----------------------------------------------------------

def _zero_residual_outputs(store, prefix):
    for name in store.names():
        if not name.startswith(prefix):
            continue
        if any(name.endswith(f"{tail}.{kind}") for tail in ("wo", "lin2", "conv2")
               for kind in ("weight", "bias")):
            _zero(store, name)


def test_spatial_transformer_residual_zero_identity(rng):
    store = _store()
    blk = nn.SpatialTransformerBlock(store, "st", d_model=8, context_dim=6)
    _zero_residual_outputs(store, "st")
    fmap = rng.standard_normal((8, 4, 4))
    out = blk(Tensor(fmap), Tensor(rng.standard_normal((3, 6))))
    assert np.array_equal(out.data, fmap)


def test_spatial_transformer_shape_contract(rng):
    store = _store()
    blk = nn.SpatialTransformerBlock(store, "st", d_model=8, context_dim=6)
    out = blk(Tensor(rng.standard_normal((8, 4, 4))), Tensor(rng.standard_normal((3, 6))))
    assert out.shape == (8, 4, 4)


def test_spatial_transformer_channel_mismatch(rng):
    store = _store()
    blk = nn.SpatialTransformerBlock(store, "st", d_model=8, context_dim=6)
    with pytest.raises(dc.ShapeError):
        blk(Tensor(rng.standard_normal((4, 4, 4))), Tensor(rng.standard_normal((3, 6))))


def test_spatial_transformer_gradcheck(rng):
    store = _store()
    blk = nn.SpatialTransformerBlock(store, "st", d_model=4, context_dim=4, num_heads=2, ffn_mult=2)
    fmap = Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
    y = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    probe = rng.standard_normal((4, 3, 3))

    def loss():
        return dc.sum_(dc.mul(blk(fmap, y), Tensor(probe)))

    assert dc.gradcheck(loss, [fmap, y], h=1e-5) < 1e-4


def test_batch_permutation_equivariance(rng):
    store = _store()
    blk = nn.CrossAttentionBlock(store, "ca", d_model=8, context_dim=6, num_heads=2)
    q = rng.standard_normal((5, 8))
    y = Tensor(rng.standard_normal((4, 6)))
    perm = np.array([3, 1, 4, 0, 2])
    out = blk(Tensor(q), y).data
    out_perm = blk(Tensor(q[perm]), y).data
    assert np.allclose(out[perm], out_perm, atol=1e-12)


# -- res conv ----------------------------------------------------------------------

def test_res_conv_zero_convs_identity(rng):
    store = _store()
    blk = nn.ResConvBlock(store, "rc", channels=6)
    for name in ("rc.conv1.weight", "rc.conv1.bias", "rc.conv2.weight", "rc.conv2.bias"):
        _zero(store, name)
    fmap = rng.standard_normal((6, 5, 5))
    assert np.array_equal(blk(Tensor(fmap)).data, fmap)


def test_res_conv_shape(rng):
    store = _store()
    blk = nn.ResConvBlock(store, "rc", channels=16)
    assert blk(Tensor(rng.standard_normal((16, 8, 8)))).shape == (16, 8, 8)


def test_res_conv_gradcheck(rng):
    store = _store()
    blk = nn.ResConvBlock(store, "rc", channels=3)
    fmap = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
    probe = rng.standard_normal((3, 4, 4))

    def loss():
        return dc.sum_(dc.mul(blk(fmap), Tensor(probe)))

    params = [store[n] for n in store.names()]
    assert dc.gradcheck(loss, [fmap] + params, h=1e-5) < 1e-5


# -- upsample block -----------------------------------------------------------------

def test_upsample_block_shape(rng):
    store = _store()
    blk = nn.UpsampleBlock(store, "up", channels=4)
    assert blk(Tensor(rng.standard_normal((4, 4, 4)))).shape == (4, 8, 8)


def test_upsample_block_delta_kernel_is_pure_upsampling(rng):
    store = _store()
    blk = nn.UpsampleBlock(store, "up", channels=2)
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    store["up.conv.weight"].data = w
    fmap = rng.standard_normal((2, 3, 3))
    want = dc.upsample2x_bilinear(Tensor(fmap)).data
    assert np.allclose(blk(Tensor(fmap)).data, want)


def test_upsample_block_gradcheck(rng):
    store = _store()
    blk = nn.UpsampleBlock(store, "up", channels=2)
    fmap = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    probe = rng.standard_normal((2, 6, 6))

    def loss():
        return dc.sum_(dc.mul(blk(fmap), Tensor(probe)))

    assert dc.gradcheck(loss, [fmap, store["up.conv.weight"], store["up.conv.bias"]], h=1e-5) < 1e-5


# -- positional encodings -------------------------------------------------------------

def test_posenc_origin_values():
    enc = nn.posenc_2d(4, 4, 16)
    bands = 4
    assert np.allclose(enc[:bands, 0, 0], 0.0)          # sin(row) at 0
    assert np.allclose(enc[bands:2 * bands, 0, 0], 1.0)  # cos(row) at 0
    assert np.allclose(enc[2 * bands:3 * bands, 0, 0], 0.0)
    assert np.allclose(enc[3 * bands:, 0, 0], 1.0)


def test_posenc_shape():
    assert nn.posenc_2d(8, 8, 32).shape == (32, 8, 8)


def test_posenc_requires_divisible_by_four():
    with pytest.raises(ValueError):
        nn.posenc_2d(4, 4, 10)


def test_posenc_pairwise_distinct_64():
    enc = nn.posenc_2d(64, 64, 8).reshape(8, -1)
    flat = enc.T.copy()
    uniq = np.unique(np.round(flat, 12), axis=0)
    assert uniq.shape[0] == 64 * 64


def test_posenc_points_shape_and_determinism(rng):
    pts = rng.standard_normal((10, 3))
    a = nn.posenc_points(pts, 4)
    b = nn.posenc_points(pts, 4)
    assert a.shape == (10, 24)
    assert np.array_equal(a, b)
