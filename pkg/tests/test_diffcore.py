"""Tensor engine: op semantics, gradient checks, Adam, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textsplat import diffcore as dc
from textsplat.diffcore import Tensor


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dc.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_basis_selection():
    out = dc.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0]])


def test_matmul_gradcheck(rng):
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    probe = rng.standard_normal((4, 5))

    def loss():
        return dc.sum_(dc.mul(dc.matmul(a, b), Tensor(probe)))

    assert dc.gradcheck(loss, [a, b], h=1e-5) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 5\)"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5))))


def test_matmul_batched_broadcast(rng):
    a = Tensor(rng.standard_normal((5, 2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)

    def loss():
        return dc.sum_(dc.powc(dc.matmul(a, b), 2.0))

    assert dc.gradcheck(loss, [a, b], h=1e-5) < 1e-6


# -- conv2d_3x3 -------------------------------------------------------------

def _delta_kernel(c):
    w = np.zeros((c, c, 3, 3))
    for i in range(c):
        w[i, i, 1, 1] = 1.0
    return w


def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((3, 6, 5))
    out = dc.conv2d_3x3(Tensor(x), Tensor(_delta_kernel(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, x)


def test_conv_all_ones_counts_overlap():
    x = Tensor(np.ones((1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = dc.conv2d_3x3(x, w, Tensor(np.zeros(1))).data[0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == 4.0 and out[2, 2] == 4.0
    assert out[0, 1] == 6.0


def test_conv_gradcheck(rng):
    x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
    b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    probe = rng.standard_normal((3, 5, 5))

    def loss():
        return dc.sum_(dc.mul(dc.conv2d_3x3(x, w, b), Tensor(probe)))

    assert dc.gradcheck(loss, [x, w, b], h=1e-5) < 1e-5


def test_conv_channel_mismatch():
    with pytest.raises(dc.ShapeError):
        dc.conv2d_3x3(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))


# -- layer_norm ---------------------------------------------------------------

def test_layer_norm_constant_row_collapses():
    x = Tensor(np.full((2, 6), 3.7))
    out = dc.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), 1e-5)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_already_normalized():
    x = Tensor(np.array([[1.0, -1.0]]))
    out = dc.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_gradcheck(rng):
    x = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 8), requires_grad=True)
    b = Tensor(rng.standard_normal(8) * 0.2, requires_grad=True)
    probe = rng.standard_normal((3, 8))

    def loss():
        return dc.sum_(dc.mul(dc.layer_norm(x, g, b, 1e-5), Tensor(probe)))

    assert dc.gradcheck(loss, [x, g, b], h=1e-5) < 1e-5


def test_layer_norm_zero_mean(rng):
    x = Tensor(rng.standard_normal((4, 16)))
    out = dc.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-5)
    assert np.abs(out.data.mean(axis=-1)).max() < 1e-6


# -- softmax ---------------------------------------------------------------------

def test_softmax_single_element():
    assert np.allclose(dc.softmax_lastdim(Tensor([[3.2]])).data, [[1.0]])


def test_softmax_uniform():
    out = dc.softmax_lastdim(Tensor([7.7, 7.7, 7.7]))
    assert np.allclose(out.data, 1.0 / 3.0)


def test_softmax_matches_direct_formula(rng):
    x = rng.standard_normal((5, 9))
    want = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
    got = dc.softmax_lastdim(Tensor(x)).data
    assert np.abs(got - want).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    out = dc.softmax_lastdim(Tensor(np.array(vals)))
    assert abs(out.data.sum() - 1.0) < 1e-6


# -- activations --------------------------------------------------------------------

def test_activation_fixed_points():
    assert dc.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5
    assert dc.activation(Tensor([0.0]), "silu").data[0] == 0.0


def test_activation_gradcheck(rng):
    x = Tensor(rng.standard_normal(12), requires_grad=True)
    probe = rng.standard_normal(12)
    for kind in ("silu", "sigmoid"):
        def loss():
            return dc.sum_(dc.mul(dc.activation(x, kind), Tensor(probe)))

        assert dc.gradcheck(loss, [x], h=1e-5) < 1e-7


def test_activation_unknown_kind():
    with pytest.raises(ValueError):
        dc.activation(Tensor([1.0]), "relu")


# -- grid_sample ----------------------------------------------------------------------

def _grid_sample_oracle(plane, coords):
    c, h, w = plane.shape
    out = np.zeros((coords.shape[0], c))
    for m, (u, v) in enumerate(coords):
        u, v = np.clip(u, -1, 1), np.clip(v, -1, 1)
        x = (u + 1) / 2 * (w - 1)
        y = (v + 1) / 2 * (h - 1)
        x0, y0 = min(int(np.floor(x)), w - 2), min(int(np.floor(y)), h - 2)
        x0, y0 = max(x0, 0), max(y0, 0)
        fx, fy = x - x0, y - y0
        out[m] = ((1 - fy) * (1 - fx) * plane[:, y0, x0] + (1 - fy) * fx * plane[:, y0, x0 + 1]
                  + fy * (1 - fx) * plane[:, y0 + 1, x0] + fy * fx * plane[:, y0 + 1, x0 + 1])
    return out


def test_grid_sample_constant_plane(rng):
    plane = Tensor(np.full((4, 5, 6), 2.25))
    coords = Tensor(rng.uniform(-1, 1, (7, 2)))
    assert np.allclose(dc.grid_sample_bilinear(plane, coords).data, 2.25)


def test_grid_sample_corner_hits_texel():
    plane = Tensor(np.arange(12.0).reshape(1, 3, 4))
    out = dc.grid_sample_bilinear(plane, Tensor([[-1.0, -1.0]]))
    assert out.data[0, 0] == 0.0  # texel (0,0) exactly


def test_grid_sample_matches_four_vertex_oracle(rng):
    plane = rng.standard_normal((3, 6, 7))
    coords = rng.uniform(-1.3, 1.3, (20, 2))  # includes out-of-range (clamped)
    got = dc.grid_sample_bilinear(Tensor(plane), Tensor(coords)).data
    assert np.abs(got - _grid_sample_oracle(plane, coords)).max() < 1e-12


def test_grid_sample_gradcheck(rng):
    plane = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    coords = Tensor(rng.uniform(-0.9, 0.9, (6, 2)), requires_grad=True)
    probe = rng.standard_normal((6, 2))

    def loss():
        return dc.sum_(dc.mul(dc.grid_sample_bilinear(plane, coords), Tensor(probe)))

    assert dc.gradcheck(loss, [plane, coords], h=1e-5) < 1e-5


# -- upsample ------------------------------------------------------------------------

def _upsample_oracle(x):
    c, h, w = x.shape
    out = np.zeros((c, 2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            sy = np.clip((i + 0.5) / 2 - 0.5, 0, h - 1)
            sx = np.clip((j + 0.5) / 2 - 0.5, 0, w - 1)
            y0 = min(max(int(np.floor(sy)), 0), max(h - 2, 0))
            x0 = min(max(int(np.floor(sx)), 0), max(w - 2, 0))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[:, i, j] = ((1 - fy) * (1 - fx) * x[:, y0, x0] + (1 - fy) * fx * x[:, y0, x1]
                            + fy * (1 - fx) * x[:, y1, x0] + fy * fx * x[:, y1, x1])
    return out


def test_upsample_constant():
    x = Tensor(np.full((2, 3, 3), -1.5))
    out = dc.upsample2x_bilinear(x)
    assert out.shape == (2, 6, 6)
    assert np.allclose(out.data, -1.5)


def test_upsample_single_texel_broadcast():
    out = dc.upsample2x_bilinear(Tensor(np.full((1, 1, 1), 4.0)))
    assert out.shape == (1, 2, 2)
    assert np.allclose(out.data, 4.0)


def test_upsample_matches_oracle(rng):
    x = rng.standard_normal((2, 4, 5))
    got = dc.upsample2x_bilinear(Tensor(x)).data
    assert np.abs(got - _upsample_oracle(x)).max() < 1e-12


def test_upsample_gradcheck(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    probe = rng.standard_normal((2, 6, 8))

    def loss():
        return dc.sum_(dc.mul(dc.upsample2x_bilinear(x), Tensor(probe)))

    assert dc.gradcheck(loss, [x], h=1e-5) < 1e-5


# -- backward ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    p = Tensor(np.array([3.0, -1.0, 2.0]), requires_grad=True)
    dc.backward(dc.sum_(p))
    assert np.array_equal(p.grad, np.ones(3))


def test_backward_quadratic():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    dc.backward(dc.sum_(dc.mul(p, p)))
    assert np.allclose(p.grad, [2.0, 4.0])


def test_backward_accumulates_across_passes():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    dc.backward(dc.sum_(p))
    dc.backward(dc.sum_(dc.mul(p, 2.0)))
    assert np.allclose(p.grad, [3.0, 3.0])


def test_backward_twice_raises():
    p = Tensor(np.array([1.0]), requires_grad=True)
    loss = dc.sum_(dc.mul(p, p))
    dc.backward(loss)
    with pytest.raises(dc.GraphConsumedError):
        dc.backward(loss)


def test_backward_shared_subgraph_raises():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    mid = dc.mul(p, p)
    dc.backward(dc.sum_(mid))
    with pytest.raises(dc.GraphConsumedError):
        dc.backward(dc.sum_(dc.mul(mid, 2.0)))


def test_backward_non_scalar_raises():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(dc.ShapeError):
        dc.backward(dc.mul(p, 2.0))


def test_no_grad_buffer_without_requires_grad():
    a = Tensor(np.ones(3), requires_grad=False)
    b = Tensor(np.ones(3), requires_grad=True)
    dc.backward(dc.sum_(dc.mul(a, b)))
    assert a.grad is None and b.grad is not None


def test_forward_bit_determinism(rng):
    x = rng.standard_normal((6, 6))
    a = dc.softmax_lastdim(dc.matmul(Tensor(x), Tensor(x))).data
    b = dc.softmax_lastdim(dc.matmul(Tensor(x), Tensor(x))).data
    assert np.array_equal(a, b)


# -- adam -----------------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    store = dc.ParameterStore(seed=1, dtype=np.float64)
    p = store.param("p", (3,), init="zeros")
    g = np.array([0.5, -2.0, 1e-3])
    p.grad = g.copy()
    before = p.data.copy()
    dc.adam_step(store, lr=0.1, beta1=0.9, beta2=0.99, eps=1e-30)
    assert np.allclose(p.data - before, -0.1 * np.sign(g), atol=1e-12)
    assert p.grad is None  # zeroed after the step


def test_adam_zero_grad_leaves_params():
    store = dc.ParameterStore(seed=1, dtype=np.float64)
    p = store.param("p", (4,), init="uniform_fanin", fan_in=4)
    before = p.data.copy()
    p.grad = np.zeros(4)
    dc.adam_step(store, lr=0.1)
    assert np.array_equal(p.data, before)


def test_adam_missing_grad_names_parameter():
    store = dc.ParameterStore(seed=1)
    store.param("tsd.head.weight", (2, 2), init="zeros")
    with pytest.raises(dc.MissingGradientError, match="tsd.head.weight"):
        dc.adam_step(store, lr=0.1)


def test_adam_converges_on_quadratic():
    store = dc.ParameterStore(seed=0, dtype=np.float64)
    p = store.param("p", (4,), init="uniform_fanin", fan_in=1)
    c = Tensor(np.array([1.0, -2.0, 3.0, 0.5]))
    for _ in range(100):
        dc.backward(dc.sum_(dc.powc(dc.sub(p, c), 2.0)))
        dc.adam_step(store, lr=0.2, beta1=0.8, beta2=0.95)
    assert np.linalg.norm(p.data - c.data) < 1e-2


def test_adam_moments_persist_in_store():
    store = dc.ParameterStore(seed=0, dtype=np.float64)
    p = store.param("p", (2,), init="zeros")
    p.grad = np.array([1.0, 1.0])
    dc.adam_step(store, lr=0.1)
    assert "opt.m.p" in store and "opt.v.p" in store and "opt.step" in store
    assert store["opt.step"].data == 1.0


# -- parameter store / checkpoints ---------------------------------------------------------

def test_store_reinit_is_bit_identical():
    a = dc.ParameterStore(seed=7)
    w1 = a.param("x.weight", (4, 4), init="uniform_fanin", fan_in=4).data.copy()
    a.reinitialize(seed=7)
    assert np.array_equal(a.param("x.weight", (4, 4)).data, w1)
    b = dc.ParameterStore(seed=7)
    assert np.array_equal(b.param("x.weight", (4, 4), init="uniform_fanin", fan_in=4).data, w1)


def test_store_init_independent_of_registration_order():
    a = dc.ParameterStore(seed=3)
    a.param("first", (3,), init="uniform_fanin", fan_in=3)
    wa = a.param("second", (3,), init="uniform_fanin", fan_in=3).data.copy()
    b = dc.ParameterStore(seed=3)
    wb = b.param("second", (3,), init="uniform_fanin", fan_in=3).data.copy()
    assert np.array_equal(wa, wb)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = dc.ParameterStore(seed=5, dtype=np.float32)
    store.param("a.weight", (3, 2), init="uniform_fanin", fan_in=3)
    store.param("a.bias", (2,), init="zeros")
    for _, p in store.trainable():
        p.grad = np.ones_like(p.data)
    dc.adam_step(store, lr=0.01)
    path = tmp_path / "ck.aspt"
    store.save(path)
    before = {n: t.data.copy() for n, t in store.items()}
    store.reinitialize(seed=99)
    store.load(path)
    for n, arr in before.items():
        assert np.array_equal(store[n].data, arr), n


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.aspt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        dc.read_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    a = dc.ParameterStore(seed=1)
    a.param("w", (2, 2), init="zeros")
    path = tmp_path / "ck.aspt"
    a.save(path)
    b = dc.ParameterStore(seed=1)
    b.param("w", (3, 3), init="zeros")
    with pytest.raises(ValueError, match="shape"):
        b.load(path)


def test_checkpoint_format_layout(tmp_path):
    store = dc.ParameterStore(seed=2, dtype=np.float32)
    store.param("w", (2,), init="ones")
    path = tmp_path / "ck.aspt"
    store.save(path)
    blob = path.read_bytes()
    assert blob[:4] == b"ASPT"
    assert int.from_bytes(blob[4:8], "little") == 1  # version
    assert int.from_bytes(blob[8:12], "little") == 1  # name length
    assert blob[12:13] == b"w"
