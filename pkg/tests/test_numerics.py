import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from omnitraj.numerics import (
    AdamState,
    CheckpointError,
    ConfigError,
    ContractError,
    GradTape,
    ShapeError,
    Tensor,
    adam_step,
    finite_diff_check,
    gelu,
    kernels,
    layer_norm,
    linear,
    load_checkpoint,
    matmul,
    mha,
    save_checkpoint,
    softmax,
    step_decay_lr,
)
from omnitraj.numerics import _kernels_py as py
from omnitraj.numerics import layers as L
from omnitraj.numerics.tensor import concat, cumsum, getitem, min_select, reduce_mean, reduce_sum, reshape

try:
    from omnitraj.numerics import _kernels as cy
except ImportError:  # pragma: no cover - extension not built
    cy = None

needs_cy = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


# -- kernel parity --------------------------------------------------------------

@needs_cy
def test_kernel_parity(rng):
    x = rng.normal(size=(37, 12))
    gain, bias = rng.normal(size=12), rng.normal(size=12)
    g = rng.normal(size=x.shape)
    for a, b in zip(py.layer_norm_fwd(x, gain, bias, 1e-5), cy.layer_norm_fwd(x, gain, bias, 1e-5)):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-12, atol=1e-12)
    _, xhat, rstd = py.layer_norm_fwd(x, gain, bias, 1e-5)
    for a, b in zip(py.layer_norm_bwd(g, xhat, rstd, gain), cy.layer_norm_bwd(g, xhat, rstd, gain)):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-10, atol=1e-12)
    valid = (rng.random(x.shape) > 0.3).astype(np.uint8)
    valid[0] = 0
    ya, yb = py.softmax_fwd(x, valid), np.asarray(cy.softmax_fwd(x, valid))
    np.testing.assert_allclose(ya, yb, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(yb[0], 0.0)
    np.testing.assert_allclose(py.softmax_bwd(g, ya), np.asarray(cy.softmax_bwd(g, ya)), rtol=1e-10, atol=1e-14)
    flat = x.reshape(-1)
    np.testing.assert_allclose(py.gelu_fwd(flat), np.asarray(cy.gelu_fwd(flat)), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(py.gelu_bwd(flat, flat), np.asarray(cy.gelu_bwd(flat, flat)), rtol=1e-12, atol=1e-15)


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")


# -- matmul / linear / elementwise -------------------------------------------------

def test_matmul_identity_and_arithmetic():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    np.testing.assert_array_equal(matmul(Tensor(m), Tensor([[5.0], [6.0]])).data, [[17.0], [39.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_ones_bt(rng):
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 5)))
    with GradTape() as tape:
        tape.watch({"a": a})
        loss = reduce_sum(matmul(a, b))
    np.testing.assert_allclose(tape.backward(loss)["a"], np.ones((3, 5)) @ b.data.T)


def test_linear_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_gelu_zero():
    assert gelu(Tensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]


def test_layer_norm_constant_vector():
    out = layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.arange(5.0)))
    np.testing.assert_allclose(out.data, np.tile(np.arange(5.0), (2, 1)), atol=1e-12)


# -- softmax ------------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, 0.25)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-20, 20)), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x + c)).data, atol=1e-12)


def test_softmax_single_valid_position():
    valid = np.array([[False, True, False]])
    np.testing.assert_array_equal(softmax(Tensor(np.random.default_rng(0).normal(size=(1, 3))),
                                          valid=valid).data, [[0.0, 1.0, 0.0]])


def test_softmax_axis_zero_matches_transpose(rng):
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(softmax(Tensor(x), axis=0).data, softmax(Tensor(x.T)).data.T)


# -- attention ---------------------------------------------------------------------

def _mha_params(d=8, zero_out=False, seed=0):
    p = {}
    L.init_mha(p, "a", np.random.default_rng(seed), d, zero_out=zero_out)
    return p


def test_mha_single_key_ignores_query(rng):
    p = _mha_params()
    kv = Tensor(rng.normal(size=(1, 1, 8)))
    a = mha(p, "a", Tensor(rng.normal(size=(1, 3, 8))), kv, kv, 2).data
    np.testing.assert_allclose(a, np.broadcast_to(a[:, :1], a.shape), atol=1e-12)


def test_mha_masked_key_never_contributes(rng):
    p = _mha_params()
    q, k, v = (rng.normal(size=(2, 3, 8)) for _ in range(3))
    valid = np.ones((2, 3), bool)
    valid[:, 1] = False
    base = mha(p, "a", Tensor(q), Tensor(k), Tensor(v), 2, valid).data
    k[:, 1] += 100.0
    v[:, 1] -= 50.0
    np.testing.assert_array_equal(mha(p, "a", Tensor(q), Tensor(k), Tensor(v), 2, valid).data, base)


def test_mha_key_permutation(rng):
    p = _mha_params()
    q, k, v = (rng.normal(size=(1, 5, 8)) for _ in range(3))
    valid = np.array([[True, False, True, True, False]])
    perm = np.array([3, 0, 4, 1, 2])
    a = mha(p, "a", Tensor(q), Tensor(k), Tensor(v), 4, valid).data
    b = mha(p, "a", Tensor(q), Tensor(k[:, perm]), Tensor(v[:, perm]), 4, valid[:, perm]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_mha_indivisible_heads():
    p = _mha_params()
    x = Tensor(np.ones((1, 2, 8)))
    with pytest.raises(ConfigError):
        mha(p, "a", x, x, x, 3)


# -- tape ------------------------------------------------------------------------------

def test_sum_of_squares_gradient(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    err = finite_diff_check(lambda p: reduce_sum(p["x"] * p["x"]), {"x": x})
    assert err < 1e-8
    with GradTape() as tape:
        tape.watch({"x": x})
        loss = reduce_sum(x * x)
    np.testing.assert_allclose(tape.backward(loss)["x"], 2 * x.data)


def test_unused_parameter_gradient_exactly_zero(rng):
    x, y = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    with GradTape() as tape:
        tape.watch({"x": x, "y": y})
        loss = reduce_sum(x * 2.0)
    g = tape.backward(loss)
    assert np.all(g["y"] == 0.0)


def test_non_scalar_loss():
    x = Tensor(np.ones(3))
    with GradTape() as tape:
        tape.watch({"x": x})
        out = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(out)


def test_composite_gradcheck(rng):
    params = {
        "w": Tensor(rng.normal(size=(4, 5))),
        "b": Tensor(rng.normal(size=5)),
        "g": Tensor(1 + 0.1 * rng.normal(size=5)),
        "c": Tensor(rng.normal(size=5)),
    }
    x = Tensor(rng.normal(size=(2, 3, 4)))
    valid = rng.random((2, 3, 5)) > 0.2

    def f(p):
        h = gelu(linear(x, p["w"], p["b"]))
        h = layer_norm(h, p["g"], p["c"])
        s = softmax(h, axis=-1, valid=valid)
        z = cumsum(concat([s, h], axis=1), axis=1)
        m = min_select(reduce_mean(getitem(z, (slice(None), slice(0, 4))) * z[:, :4], axis=-1), axis=1)
        return reduce_sum(reshape(m, (2,)))

    assert finite_diff_check(f, params) < 1e-5


@pytest.mark.parametrize("n_heads", [1, 2])
def test_mha_gradcheck(rng, n_heads):
    p = _mha_params(d=4, seed=3)
    q = Tensor(rng.normal(size=(2, 3, 4)))
    kv = Tensor(rng.normal(size=(2, 4, 4)))
    valid = np.array([[True, True, False, True], [False, False, False, False]])

    def f(params):
        out = mha(params, "a", q, kv, kv, n_heads, valid)
        return reduce_sum(out * out)

    assert finite_diff_check(f, p) < 1e-5


# -- optimiser --------------------------------------------------------------------

def test_adam_zero_gradient_no_move():
    x = Tensor(np.array([1.0, -2.0]))
    adam_step(AdamState(), {"x": x}, {"x": np.zeros(2)}, 0)
    np.testing.assert_array_equal(x.data, [1.0, -2.0])


def test_adam_first_step_magnitude():
    x = Tensor(np.array([0.0]))
    adam_step(AdamState(base_lr=1e-3), {"x": x}, {"x": np.array([1.0])}, 0)
    np.testing.assert_allclose(x.data, [-1e-3], rtol=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"x": Tensor(np.zeros(2))}, {"x": np.zeros(3)}, 0)


def test_step_decay_schedule():
    assert step_decay_lr(23, 30) == pytest.approx(1e-4)
    assert all(step_decay_lr(e, 30) == pytest.approx(1e-5) for e in range(24, 30))


# -- checkpoint -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": Tensor(rng.normal(size=(3, 4))), "b": Tensor(rng.normal(size=7))}
    digest = "ab" * 32
    save_checkpoint(tmp_path / "c.otck", params, digest)
    back, d = load_checkpoint(tmp_path / "c.otck")
    assert d == digest and list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k].data, params[k].data.astype(np.float32))


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"nope" + bytes(40))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
