import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panfield import diffmath as dm


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))


def check_against_fd(loss_fn, params, h=1e-5, tol=1e-6, probes=None, rng=None):
    """Tape gradient vs central differences on a float64 ParamVector."""
    assert params.values.dtype == np.float64
    _, grad = dm.forward_backward(loss_fn, params)
    if probes is None:
        idx = np.arange(params.size)
    else:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(params.size, size=min(probes, params.size), replace=False)
    fd = dm.fd_gradient(loss_fn, params, idx, h=h)
    err = rel_err(grad[idx], fd)
    assert err.max() < tol, f"max rel err {err.max():.3e} at {idx[err.argmax()]}"


# ---------------------------------------------------------------------------
# ParamVector


def test_paramvector_layout():
    pv = dm.ParamVector.build([("a", (2, 3)), ("b", (4,))])
    assert pv.size == 10
    assert pv.view("a").shape == (2, 3)
    pv.set("b", np.arange(4))
    assert pv.values[6:].tolist() == [0, 1, 2, 3]
    # views write through to the flat array
    pv.view("a")[1, 2] = 7.0
    assert pv.values[5] == 7.0


def test_paramvector_rejects_duplicate_names():
    with pytest.raises(ValueError):
        dm.ParamVector(
            [dm.Segment("x", (2,), 0), dm.Segment("x", (2,), 2)], np.zeros(4)
        )


def test_paramvector_copy_is_independent():
    pv = dm.ParamVector.build([("a", (3,))])
    cp = pv.copy()
    cp.values[0] = 5.0
    assert pv.values[0] == 0.0


# ---------------------------------------------------------------------------
# forward_backward basics (spec examples)


def test_sum_of_squares():
    pv = dm.ParamVector.build([("p", (2,))], dtype=np.float64)
    pv.set("p", [1.0, 2.0])
    loss, grad = dm.forward_backward(lambda v: dm.reduce_sum(dm.mul(v["p"], v["p"])), pv)
    assert loss == pytest.approx(5.0)
    np.testing.assert_allclose(grad, [2.0, 4.0])


def test_constant_loss_zero_grad():
    pv = dm.ParamVector.build([("p", (3,))], dtype=np.float64)
    loss, grad = dm.forward_backward(lambda v: 7.5, pv)
    assert loss == 7.5
    assert np.all(grad == 0)


def test_two_layer_mlp_matches_fd():
    rng = np.random.default_rng(3)
    pv = dm.ParamVector.build(
        [("w0", (5, 8)), ("b0", (8,)), ("w1", (8, 2)), ("b1", (2,))],
        dtype=np.float64,
    )
    pv.values[:] = rng.normal(0, 0.5, pv.size)
    x = rng.normal(0, 1, (7, 5))
    y = rng.normal(0, 1, (7, 2))

    def loss_fn(v):
        h = dm.relu(dm.add(dm.matmul(dm.Var(x), v["w0"]), v["b0"]))
        out = dm.add(dm.matmul(h, v["w1"]), v["b1"])
        return dm.mse(out, y)

    check_against_fd(loss_fn, pv, h=1e-4, tol=1e-4, probes=100)


def test_gradient_linearity():
    rng = np.random.default_rng(4)
    pv = dm.ParamVector.build([("p", (6,))], dtype=np.float64)
    pv.values[:] = rng.normal(0, 1, 6)
    t1 = rng.normal(0, 1, 6)
    t2 = rng.normal(0, 1, 6)

    def l1(v):
        return dm.mse(v["p"], t1)

    def l2(v):
        return dm.reduce_mean(dm.mul(dm.sin(v["p"]), t2))

    def combo(v):
        return dm.add(dm.mul(l1(v), 2.5), dm.mul(l2(v), -0.75))

    _, g1 = dm.forward_backward(l1, pv)
    _, g2 = dm.forward_backward(l2, pv)
    _, gc = dm.forward_backward(combo, pv)
    np.testing.assert_allclose(gc, 2.5 * g1 - 0.75 * g2, atol=1e-10)


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    pv = dm.ParamVector.build([("w", (4, 4)), ("b", (4,))])
    pv.values[:] = rng.normal(0, 1, pv.size).astype(np.float32)
    x = rng.normal(0, 1, (3, 4)).astype(np.float32)

    def loss_fn(v):
        return dm.reduce_mean(dm.sigmoid(dm.add(dm.matmul(dm.Var(x), v["w"]), v["b"])))

    l_a, g_a = dm.forward_backward(loss_fn, pv)
    l_b, g_b = dm.forward_backward(loss_fn, pv)
    assert l_a == l_b
    assert np.array_equal(g_a, g_b)


def test_forward_backward_leaves_no_cyclic_garbage():
    # The tape graph is cyclic (nodes reference their output Vars, Vars
    # reference the tape). forward_backward must dismantle it so training
    # loops free each step's buffers by refcount, not by the gc's schedule.
    import gc

    pv = dm.ParamVector.build([("w", (8, 8)), ("b", (8,))])
    pv.values[:] = 0.1

    def loss_fn(v):
        return dm.reduce_mean(dm.sigmoid(dm.add(dm.matmul(v["w"], v["w"]), v["b"])))

    dm.forward_backward(loss_fn, pv)
    gc.collect()
    gc.collect()
    for _ in range(3):
        dm.forward_backward(loss_fn, pv)
    assert gc.collect() == 0


# ---------------------------------------------------------------------------
# scalar ops (spec examples)


def test_softplus_values():
    assert dm.softplus(0.0) == pytest.approx(np.log(2.0))
    assert dm.softplus(100.0) == pytest.approx(100.0)
    assert dm.softplus(-5.0) == pytest.approx(0.006715348, abs=1e-9)
    # no overflow warnings on extreme inputs
    out = dm.softplus(np.array([-1e4, 1e4]))
    assert np.all(np.isfinite(out))


def test_softmax_cross_entropy_values():
    assert dm.softmax_cross_entropy(np.zeros(3), 1) == pytest.approx(np.log(3.0))
    assert dm.softmax_cross_entropy(np.array([10.0, -10.0]), 0) == pytest.approx(0.0, abs=1e-8)
    assert dm.softmax_cross_entropy(np.array([1.0, 2.0, 3.0]), 2) == pytest.approx(
        0.40760596, abs=1e-7
    )
    with pytest.raises(IndexError):
        dm.softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(ValueError):
        dm.softmax_cross_entropy(np.zeros(0), 0)


# ---------------------------------------------------------------------------
# per-op finite difference checks for the less obvious VJPs


def _probe_op(build, n, seed=0, tol=1e-6, h=1e-5):
    rng = np.random.default_rng(seed)
    pv = dm.ParamVector.build([("p", (n,))], dtype=np.float64)
    pv.values[:] = rng.normal(0, 1, n)
    check_against_fd(build, pv, h=h, tol=tol)


def test_fd_cumsum_exclusive():
    def loss(v):
        x = dm.reshape(v["p"], (3, 4))
        c = dm.cumsum_exclusive(x, axis=1)
        return dm.reduce_mean(dm.mul(c, c))

    _probe_op(loss, 12)


def test_cumsum_exclusive_first_entry_zero():
    x = np.arange(12, dtype=np.float64).reshape(3, 4)
    out = dm.cumsum_exclusive(x, axis=1)
    assert np.all(out[:, 0] == 0)
    np.testing.assert_allclose(out[:, 1:], np.cumsum(x, axis=1)[:, :-1])


def test_fd_weighted_reduce():
    f3 = np.random.default_rng(1).normal(0, 1, (2, 5, 3))

    def loss(v):
        w = dm.reshape(v["p"], (2, 5))
        return dm.reduce_mean(dm.weighted_reduce(w, dm.Var(f3)))

    _probe_op(loss, 10)

    def loss2(v):
        both = dm.reshape(v["p"], (2, 2, 5))
        w = dm.gather_rows(both, np.array([0]))
        f = dm.gather_rows(both, np.array([1]))
        return dm.reduce_mean(dm.weighted_reduce(dm.reshape(w, (2, 5)), dm.reshape(f, (2, 5))))

    _probe_op(loss2, 20)


def test_fd_normalize_rows():
    def loss(v):
        x = dm.reshape(v["p"], (4, 3))
        u = dm.normalize_rows(x)
        return dm.reduce_mean(dm.mul(u, np.arange(12).reshape(4, 3) / 6.0))

    _probe_op(loss, 12, seed=2)


def test_fd_gather_scatter_concat():
    idx = np.array([0, 2, 2, 1])

    def loss(v):
        x = dm.reshape(v["p"], (3, 2))
        g = dm.gather_rows(x, idx)
        s = dm.scatter_rows(g, np.array([1, 0, 3, 3]), 5)
        c = dm.concat([s, dm.mul(s, 0.5)], axis=1)
        return dm.reduce_mean(dm.mul(c, c))

    _probe_op(loss, 6, seed=3)


def test_fd_sigmoid_softplus_exp_trig():
    def loss(v):
        x = v["p"]
        return dm.reduce_mean(
            dm.add(
                dm.mul(dm.sigmoid(x), dm.softplus(x)),
                dm.mul(dm.exp(dm.mul(x, 0.1)), dm.add(dm.sin(x), dm.cos(x))),
            )
        )

    _probe_op(loss, 9, seed=4)


def test_fd_div_broadcast():
    def loss(v):
        x = dm.reshape(v["p"], (2, 3))
        denom = dm.add(dm.reduce_sum(dm.mul(x, x), axis=1, keepdims=True), 1.0)
        return dm.reduce_mean(dm.div(x, denom))

    _probe_op(loss, 6, seed=5)


def test_fd_cross_entropy_mean_masked():
    labels = np.array([0, 2, 1, 2])
    mask = np.array([True, False, True, True])

    def loss(v):
        logits = dm.reshape(v["p"], (4, 3))
        return dm.cross_entropy_mean(logits, labels, mask)

    _probe_op(loss, 12, seed=6)


def test_cross_entropy_mean_empty_mask_is_zero():
    logits = np.random.default_rng(0).normal(0, 1, (3, 4))
    assert dm.cross_entropy_mean(logits, np.zeros(3, dtype=int), np.zeros(3, bool)) == 0.0


def test_fd_project_so3():
    def loss(v):
        m = dm.reshape(v["p"], (3, 3))
        r = dm.project_so3(dm.add(m, np.eye(3) * 2.0))
        return dm.reduce_mean(dm.mul(r, np.arange(9).reshape(3, 3) / 4.0))

    _probe_op(loss, 9, seed=7, h=1e-6)


def test_project_so3_basics():
    np.testing.assert_allclose(dm.project_so3(np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(dm.project_so3(2.0 * np.eye(3)), np.eye(3), atol=1e-12)
    with pytest.raises(ValueError):
        dm.project_so3(np.diag([1.0, 1.0, 0.0]))


# ---------------------------------------------------------------------------
# tape mechanics


def test_ops_on_plain_arrays_return_plain():
    out = dm.add(np.ones(3), np.ones(3))
    assert isinstance(out, np.ndarray)
    assert not isinstance(out, dm.Var)


def test_untracked_vars_record_nothing():
    tape = dm.GradTape()
    a = dm.Var(np.ones(3))  # requires_grad False
    b = dm.mul(a, 2.0)
    assert isinstance(b, dm.Var) and not b.requires_grad
    assert len(tape.nodes) == 0


def test_mixing_tapes_raises():
    t1, t2 = dm.GradTape(), dm.GradTape()
    a = t1.leaf(np.ones(2))
    b = t2.leaf(np.ones(2))
    with pytest.raises(ValueError):
        dm.add(a, b)


def test_debug_flags_nonfinite_op():
    tape = dm.GradTape(debug=True)
    x = tape.leaf(np.array([1.0, 0.0]))
    with np.errstate(divide="ignore"):
        with pytest.raises(dm.NonFiniteError) as ei:
            dm.div(dm.Var(np.ones(2)), x)
    assert "div" in str(ei.value)


def test_backward_requires_scalar():
    tape = dm.GradTape()
    x = tape.leaf(np.ones(3))
    y = dm.mul(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


# ---------------------------------------------------------------------------
# light property checks


@given(st.floats(min_value=-50, max_value=50))
@settings(max_examples=40, deadline=None)
def test_softplus_nonnegative_and_dominates_relu(x):
    s = dm.softplus(x)
    assert s >= 0.0
    assert s >= max(x, 0.0) - 1e-12


@given(st.integers(min_value=1, max_value=5), st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_unbroadcast_add_grad_shapes(cols, seed):
    rng = np.random.default_rng(seed)
    pv = dm.ParamVector.build([("row", (1, cols)), ("mat", (3, cols))], dtype=np.float64)
    pv.values[:] = rng.normal(0, 1, pv.size)
    coeff = rng.normal(0, 1, (3, cols))

    def loss(v):
        return dm.reduce_mean(dm.mul(dm.add(v["mat"], v["row"]), coeff))

    _, grad = dm.forward_backward(loss, pv)
    assert grad.shape == (pv.size,)
    fd = dm.fd_gradient(loss, pv, np.arange(pv.size), h=1e-6)
    np.testing.assert_allclose(grad, fd, atol=1e-7)
