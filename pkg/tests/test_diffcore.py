import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajcast import diffcore as dc


def finite_diff(f, x0, eps=1e-6):
    """Central finite differences of a scalar function over a flat array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.ravel()
    for k in range(flat.size):
        bump = np.zeros_like(flat)
        bump[k] = eps
        g.ravel()[k] = (f((flat + bump).reshape(x0.shape)) - f((flat - bump).reshape(x0.shape))) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def test_mul_elementwise():
    tape = dc.Tape()
    a = tape.leaf([1.0, 2.0, 3.0])
    b = tape.leaf([4.0, 5.0, 6.0])
    np.testing.assert_array_equal(dc.mul(a, b).value, [4.0, 10.0, 18.0])


def test_softmax_uniform_on_equal_inputs():
    tape = dc.Tape()
    x = tape.leaf([0.0, 0.0, 0.0])
    np.testing.assert_allclose(dc.softmax(x).value, np.full(3, 1.0 / 3.0), rtol=0, atol=1e-15)


def test_matmul_ones_counts_inner_dim():
    tape = dc.Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((3, 2)))
    np.testing.assert_array_equal(dc.matmul(a, b).value, np.full((2, 2), 3.0))


def test_matmul_shape_mismatch_message():
    tape = dc.Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((4, 2)))
    with pytest.raises(dc.DiffError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        dc.matmul(a, b)


def test_elementwise_shape_mismatch():
    tape = dc.Tape()
    a = tape.leaf(np.ones(3))
    b = tape.leaf(np.ones(4))
    with pytest.raises(dc.DiffError, match="add"):
        dc.add(a, b)


def test_leading_batch_broadcast():
    tape = dc.Tape()
    a = tape.leaf(np.arange(6.0).reshape(2, 3))
    b = tape.leaf([1.0, 1.0, 1.0])
    out = dc.add(a, b)
    np.testing.assert_array_equal(out.value, np.arange(6.0).reshape(2, 3) + 1.0)
    grads = dc.backward(dc.sum(out))
    np.testing.assert_array_equal(grads[b], [2.0, 2.0, 2.0])


def test_grad_sum_of_squares():
    tape = dc.Tape()
    x = tape.leaf([1.0, 2.0, 3.0])
    root = dc.sum(dc.square(x))
    np.testing.assert_array_equal(dc.backward(root)[x], [2.0, 4.0, 6.0])


def test_grad_constant_root_is_zero():
    tape = dc.Tape()
    x = tape.leaf([1.0, 2.0])
    root = dc.sum(dc.square(tape.leaf([3.0])))
    np.testing.assert_array_equal(dc.backward(root)[x], [0.0, 0.0])


def test_backward_requires_scalar_root():
    tape = dc.Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(dc.DiffError, match="scalar"):
        dc.backward(dc.square(x))


def test_grad_tanh_matmul_vs_finite_diff():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(4, 3))
    x0 = rng.normal(size=3)

    def f(w_flat):
        tape = dc.Tape()
        w = tape.leaf(w_flat.reshape(4, 3))
        return float(dc.sum(dc.tanh(dc.matmul(w, x0))).value)

    tape = dc.Tape()
    w = tape.leaf(w0)
    root = dc.sum(dc.tanh(dc.matmul(w, x0)))
    analytic = dc.backward(root)[w]
    numeric = finite_diff(f, w0.ravel()).reshape(4, 3)
    assert rel_err(analytic, numeric) < 1e-6


@pytest.mark.parametrize(
    "build",
    [
        lambda t, x: dc.sum(dc.exp(dc.mul(x, 0.3))),
        lambda t, x: dc.sum(dc.log(dc.add(dc.square(x), 1.0))),
        lambda t, x: dc.sum(dc.sigmoid(x)),
        lambda t, x: dc.sum(dc.mul(dc.softmax(x), np.arange(1.0, 6.0))),
        lambda t, x: dc.mean(dc.square(dc.sub(x, 0.5))),
        lambda t, x: dc.sum(dc.clip(x, -0.5, 0.5)),
        lambda t, x: dc.sum(dc.square(dc.concat([dc.narrow(x, 0, 0, 2), dc.narrow(x, 0, 3, 2)]))),
        lambda t, x: dc.sum(dc.square(dc.reshape(x, (5, 1)))),
    ],
)
def test_composite_grads_match_finite_diff(build):
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=5)

    def f(xa):
        tape = dc.Tape()
        return float(build(tape, tape.leaf(xa)).value)

    tape = dc.Tape()
    x = tape.leaf(x0)
    analytic = dc.backward(build(tape, x))[x]
    numeric = finite_diff(f, x0)
    assert rel_err(analytic, numeric) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    tape = dc.Tape()
    out = dc.softmax(tape.leaf(values)).value
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) <= 1e-12


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=6)

    def run():
        tape = dc.Tape()
        x = tape.leaf(x0)
        y = dc.tanh(dc.mul(x, 1.3))
        root = dc.sum(dc.mul(y, dc.sigmoid(x)))
        return dc.backward(root)[x]

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_fanout_diamond_sums_path_gradients():
    # root = x*x + 3x reuses x on two paths; d/dx = 2x + 3
    tape = dc.Tape()
    x = tape.leaf(np.asarray(2.0))
    root = dc.add(dc.mul(x, x), dc.mul(x, 3.0))
    assert float(dc.backward(root)[x]) == pytest.approx(7.0)


def test_forward_op_dispatch_and_unknown():
    tape = dc.Tape()
    x = tape.leaf([1.0, 2.0])
    np.testing.assert_array_equal(dc.forward_op("add", x, x).value, [2.0, 4.0])
    with pytest.raises(dc.DiffError, match="unknown"):
        dc.forward_op("conv2d", x)


def test_finite_check_catches_overflow():
    tape = dc.Tape()
    x = tape.leaf([800.0])
    with pytest.raises(dc.DiffError, match="exp"):
        dc.exp(x)


def test_log_rejects_nonpositive():
    tape = dc.Tape()
    with pytest.raises(dc.DiffError, match="log"):
        dc.log(tape.leaf([0.0]))


def test_narrow_bounds_checked():
    tape = dc.Tape()
    x = tape.leaf(np.arange(4.0))
    with pytest.raises(dc.DiffError, match="narrow"):
        dc.narrow(x, 0, 2, 5)


def test_mixed_tapes_rejected():
    a = dc.Tape().leaf([1.0])
    b = dc.Tape().leaf([1.0])
    with pytest.raises(dc.DiffError, match="tapes"):
        dc.add(a, b)


class TestGRUCell:
    def _params(self, tape, hid, inp, scale=0.0, rng=None):
        if rng is None:
            w_x = np.full((3 * hid, inp), scale)
            w_h = np.full((3 * hid, hid), scale)
            b = np.full(3 * hid, scale)
        else:
            w_x = rng.normal(size=(3 * hid, inp)) * 0.4
            w_h = rng.normal(size=(3 * hid, hid)) * 0.4
            b = rng.normal(size=3 * hid) * 0.1
        return tape.leaf(w_x), tape.leaf(w_h), tape.leaf(b)

    def test_zero_everything_gives_zero_state(self):
        tape = dc.Tape()
        w_x, w_h, b = self._params(tape, 4, 3)
        h = dc.gru_cell(np.zeros(3), tape.leaf(np.zeros(4)), w_x, w_h, b)
        np.testing.assert_array_equal(h.value, np.zeros(4))

    def test_zero_params_keep_zero_state_under_iteration(self):
        tape = dc.Tape()
        w_x, w_h, b = self._params(tape, 4, 3)
        h = tape.leaf(np.zeros(4))
        rng = np.random.default_rng(1)
        for _ in range(5):
            h = dc.gru_cell(rng.normal(size=3), h, w_x, w_h, b)
        np.testing.assert_array_equal(h.value, np.zeros(4))

    def test_width_mismatch(self):
        tape = dc.Tape()
        w_x, w_h, b = self._params(tape, 4, 3)
        with pytest.raises(dc.DiffError, match="gru_cell"):
            dc.gru_cell(np.zeros(5), tape.leaf(np.zeros(4)), w_x, w_h, b)

    def test_param_grads_match_finite_diff(self):
        rng = np.random.default_rng(11)
        hid, inp = 4, 3
        x0 = rng.normal(size=inp)
        h0 = rng.normal(size=hid)
        theta = {
            "w_x": rng.normal(size=(3 * hid, inp)) * 0.4,
            "w_h": rng.normal(size=(3 * hid, hid)) * 0.4,
            "b": rng.normal(size=3 * hid) * 0.1,
        }

        def run(vals, want_grads=False):
            tape = dc.Tape()
            leaves = {k: tape.leaf(v) for k, v in vals.items()}
            root = dc.sum(dc.gru_cell(x0, tape.leaf(h0), leaves["w_x"], leaves["w_h"], leaves["b"]))
            if not want_grads:
                return float(root.value)
            g = dc.backward(root)
            return {k: g[leaves[k]] for k in leaves}

        analytic = run(theta, want_grads=True)
        for name, v in theta.items():
            def f(flat, name=name, v=v):
                trial = dict(theta)
                trial[name] = flat.reshape(v.shape)
                return run(trial)

            numeric = finite_diff(f, v.ravel()).reshape(v.shape)
            assert rel_err(analytic[name], numeric) < 1e-5, name


def test_record_false_skips_graph():
    tape = dc.Tape(record=False)
    x = tape.leaf([1.0, 2.0])
    y = dc.sum(dc.square(x))
    assert y.parents == ()
    with pytest.raises(dc.DiffError, match="record"):
        dc.backward(y)
