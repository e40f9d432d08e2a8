import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import max_rel_err, numeric_grad
from iosda import diffcore as dc
from iosda.errors import DataError, ShapeError


def test_identity_layer_forward():
    spec = dc.MlpSpec((2, 2))
    params = {"l0.W": np.eye(2), "l0.b": np.zeros((1, 2))}
    out, _ = dc.forward(spec, params, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_leaky_relu_scalar():
    spec = dc.MlpSpec((1, 1), output_activation="leaky_relu", slope=0.01)
    params = {"l0.W": np.ones((1, 1)), "l0.b": np.zeros((1, 1))}
    out, _ = dc.forward(spec, params, np.array([[-1.0]]))
    assert out[0, 0] == pytest.approx(-0.01, abs=1e-15)


def test_two_layer_matches_straight_line_arithmetic():
    spec = dc.MlpSpec((3, 4, 2))
    params = dc.init_params(spec, np.random.default_rng(0))
    x = np.ones((1, 3))
    out, _ = dc.forward(spec, params, x)
    # the same arithmetic written out with plain loops
    W0, b0, W1, b1 = (params[k] for k in ("l0.W", "l0.b", "l1.W", "l1.b"))
    hidden = []
    for j in range(4):
        a = sum(x[0, i] * W0[i, j] for i in range(3)) + b0[0, j]
        hidden.append(a if a > 0 else 0.01 * a)
    expect = [sum(hidden[i] * W1[i, j] for i in range(4)) + b1[0, j] for j in range(2)]
    np.testing.assert_allclose(out[0], expect, rtol=1e-14)


def test_forward_rejects_wrong_width():
    spec = dc.MlpSpec((3, 2))
    params = dc.init_params(spec, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        dc.forward(spec, params, np.ones((2, 4)))


def test_spec_validation():
    with pytest.raises(ShapeError):
        dc.MlpSpec((3,))
    with pytest.raises(ValueError):
        dc.MlpSpec((3, 2), slope=1.5)
    with pytest.raises(ShapeError):
        dc.MlpSpec((3, 2, 2), batch_norm=(True,))


def test_backward_sum_through_identity_gives_input_sums():
    spec = dc.MlpSpec((2, 2))
    params = {"l0.W": np.eye(2), "l0.b": np.zeros((1, 2))}
    x = np.array([[1.0, 2.0], [3.0, -4.0]])
    out, tape = dc.forward(spec, params, x)
    grads, gin = dc.backward(tape, params, np.ones_like(out))
    # d sum(xW) / dW_ij = sum over rows of x_i
    np.testing.assert_array_equal(grads["l0.W"], [[4.0, 4.0], [-2.0, -2.0]])
    np.testing.assert_array_equal(grads["l0.b"], [[2.0, 2.0]])
    np.testing.assert_array_equal(gin, np.ones_like(x))


def test_zero_upstream_gives_zero_grads():
    spec = dc.MlpSpec((3, 5, 2), batch_norm=(True, False))
    params = dc.init_params(spec, np.random.default_rng(1))
    out, tape = dc.forward(spec, params, np.random.default_rng(2).normal(size=(4, 3)))
    grads, gin = dc.backward(tape, params, np.zeros_like(out))
    assert all(not g.any() for g in grads.values())
    assert not gin.any()


def test_backward_shape_mismatch():
    spec = dc.MlpSpec((3, 2))
    params = dc.init_params(spec, np.random.default_rng(0))
    _, tape = dc.forward(spec, params, np.ones((4, 3)))
    with pytest.raises(ShapeError):
        dc.backward(tape, params, np.ones((4, 3)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("bn", [False, True])
def test_backward_matches_finite_differences(seed, bn):
    rng = np.random.default_rng(seed)
    spec = dc.MlpSpec((3, 5, 4, 2), batch_norm=(bn, bn, False))
    params = dc.init_params(spec, rng)
    for k in params:
        if "running" not in k:
            params[k] += rng.normal(scale=0.3, size=params[k].shape)
    x = rng.normal(size=(6, 3))
    weights = rng.normal(size=(6, 2))

    def loss():
        out, _ = dc.forward(spec, params, x)
        return float((weights * out).sum() + 0.5 * (out ** 2).sum())

    out, tape = dc.forward(spec, params, x)
    grads, gin = dc.backward(tape, params, weights + out)
    trainable = {k: params[k] for k in dc.trainable(params)}
    num = numeric_grad(loss, trainable)
    assert max_rel_err(grads, num) < 1e-4
    xs = {"x": x}
    num_x = numeric_grad(loss, xs)
    assert max_rel_err({"x": gin}, num_x) < 1e-4


def test_eval_mode_uses_running_stats_and_leaves_them():
    rng = np.random.default_rng(3)
    spec = dc.MlpSpec((2, 3), batch_norm=(True,))
    params = dc.init_params(spec, rng)
    x = rng.normal(loc=5.0, size=(32, 2))
    before = params["l0.running_mean"].copy()
    dc.forward(spec, params, x, train=True)
    assert not np.array_equal(before, params["l0.running_mean"])
    snap = {k: v.copy() for k, v in params.items()}
    a, _ = dc.forward(spec, params, x[:1], train=False)
    b, _ = dc.forward(spec, params, x[:1], train=False)
    np.testing.assert_array_equal(a, b)
    for k in params:
        np.testing.assert_array_equal(params[k], snap[k])


def test_batchnorm_running_update_momentum():
    spec = dc.MlpSpec((1, 1), batch_norm=(True,))
    params = {"l0.W": np.ones((1, 1)), "l0.b": np.zeros((1, 1)), "l0.gamma": np.ones((1, 1)),
              "l0.beta": np.zeros((1, 1)), "l0.running_mean": np.zeros((1, 1)), "l0.running_var": np.ones((1, 1))}
    dc.forward(spec, params, np.array([[1.0], [3.0]]))
    assert params["l0.running_mean"][0, 0] == pytest.approx(0.1 * 2.0)
    # unbiased batch variance of {1, 3} is 2
    assert params["l0.running_var"][0, 0] == pytest.approx(0.9 + 0.1 * 2.0)


@pytest.mark.parametrize("lam, expect", [(1.0, [-0.3, 0.1]), (0.5, [-0.15, 0.05]), (0.0, [0.0, 0.0])])
def test_grad_reverse(lam, expect):
    np.testing.assert_allclose(dc.grad_reverse(np.array([0.3, -0.1]), lam), expect, atol=1e-15)


def test_grad_reverse_rejects_negative():
    with pytest.raises(ValueError):
        dc.grad_reverse(np.ones(2), -1.0)


def test_grl_between_two_nets():
    # forward through a reversal node is the identity; only the input-side gradient flips
    rng = np.random.default_rng(4)
    first = dc.MlpSpec((3, 4))
    second = dc.MlpSpec((4, 2))
    p1, p2 = dc.init_params(first, rng), dc.init_params(second, rng)
    x = rng.normal(size=(5, 3))
    h, t1 = dc.forward(first, p1, x)
    out, t2 = dc.forward(second, p2, h)
    up = rng.normal(size=out.shape)
    g2, gh = dc.backward(t2, p2, up)
    plain, _ = dc.backward(t1, p1, gh)
    flipped, _ = dc.backward(t1, p1, dc.grad_reverse(gh, 0.7))
    for k in plain:
        np.testing.assert_allclose(flipped[k], -0.7 * plain[k], atol=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(dc.softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(dc.softmax_rows(np.array([[math.log(2), 0.0, 0.0]])), [[0.5, 0.25, 0.25]], atol=1e-15)
    big = dc.softmax_rows(np.array([[1000.0, 0.0, 0.0]]))
    assert np.all(np.isfinite(big))
    assert big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300 + 1e-12


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)),
                     elements=st.floats(-50, 50, allow_nan=False))


@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(logits, c):
    p = dc.softmax_rows(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)
    np.testing.assert_allclose(dc.softmax_rows(logits + c), p, atol=1e-9)


def test_nll_and_boundary_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(7, 4))
    targets = rng.integers(0, 4, size=7)

    for fn in (lambda: dc.nll_loss(logits, targets), lambda: dc.boundary_loss(logits, 0.5),
               lambda: dc.boundary_loss(logits, 0.3)):
        _, g = fn()
        num = numeric_grad(lambda: fn()[0], {"z": logits})
        assert max_rel_err({"z": g}, num) < 1e-6


def test_nll_of_uniform_is_log_c():
    loss, _ = dc.nll_loss(np.zeros((3, 5)), np.array([0, 2, 4]))
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_adam_zero_grad_leaves_params():
    params = {"w": np.array([[1.0, -2.0]])}
    state = dc.adam_init(params)
    dc.adam_step(params, {"w": np.zeros((1, 2))}, state)
    np.testing.assert_array_equal(params["w"], [[1.0, -2.0]])
    assert state.step == 1


def test_adam_first_step_is_lr():
    params = {"w": np.array([[0.5]])}
    state = dc.adam_init(params, lr=1e-3)
    dc.adam_step(params, {"w": np.ones((1, 1))}, state)
    # bias-corrected m and v are both 1 after one step
    assert params["w"][0, 0] == pytest.approx(0.5 - 1e-3 / (1.0 + 1e-8), abs=1e-15)


def test_adam_matches_closed_form_two_steps():
    params = {"w": np.array([[0.0]])}
    state = dc.adam_init(params, lr=0.1, beta1=0.5, beta2=0.9)
    dc.adam_step(params, {"w": np.array([[1.0]])}, state)
    dc.adam_step(params, {"w": np.array([[3.0]])}, state)
    m = 0.5 * 0.5 * 1 + 0.5 * 3
    v = 0.9 * 0.1 * 1 + 0.1 * 9
    step2 = 0.1 * (m / (1 - 0.25)) / (math.sqrt(v / (1 - 0.81)) + 1e-8)
    assert params["w"][0, 0] == pytest.approx(-0.1 / (1 + 1e-8) - step2, abs=1e-14)


def _train_trajectory(seed):
    rng = np.random.default_rng(seed)
    spec = dc.MlpSpec((4, 8, 3), batch_norm=(True, False))
    params = dc.init_params(spec, rng)
    state = dc.adam_init(params)
    x = rng.normal(size=(16, 4))
    y = rng.integers(0, 3, size=16)
    for _ in range(20):
        out, tape = dc.forward(spec, params, x)
        _, g = dc.nll_loss(out, y)
        grads, _ = dc.backward(tape, params, g)
        dc.adam_step(params, grads, state)
    return params


def test_training_is_deterministic():
    a, b = _train_trajectory(11), _train_trajectory(11)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_param_and_adam_roundtrip_bit_exact(tmp_path):
    params = _train_trajectory(3)
    dc.save_params(params, tmp_path / "p.bin")
    back = dc.load_params(tmp_path / "p.bin")
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    state = dc.adam_init(params, lr=0.0123)
    dc.adam_step(params, {k: np.ones_like(params[k]) for k in dc.trainable(params)}, state)
    dc.save_adam(state, tmp_path / "a.bin")
    st2 = dc.load_adam(tmp_path / "a.bin")
    assert (st2.lr, st2.beta1, st2.beta2, st2.eps, st2.step) == (state.lr, state.beta1, state.beta2, state.eps, state.step)
    for k in state.m:
        assert st2.m[k].tobytes() == state.m[k].tobytes()
        assert st2.v[k].tobytes() == state.v[k].tobytes()


def test_param_file_layout(tmp_path):
    dc.save_params({"ab": np.array([[1.5, -2.0]])}, tmp_path / "p.bin")
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:8] == b"IOSDPARM"
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12:16] == (2).to_bytes(4, "little") and raw[16:18] == b"ab"
    assert raw[18:26] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[26:], "<f8").tolist() == [1.5, -2.0]


def test_param_file_bad_magic(tmp_path):
    (tmp_path / "p.bin").write_bytes(b"NOTPARAMS")
    with pytest.raises(DataError):
        dc.load_params(tmp_path / "p.bin")
