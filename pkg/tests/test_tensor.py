import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import cite.tensor as T
from cite.errors import DimensionError, NumericError, StateError, ValidationError
from cite.tensor import BatchNormState, Tape, Tensor, batch_norm, grad_check


def run(op, *args, **kwargs):
    return op(None, *args, **kwargs).data


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def test_affine_identity_input():
    out = run(T.affine, Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]),
              Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out, [[1, 2], [3, 4]])


def test_affine_hand_arithmetic():
    out = run(T.affine, Tensor([[1.0, 1.0]]), Tensor([[1, 2], [3, 4]]),
              Tensor([10.0, 10.0]))
    np.testing.assert_array_equal(out, [[14.0, 16.0]])


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        run(T.affine, Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))), None)


def test_affine_backward_column_sums():
    # loss = sum(x @ W) with x all-ones: dW[k, j] = sum_i x[i, k] = n
    x = Tensor(np.ones((3, 2)))
    w = Tensor(np.zeros((2, 4)), trainable=True)
    tape = Tape()
    loss = T.sum_all(tape, T.affine(tape, x, w, None))
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, np.full((2, 4), 3.0))


def test_untouched_parameter_gets_no_gradient():
    x = Tensor(np.ones((2, 2)))
    w = Tensor(np.ones((2, 2)), trainable=True)
    unused = Tensor(np.ones((2, 2)), name="unused", trainable=True)
    tape = Tape()
    loss = T.sum_all(tape, T.affine(tape, x, w, None))
    tape.backward(loss)
    assert unused.grad is None  # treated as zero downstream


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(run(T.relu, Tensor([[-1.0, 2.0]])), [[0.0, 2.0]])
    np.testing.assert_array_equal(run(T.relu, Tensor([[-3.0, -0.1]])), [[0.0, 0.0]])


def test_relu_backward_matches_finite_differences():
    x = Tensor(np.array([[-1.0, 2.0]]))
    tape = Tape()
    out = T.relu(tape, x)
    loss = T.sum_all(tape, out)  # upstream gradient of ones
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])
    err = grad_check(
        lambda tape: T.sum_all(tape, T.relu(tape, x)), {"x": x}, h=1e-6)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def test_batch_norm_constant_column_train():
    state = BatchNormState(1)
    out = run(batch_norm, Tensor([[5.0], [5.0], [5.0]]), state, "train")
    np.testing.assert_allclose(out, np.zeros((3, 1)), atol=1e-12)


def test_batch_norm_two_point_column():
    state = BatchNormState(1, eps=1e-12)
    out = run(batch_norm, Tensor([[1.0], [3.0]]), state, "train")
    np.testing.assert_allclose(out, [[-1.0], [1.0]], atol=1e-6)


def test_batch_norm_infer_identity_stats():
    state = BatchNormState(3)
    x = np.array([[0.3, -1.0, 2.0], [4.0, 0.0, -2.5]])
    out = run(batch_norm, Tensor(x), state, "infer")
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_batch_norm_train_requires_two_rows():
    with pytest.raises(ValidationError):
        run(batch_norm, Tensor([[1.0, 2.0]]), BatchNormState(2), "train")


def test_batch_norm_train_normalizes_columns(rng):
    x = rng.normal(loc=3.0, scale=2.5, size=(50, 4))
    state = BatchNormState(4)
    out = run(batch_norm, Tensor(x), state, "train")
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)


def test_batch_norm_updates_running_stats(rng):
    x = rng.normal(loc=2.0, size=(100, 2))
    state = BatchNormState(2)
    run(batch_norm, Tensor(x), state, "train")
    expected_mean = 0.9 * 0.0 + 0.1 * x.mean(axis=0)
    expected_var = 0.9 * 1.0 + 0.1 * x.var(axis=0)
    np.testing.assert_allclose(state.running_mean, expected_mean)
    np.testing.assert_allclose(state.running_var, expected_var)


def test_batch_norm_train_gradient(rng):
    x = Tensor(rng.normal(size=(7, 3)))
    w = Tensor(rng.normal(size=(7, 3)))

    def loss_fn(tape):
        state = BatchNormState(3)  # fresh state: stat update is a side effect
        state.gamma.data[:] = [1.2, 0.8, 1.0]
        state.beta.data[:] = [0.1, 0.0, -0.3]
        return T.sum_all(tape, T.hadamard(tape, batch_norm(tape, x, state, "train"), w))

    assert grad_check(loss_fn, {"x": x}, h=1e-6) < 1e-6


# ---------------------------------------------------------------------------
# l2 normalize / hadamard
# ---------------------------------------------------------------------------

def test_l2_normalize_examples():
    np.testing.assert_allclose(
        run(T.l2_normalize_rows, Tensor([[3.0, 4.0]])), [[0.6, 0.8]])
    unit = np.array([[1.0, 0.0]])
    np.testing.assert_allclose(run(T.l2_normalize_rows, Tensor(unit)), unit)
    zero = np.zeros((1, 3))
    np.testing.assert_array_equal(run(T.l2_normalize_rows, Tensor(zero)), zero)


def test_l2_normalize_idempotent(rng):
    x = rng.normal(size=(6, 4))
    once = run(T.l2_normalize_rows, Tensor(x))
    twice = run(T.l2_normalize_rows, Tensor(once))
    np.testing.assert_allclose(twice, once, atol=1e-9)


def test_hadamard_examples():
    a = np.array([[2.0, 3.0]])
    np.testing.assert_array_equal(
        run(T.hadamard, Tensor(a), Tensor(np.ones((1, 2)))), a)
    np.testing.assert_array_equal(
        run(T.hadamard, Tensor([[2.0, 3.0]]), Tensor([[4.0, 5.0]])), [[8.0, 15.0]])
    with pytest.raises(DimensionError):
        run(T.hadamard, Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(
        run(T.softmax_rows, Tensor([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(
        run(T.softmax_rows, Tensor([[math.log(1.0), math.log(3.0)]])),
        [[0.25, 0.75]], atol=1e-12)
    out = run(T.softmax_rows, Tensor([[12.0, 1012.0]]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1), st.floats(-50.0, 50.0))
def test_softmax_rows_sum_and_shift_invariance(seed, shift):
    x = np.random.default_rng(seed).normal(size=(3, 5)) * 3.0
    s1 = run(T.softmax_rows, Tensor(x))
    np.testing.assert_allclose(s1.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((s1 > 0.0) & (s1 < 1.0))
    s2 = run(T.softmax_rows, Tensor(x + shift))
    np.testing.assert_allclose(s1, s2, atol=1e-9)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_logistic_loss_zero_score():
    loss = run(T.logistic_loss, Tensor([[0.0]]), np.array([[1.0]]))
    np.testing.assert_allclose(loss, math.log(2.0), atol=1e-12)


def test_logistic_loss_hand_values():
    pos = run(T.logistic_loss, Tensor([[2.0]]), np.array([[1.0]]))
    np.testing.assert_allclose(pos, math.log1p(math.exp(-2.0)), atol=1e-12)
    assert abs(float(pos) - 0.126928) < 1e-6
    neg = run(T.logistic_loss, Tensor([[2.0]]), np.array([[-1.0]]))
    np.testing.assert_allclose(neg, math.log1p(math.exp(2.0)), atol=1e-12)
    assert abs(float(neg) - 2.126928) < 1e-6


def test_logistic_loss_bad_label():
    with pytest.raises(ValidationError):
        run(T.logistic_loss, Tensor([[0.0]]), np.array([[0.5]]))


def test_logistic_loss_mask_skips_bad_labels():
    loss = run(T.logistic_loss, Tensor([[0.0, 7.0]]),
               np.array([[1.0, 0.0]]), mask=np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(loss, math.log(2.0), atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_logistic_loss_nonnegative_and_ln2_at_zero(seed):
    g = np.random.default_rng(seed)
    scores = g.normal(size=(4, 3)) * 5.0
    labels = g.choice([-1.0, 1.0], size=(4, 3))
    assert float(run(T.logistic_loss, Tensor(scores), labels)) >= 0.0
    zero = run(T.logistic_loss, Tensor(np.zeros((4, 3))), labels)
    np.testing.assert_allclose(zero, 12 * math.log(2.0), atol=1e-9)


def test_l1_norm_examples():
    assert float(run(T.l1_norm, Tensor(np.zeros((2, 2))))) == 0.0
    assert float(run(T.l1_norm, Tensor([[-1.0, 2.0], [3.0, -4.0]]))) == 10.0
    x = Tensor(np.array([[-1.0, 2.0]]))
    tape = Tape()
    loss = T.l1_norm(tape, x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[-1.0, 1.0]])


# ---------------------------------------------------------------------------
# tape mechanics
# ---------------------------------------------------------------------------

def test_backward_before_forward_is_state_error():
    with pytest.raises(StateError):
        Tape().backward(Tensor(np.asarray(0.0)))


def test_forward_determinism_bitwise(rng):
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    a = run(T.affine, Tensor(x), Tensor(w), None)
    b = run(T.affine, Tensor(x), Tensor(w), None)
    assert a.tobytes() == b.tobytes()


def test_tape_replay_reproduces_outputs(rng):
    x = Tensor(rng.normal(size=(3, 3)))
    w = Tensor(rng.normal(size=(3, 2)))
    first = T.relu(Tape(), T.affine(Tape(), x, w, None)).data
    second = T.relu(Tape(), T.affine(Tape(), x, w, None)).data
    assert first.tobytes() == second.tobytes()


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------

def test_grad_check_affine_logistic(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    w = Tensor(rng.normal(size=(4, 1)), name="w", trainable=True)
    b = Tensor(rng.normal(size=1), name="b", trainable=True)
    labels = rng.choice([-1.0, 1.0], size=(5, 1))

    def loss_fn(tape):
        return T.logistic_loss(tape, T.affine(tape, x, w, b), labels)

    assert grad_check(loss_fn, {"w": w, "b": b, "x": x}) < 1e-6


def test_grad_check_excludes_relu_kink_coordinates():
    # x[0, 0] sits exactly on the relu kink; excluded, the check passes.
    x = Tensor(np.array([[0.0, 1.5], [-2.0, 0.7]]))
    w = Tensor(np.array([[1.0, -1.0], [0.5, 2.0]]))

    def loss_fn(tape):
        return T.sum_all(tape, T.hadamard(tape, T.relu(tape, x), w))

    exclude = {"x": x.data == 0.0}
    assert grad_check(loss_fn, {"x": x}, exclude=exclude) < 1e-6


def test_grad_check_rejects_nonfinite_loss():
    x = Tensor(np.array([[np.inf]]))
    with pytest.raises(NumericError):
        grad_check(lambda tape: T.sum_all(tape, x), {"x": x})


def test_grad_check_catches_wrong_gradient(monkeypatch):
    # A deliberately broken backward must fail at every refinement step.
    x = Tensor(np.array([[0.7, -0.3], [0.2, 1.1]]), name="x")

    def bad_loss(tape):
        out = Tensor(x.data * 3.0)
        if tape is not None:
            def backward():
                if out.grad is not None:
                    x.grad = (x.grad if x.grad is not None else 0) + out.grad * 2.9
            tape.record("bad_scale", backward)
        return T.sum_all(tape, out) if tape is not None else T.sum_all(None, out)

    assert grad_check(bad_loss, {"x": x}) > 1e-3
