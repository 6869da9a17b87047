import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference
from vaegrad.numeric import (AdamState, RandomSource, Tape, adam_step, apply_activation,
                             flatten, gaussian_sample, grad_check, unflatten)


# --- random streams -------------------------------------------------------


def test_zero_std_returns_mean():
    out = gaussian_sample(RandomSource(1), [1.0, 2.0], [0.0, 0.0])
    assert out.tolist() == [1.0, 2.0]


def test_same_seed_same_draws():
    a = gaussian_sample(RandomSource(7), np.zeros(5), np.ones(5))
    b = gaussian_sample(RandomSource(7), np.zeros(5), np.ones(5))
    assert np.array_equal(a, b)


def test_standard_normal_moments():
    x = gaussian_sample(RandomSource(3), np.zeros(100_000), np.ones(100_000))
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_shape_mismatch_and_negative_std():
    with pytest.raises(ValueError):
        gaussian_sample(RandomSource(0), np.zeros(2), np.ones(3))
    with pytest.raises(ValueError):
        gaussian_sample(RandomSource(0), np.zeros(2), np.array([1.0, -1.0]))


def test_child_streams_ignore_parent_history_and_order():
    root = RandomSource(11)
    first = root.child("a", 3).normal(4)
    root.normal(1000)
    root.child("b").normal(10)
    again = RandomSource(11).child("a", 3).normal(4)
    assert np.array_equal(first, again)
    assert not np.array_equal(root.child("a", 3).normal(4), root.child("a", 4).normal(4))


def test_chunked_draws_concatenate_to_one_draw():
    whole = RandomSource(5).child("x").normal((12, 3))
    src = RandomSource(5).child("x")
    parts = np.concatenate([src.normal((5, 3)), src.normal((7, 3))])
    assert np.array_equal(whole, parts)


# --- tape -----------------------------------------------------------------


def _mlp_loss(x, y, layout):
    def loss(tape, p):
        P = unflatten(p, layout)
        h = (tape.var(x) @ P["W1"] + P["b1"]).tanh()
        out = h @ P["W2"] + P["b2"]
        return (out - y).square().mean()
    return loss


def test_quadratic_gradient_exact():
    p = RandomSource(0).normal(30)
    err = grad_check(lambda tape, v: v.square().sum(), p, RandomSource(1))
    assert err < 1e-6


def test_tiny_mlp_gradient():
    rng = RandomSource(2)
    x, y = rng.child("x").normal((6, 3)), rng.child("y").normal((6, 2))
    params = {"W1": rng.child("W1").normal((3, 4)), "b1": rng.child("b1").normal(4),
              "W2": rng.child("W2").normal((4, 2)), "b2": rng.child("b2").normal(2)}
    flat, layout = flatten(params)
    assert grad_check(_mlp_loss(x, y, layout), flat, RandomSource(3)) < 1e-4


def test_constant_loss_zero_gradient():
    p = np.arange(5.0)
    tape = Tape()
    v = tape.var(p)
    out = (v * 0.0).sum() + 3.0
    tape.backward(out)
    assert np.array_equal(v.grad, np.zeros(5))
    assert grad_check(lambda t, q: (q * 0.0).sum() + 3.0, p, RandomSource(0)) == 0.0


@pytest.mark.parametrize("op", ["exp", "tanh", "relu", "sigmoid", "square"])
def test_elementwise_ops_against_finite_differences(op):
    x = RandomSource(4).normal((3, 4)) + 0.05  # keep relu away from the kink
    w = RandomSource(5).normal((3, 4))

    def f(arr):
        tape = Tape()
        return float((getattr(tape.var(arr), op)() * w).sum().value)

    tape = Tape()
    v = tape.var(x)
    tape.backward((getattr(v, op)() * w).sum())
    np.testing.assert_allclose(v.grad, central_difference(f, x), rtol=1e-6, atol=1e-8)


def test_broadcast_indexing_and_matmul_gradients():
    rng = RandomSource(6)
    A, B, c = rng.child(1).normal((4, 3)), rng.child(2).normal((3, 5)), rng.child(3).normal(5)
    idx = np.array([0, 2, 2, 3])

    def build(tape, a, b, cc):
        return ((a @ b + cc)[idx] - 1.0).square().mean() + (2.0 - a).exp().sum() * 0.01

    tape = Tape()
    va, vb, vc = tape.var(A), tape.var(B), tape.var(c)
    tape.backward(build(tape, va, vb, vc))
    for arr, var, which in [(A, va, 0), (B, vb, 1), (c, vc, 2)]:
        def f(x, which=which):
            args = [A, B, c]
            args[which] = x
            t = Tape()
            return float(build(t, *[t.var(a) for a in args]).value)
        np.testing.assert_allclose(var.grad, central_difference(f, arr), rtol=1e-5, atol=1e-7)


def test_apply_activation_matches_on_arrays_and_vars():
    x = np.linspace(-2, 2, 7)
    for name in ["identity", "tanh", "relu", "sigmoid"]:
        tape = Tape()
        np.testing.assert_array_equal(apply_activation(name, tape.var(x)).value,
                                      apply_activation(name, x))
    with pytest.raises(ValueError):
        apply_activation("softplus", x)


# --- Adam -----------------------------------------------------------------


def test_zero_gradient_is_identity():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState(lr=0.1)
    out = adam_step(p, {"w": np.zeros(2)}, st_)
    assert np.array_equal(out["w"], p["w"])
    assert st_.t == 1


def test_first_step_is_lr_times_sign():
    p = {"w": np.zeros(3)}
    g = np.array([0.5, -3.0, 1e-3])
    out = adam_step(p, {"w": g}, AdamState(lr=1e-3))
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(out["w"], expected, rtol=1e-12)
    np.testing.assert_allclose(np.abs(out["w"]), 1e-3, rtol=1e-4)


def test_zero_learning_rate():
    p = {"w": np.array([0.3, 0.4])}
    st_ = AdamState(lr=0.0)
    for _ in range(3):
        p2 = adam_step(p, {"w": np.array([1.0, -1.0])}, st_)
    assert np.array_equal(p2["w"], p["w"])
    assert st_.t == 3
    assert np.all(st_.v["w"] >= 0)


def test_non_finite_gradient_names_index():
    with pytest.raises(FloatingPointError, match="index 2"):
        adam_step({"w": np.zeros(4)}, {"w": np.array([0, 1, np.nan, 0.0])}, AdamState())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6),
       st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6))
def test_adam_zero_grads_never_move_params(vals, _):
    p = {"w": np.array(vals)}
    st_ = AdamState(lr=0.5)
    for _ in range(3):
        p = adam_step(p, {"w": np.zeros(len(vals))}, st_)
    assert np.array_equal(p["w"], np.array(vals))


def test_flatten_roundtrip():
    params = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([7.0])}
    flat, layout = flatten(params)
    back = unflatten(flat, layout)
    assert all(np.array_equal(back[k], params[k]) for k in params)
