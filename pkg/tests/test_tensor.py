import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ropetp import tensor as T
from ropetp.tensor import ShapeError, Tensor, backward, grad_check


def leaf(x):
    return Tensor(x, requires_grad=True)


# ---------------------------------------------------------------- primitives

def test_matmul_identity_left(rng):
    A = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(T.matmul(np.eye(3), A).data, A)


def test_add_zero_tensor(rng):
    x = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(T.apply_primitive("add", x, np.zeros((2, 3))).data, x)


def test_matmul_against_triple_loop(rng):
    A, B = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                want[i, j] += A[i, k] * B[k, j]
    np.testing.assert_allclose(T.matmul(A, B).data, want, rtol=0, atol=1e-12)


def test_batched_matmul_with_shared_weight_matches_numpy(rng):
    a, w = rng.normal(size=(4, 5, 3)), rng.normal(size=(3, 2))
    np.testing.assert_allclose(T.matmul(a, w).data, a @ w, atol=1e-14)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4, 1\)"):
        T.concat([np.zeros((2, 3)), np.zeros((2, 4, 1))], axis=1)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(np.zeros((2, 3)), np.zeros(4))


def test_apply_primitive_dispatch_and_unknown():
    x = np.arange(6.0).reshape(2, 3)
    assert T.apply_primitive("sum", x).item() == 15.0
    np.testing.assert_array_equal(T.apply_primitive("slice", x, 1, 3).data, x[:, 1:3])
    np.testing.assert_array_equal(T.apply_primitive("concat", x, x, axis=0).data, np.concatenate([x, x]))
    with pytest.raises(ValueError, match="unknown primitive"):
        T.apply_primitive("conv", x)


def test_recorded_only_when_an_input_requires_grad():
    a = Tensor(np.ones(3))
    assert T.mul(a, 2.0)._backward is None
    b = leaf(np.ones(3))
    assert T.mul(b, 2.0)._backward is not None
    with T.no_grad():
        assert T.mul(b, 2.0)._backward is None


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(np.zeros(3)).data, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_large_logit_is_stable():
    np.testing.assert_allclose(T.softmax(np.array([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_extended_precision():
    x = [0.5, 1.5, -0.3]
    with mpmath.workdps(50):
        ex = [mpmath.exp(mpmath.mpf(v)) for v in x]
        tot = sum(ex)
        want = np.array([float(e / tot) for e in ex])
    np.testing.assert_allclose(T.softmax(np.array(x)).data, want, rtol=0, atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        T.softmax(np.array([0.0, np.inf]))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-300, 300, allow_nan=False)),
       st.sampled_from([0, 1, -1]))
def test_softmax_sums_to_one_property(x, axis):
    s = T.softmax(x, axis=axis).data
    assert np.all(s >= 0) and np.all(s <= 1)
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_collapses_to_bias():
    out = T.layer_norm(np.full((1, 3), 4.2), np.ones(3), np.zeros(3)).data
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_layer_norm_zero_gain_gives_bias(rng):
    bias = rng.normal(size=5)
    out = T.layer_norm(rng.normal(size=(4, 5)), np.zeros(5), bias).data
    np.testing.assert_array_equal(out, np.broadcast_to(bias, (4, 5)))


def test_layer_norm_matches_two_pass_oracle(rng):
    x = rng.normal(size=(3, 7)) * 4 + 1
    eps = 1e-5
    want = np.empty_like(x)
    for i, row in enumerate(x):
        m = sum(row) / len(row)
        v = sum((r - m) ** 2 for r in row) / len(row)
        want[i] = [(r - m) / np.sqrt(v + eps) for r in row]
    np.testing.assert_allclose(T.layer_norm(x, eps=eps).data, want, rtol=0, atol=1e-10)


def test_layer_norm_unit_moments(rng):
    # eps is tiny so var / (var + eps) is 1 to well below the tolerance
    y = T.layer_norm(rng.normal(size=(6, 9)) * 3, eps=1e-14).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-10)


def test_layer_norm_rejects_single_feature():
    with pytest.raises(ShapeError):
        T.layer_norm(np.ones((3, 1)))


# ---------------------------------------------------------------- huber

@pytest.mark.parametrize("d,want", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_huber_branches(d, want):
    assert T.huber(np.array([d]), 1.0).item() == pytest.approx(want, abs=1e-15)


def test_huber_gradient_zero_at_zero():
    x = leaf(np.zeros(4))
    assert np.all(backward(T.huber(x))[x] == 0)


# ---------------------------------------------------------------- backward

def test_square_gradient():
    x = leaf(3.0)
    assert backward(x * x)[x] == 6.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError, match="scalar"):
        backward(leaf(np.ones(3)) * 2)


def test_unreachable_leaf_gets_zero():
    x, y = leaf(np.ones(3)), leaf(np.ones((2, 2)))
    g = backward(T.tsum(x * x), wrt=[x, y])
    np.testing.assert_array_equal(g[y], np.zeros((2, 2)))


def test_three_layer_composite_grad_check(rng):
    W1, W2, W3 = rng.normal(size=(4, 6)), rng.normal(size=(6, 5)), rng.normal(size=(5, 1))

    def f(x):
        h = T.gelu(T.matmul(x, W1))
        h = T.tanh(T.matmul(h, W2))
        return T.tsum(T.matmul(h, W3))

    assert grad_check(f, rng.normal(size=(3, 4))) < 1e-5


def test_tape_is_topological_and_visits_once(rng):
    x = leaf(rng.normal(size=3))
    h = T.exp(x)
    out = T.tsum(h * h + h)
    tape = T.Tape.record(out)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_adjoint_is_linear(rng):
    w = rng.normal(size=(3, 3))

    def f(x):
        return T.tsum(T.sin(T.matmul(x, w)))

    def g(x):
        return T.tsum(T.exp(x) * x)

    pt = rng.normal(size=(2, 3))
    xs = [leaf(pt) for _ in range(3)]
    both = backward(f(xs[0]) + g(xs[0]))[xs[0]]
    sep = backward(f(xs[1]))[xs[1]] + backward(g(xs[2]))[xs[2]]
    np.testing.assert_allclose(both, sep, atol=1e-13)


def test_shared_subexpression_accumulates():
    x = leaf(np.array([2.0]))
    y = x * x
    out = T.tsum(y + y * x)           # 2x^2 ... d/dx (x^2 + x^3) = 2x + 3x^2
    assert backward(out)[x][0] == pytest.approx(2 * 2 + 3 * 4)


def test_backward_is_deterministic(rng):
    pt = rng.normal(size=(4, 4))

    def run():
        x = leaf(pt)
        out = T.tsum(T.softmax(T.matmul(x, x)) * T.layer_norm(x))
        return out.data.copy(), backward(out)[x]

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes() and g1.tobytes() == g2.tobytes()


def test_unbroadcast_gradients(rng):
    a, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(1, 3)))
    g = backward(T.tsum(a * b), wrt=[a, b])
    np.testing.assert_allclose(g[b], a.data.sum(0, keepdims=True))
    np.testing.assert_allclose(g[a], np.broadcast_to(b.data, (4, 3)))


def test_getitem_scatter_adds_repeated_indices():
    x = leaf(np.arange(3.0))
    g = backward(T.tsum(x[np.array([0, 0, 2])]))[x]
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


# ---------------------------------------------------------------- grad_check

def test_grad_check_linear_is_machine_precision(rng):
    w = rng.normal(size=5)
    assert grad_check(lambda x: T.tsum(x * w), rng.normal(size=5)) < 1e-9


def test_grad_check_softmax_cross_entropy(rng):
    labels = np.array([1, 0, 3])
    assert grad_check(lambda x: T.cross_entropy(x, labels), rng.normal(size=(3, 4))) < 1e-5


def test_grad_check_flags_relu_kink():
    res = grad_check(lambda x: T.tsum(T.relu(x)), np.array([0.0, 1.0, -2.0]))
    assert res.kinks == [(0,)]
    assert res < 1e-9


def test_grad_check_reports_non_finite_coordinate():
    with pytest.raises(FloatingPointError, match=r"\(1,\)"):
        grad_check(lambda x: T.tsum(T.log(x)), np.array([1.0, 5e-7]), step=1e-6)


def test_grad_check_catches_a_wrong_gradient():
    def bad_square(a):
        a = T.as_tensor(a)
        return T._make(a.data ** 2, (a,), lambda g: T._accum(a, g * 3.0 * a.data))

    assert grad_check(lambda x: T.tsum(bad_square(x)), np.array([0.7, -1.2])) > 0.1


def test_norm_value_and_zero_vector_gradient():
    x = leaf(np.array([[3.0, 4.0], [0.0, 0.0]]))
    out = T.norm(x)
    np.testing.assert_array_equal(out.data, [5.0, 0.0])
    g = backward(T.tsum(out))[x]
    np.testing.assert_allclose(g, [[0.6, 0.8], [0.0, 0.0]], atol=1e-15)
