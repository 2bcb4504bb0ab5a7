import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedcir import numerics as nx
from fedcir.numerics import DimensionError, GradTape, NumericError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- tensor basics


def test_tensor_is_fp64_and_read_only():
    t = Tensor([1, 2, 3])
    assert t.value.dtype == np.float64
    assert t.shape == (3,)
    assert t.data.size == int(np.prod(t.shape))
    with pytest.raises(ValueError):
        t.value[0] = 5.0


def test_tensor_copies_input():
    src = np.array([1.0, 2.0])
    t = Tensor(src)
    src[0] = 9.0
    assert t.value[0] == 1.0


def test_operator_overloads():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert np.array_equal((a + b).value, [4, 7])
    assert np.array_equal((b - a).value, [2, 3])
    assert np.array_equal((a * b).value, [3, 10])
    assert np.array_equal((b / a).value, [3, 2.5])
    assert np.array_equal((-a).value, [-1, -2])
    assert np.array_equal((1.0 - a).value, [0, -1])


# ---------------------------------------------------------------- affine


def test_affine_identity():
    out = nx.affine(Tensor(np.eye(2)), Tensor([0.0, 0.0]), Tensor([3.0, -1.0]))
    assert out.value.tolist() == [3.0, -1.0]


def test_affine_hand_multiply():
    out = nx.affine(Tensor([[1.0, 0.0], [0.0, 2.0]]), Tensor([1.0, 1.0]), Tensor([1.0, 1.0]))
    assert out.value.tolist() == [2.0, 3.0]


def test_affine_zero_weights():
    out = nx.affine(Tensor(np.zeros((3, 1))), Tensor([5.0]), Tensor([0.3, -7.0, 2.0]))
    assert out.value.tolist() == [5.0]


def test_affine_batch_rows():
    w = Tensor([[1.0, 0.0], [0.0, 2.0]])
    out = nx.affine(w, Tensor([1.0, 1.0]), Tensor([[1.0, 1.0], [0.0, 0.0]]))
    assert out.value.tolist() == [[2.0, 3.0], [1.0, 1.0]]


def test_affine_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 2\).*\(4,\)|\(4,\).*\(3, 2\)"):
        nx.affine(Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)), Tensor(np.zeros(4)))


def test_affine_counts_multiplies():
    w = Tensor(np.ones((3, 2)))
    with GradTape() as tape:
        tape.watch(w)
        nx.affine(w, Tensor(np.zeros(2)), Tensor(np.ones((5, 3))))
    assert tape.mults == 5 * 3 * 2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), finite, finite)
def test_affine_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    w, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3))
    x, y = rng.normal(size=4), rng.normal(size=4)
    zero = Tensor(np.zeros(3))
    lhs = nx.affine(w, b, Tensor(alpha * x + beta * y)).value
    rhs = alpha * nx.affine(w, zero, Tensor(x)).value + beta * nx.affine(w, zero, Tensor(y)).value + b.value
    scale = max(1.0, np.abs(lhs).max())
    assert np.abs(lhs - rhs).max() <= 1e-12 * scale * 10


# ---------------------------------------------------------------- softmax


def test_softmax_symmetry():
    assert nx.softmax(Tensor([0.0, 0.0])).value.tolist() == [0.5, 0.5]


def test_softmax_closed_form():
    p = nx.softmax(Tensor([math.log(2.0), 0.0])).value
    assert p == pytest.approx([2 / 3, 1 / 3], abs=1e-15)


def test_softmax_large_logit_no_overflow():
    with np.errstate(over="raise", invalid="raise"):
        p = nx.softmax(Tensor([1000.0, 0.0])).value
    assert p[0] == 1.0 and 0.0 <= p[1] < 1e-300


def test_softmax_empty_raises():
    with pytest.raises(DimensionError):
        nx.softmax(Tensor(np.zeros(0)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-50, 50))
def test_softmax_properties(v, c):
    p = nx.softmax(Tensor(v)).value
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.abs(nx.softmax(Tensor(v + c)).value - p).max() <= 1e-12


# ---------------------------------------------------------------- cross-entropy


def test_cross_entropy_uniform():
    for label in range(4):
        assert nx.cross_entropy(Tensor(np.full(4, 0.25)), label).item() == pytest.approx(1.3862943611198906)


def test_cross_entropy_perfect():
    assert nx.cross_entropy(Tensor([0.0, 1.0, 0.0]), 1).item() == 0.0


def test_cross_entropy_closed_form():
    assert nx.cross_entropy(Tensor([0.25, 0.75]), 1).item() == pytest.approx(0.2876820724517809, abs=1e-15)


def test_cross_entropy_guard_prevents_infinity():
    val = nx.cross_entropy(Tensor([1.0, 0.0]), 1).item()
    assert val == pytest.approx(-math.log(nx.LOG_GUARD))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy(Tensor([0.5, 0.5]), 2)
    with pytest.raises(IndexError):
        nx.cross_entropy(Tensor([[0.5, 0.5]]), [3])


def test_cross_entropy_batch_matches_rows():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    batch = nx.cross_entropy(Tensor(p), [1, 0]).value
    assert batch.tolist() == [nx.cross_entropy(Tensor(p[0]), 1).item(), nx.cross_entropy(Tensor(p[1]), 0).item()]


# ---------------------------------------------------------------- tape


def test_gradient_shapes_match_parameters():
    rng = np.random.default_rng(0)
    w, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3))
    with GradTape() as tape:
        tape.watch(w, b)
        loss = nx.cross_entropy(nx.softmax(nx.affine(w, b, Tensor(rng.normal(size=4)))), 2)
    gw, gb = tape.gradient(loss, [w, b])
    assert gw.shape == w.shape and gb.shape == b.shape


def test_gradient_unconnected_source_is_none():
    a, b = Tensor([1.0]), Tensor([2.0])
    with GradTape() as tape:
        tape.watch(a, b)
        loss = nx.sum_all(nx.square(a))
    ga, gb = tape.gradient(loss, [a, b])
    assert ga.tolist() == [2.0] and gb is None


def test_untracked_ops_not_recorded():
    with GradTape() as tape:
        nx.add(Tensor([1.0]), Tensor([2.0]))
    assert tape.records == []


def test_relu_subgradient_zero_at_kink():
    x = Tensor([0.0, 1.0, -1.0])
    with GradTape() as tape:
        tape.watch(x)
        loss = nx.sum_all(nx.relu(x))
    assert tape.gradient(loss, [x])[0].tolist() == [0.0, 1.0, 0.0]


def test_segment_routes_gradient():
    v = Tensor(np.arange(6.0))
    with GradTape() as tape:
        tape.watch(v)
        loss = nx.sum_all(nx.square(nx.segment(v, 2, 6, (2, 2))))
    assert tape.gradient(loss, [v])[0].tolist() == [0, 0, 4, 6, 8, 10]
    with pytest.raises(DimensionError):
        nx.segment(v, 0, 5, (2, 2))


# ---------------------------------------------------------------- grad_check


def test_grad_check_quadratic():
    assert nx.grad_check(lambda x: nx.sum_all(nx.square(x)), [3.0], step=1e-5) < 1e-9


def test_grad_check_classifier_stack():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=4))
    shape = (4, 3)

    def loss(v):
        w = nx.segment(v, 0, 12, shape)
        b = nx.segment(v, 12, 15, (3,))
        return nx.cross_entropy(nx.softmax(nx.affine(w, b, x)), 1)

    assert nx.grad_check(loss, rng.normal(size=15), step=1e-5) < 1e-6


def test_grad_check_constant():
    assert nx.grad_check(lambda x: nx.sum_all(nx.mul(x, 0.0)), [1.0, 2.0]) == 0.0


def test_grad_check_detects_wrong_gradient():
    def bad_square(x):
        out = Tensor(x.value**2)
        return nx.sum_all(nx._record(out, (x,), lambda g: (g * x.value,)))  # half the true derivative

    assert nx.grad_check(bad_square, [1.0, -2.0]) > 0.3


def test_grad_check_rejects_non_finite():
    with pytest.raises(NumericError):
        nx.grad_check(lambda x: nx.sum_all(nx.log(x)), [0.0])


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        nx.grad_check(lambda x: nx.sum_all(x), [1.0], step=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_elementwise_ops_pass_grad_check(seed):
    rng = np.random.default_rng(seed)
    p0 = rng.uniform(0.5, 2.0, size=5)
    c = Tensor(rng.uniform(0.5, 2.0, size=5))

    def loss(x):
        y = nx.div(nx.mul(nx.exp(nx.clip(x, -3, 3)), nx.log(x)), nx.add(c, x))
        return nx.mean_all(nx.sub(nx.maximum(y, -10.0), nx.square(x)))

    assert nx.grad_check(loss, p0) < 1e-6
