import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quiet import diff as D
from quiet.diff import Tape, Tensor
from quiet.errors import DimensionError, NumericalError

H = 1e-6
RTOL = 1e-6


def numeric_grad(f, x: np.ndarray) -> np.ndarray:
    """Central differences of a scalar numpy function, coordinate by coordinate."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + H
        up = f(x)
        flat[i] = orig - H
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * H)
    return g


def check_primitive(build, *arrays, seed=0):
    """Compare tape gradients of sum(R * build(...)) with central differences."""
    rng = np.random.default_rng([seed, 99])
    leaves = [Tensor(a.astype(np.float64).copy(), True) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
        R = rng.normal(size=out.shape)
        loss = D.sum(out * R)
    tape.backward(loss)
    for k, leaf in enumerate(leaves):
        def f(x, k=k):
            args = [Tensor(x) if j == k else Tensor(l.value) for j, l in enumerate(leaves)]
            return float(np.sum(build(*args).value * R))
        num = numeric_grad(f, leaf.value.copy())
        ana = np.zeros_like(num) if leaf.grad is None else leaf.grad
        err = np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        assert err <= RTOL, f"input {k}: relative error {err:.2e}"


rng0 = np.random.default_rng(42)
A23, B23 = rng0.normal(size=(2, 3)), rng0.normal(size=(2, 3))
POS = rng0.uniform(0.2, 2.0, size=(2, 3))

PRIMITIVES = {
    "add": (lambda a, b: D.add(a, b), (A23, B23)),
    "add_broadcast": (lambda a, b: a + b, (A23, rng0.normal(size=3))),
    "sub": (lambda a, b: D.sub(a, b), (A23, B23)),
    "elementwise_mul": (lambda a, b: D.elementwise_mul(a, b), (A23, B23)),
    "mul_broadcast": (lambda a, b: a * b, (A23, rng0.normal(size=(2, 1)))),
    "scale": (lambda a: D.scale(a, -1.7), (A23,)),
    "matmul": (lambda a, b: D.matmul(a, b), (A23, rng0.normal(size=(3, 4)))),
    "matmul_batched": (lambda a, b: a @ b, (rng0.normal(size=(2, 3, 4)), rng0.normal(size=(2, 4, 3)))),
    "dot": (lambda a, b: D.dot(a, b), (A23, B23)),
    "sum_axis": (lambda a: D.sum(a, axis=0), (A23,)),
    "sum_keepdims": (lambda a: D.sum(a, axis=1, keepdims=True), (A23,)),
    "mean": (lambda a: D.mean(a, axis=1), (A23,)),
    "concat": (lambda a, b: D.concat([a, b], axis=-1), (A23, B23)),
    "stack": (lambda a, b: D.stack([a, b], axis=1), (A23, B23)),
    "slice": (lambda a: D.slice_(a, (slice(None), slice(1, 3))), (A23,)),
    "getitem_repeat": (lambda a: a[np.array([0, 0, 1])], (A23,)),
    "take": (lambda a: D.take(a, np.array([[2, 0], [1, 1]]), axis=0), (rng0.normal(size=(3, 4)),)),
    "reshape": (lambda a: D.reshape(a, (3, 2)), (A23,)),
    "swapaxes": (lambda a: D.swapaxes(a, 0, 1), (A23,)),
    "diagonal": (lambda a: D.diagonal(a), (rng0.normal(size=(2, 3, 3)),)),
    "tanh": (lambda a: D.tanh(a), (A23,)),
    "sigmoid": (lambda a: D.sigmoid(a), (A23,)),
    "cos": (lambda a: D.cos(a), (A23,)),
    "sin": (lambda a: D.sin(a), (A23,)),
    "square": (lambda a: D.square(a), (A23,)),
    "sqrt": (lambda a: D.sqrt(a), (POS,)),
    "abs_smooth": (lambda a: D.abs_smooth(a), (A23,)),
    "natural_log": (lambda a: D.natural_log(a), (POS,)),
    "softmax": (lambda a: D.softmax(a, axis=-1), (A23,)),
    "softmax_masked": (lambda a: D.softmax(a, axis=-1, mask=np.array([[1, 1, 0], [1, 1, 1]], bool)),
                       (A23,)),
    "l2_normalize": (lambda a: D.l2_normalize(a, axis=-1), (A23,)),
    "dropout_mask_apply": (lambda a: D.dropout_mask_apply(a, np.array([[1, 0, 1], [1, 1, 0]]), 0.2),
                           (A23,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_jacobian(name):
    build, arrays = PRIMITIVES[name]
    check_primitive(build, *arrays)


@given(st.integers(0, 2**32 - 1))
def test_primitive_jacobian_random_points(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    check_primitive(lambda x, w: D.tanh(x @ w), a, b, seed=seed)
    check_primitive(lambda x: D.l2_normalize(D.abs_smooth(x)), a, seed=seed)
    check_primitive(lambda x: D.softmax(x, axis=0), a, seed=seed)


def test_softmax_uniform():
    np.testing.assert_allclose(D.softmax(Tensor(np.zeros(3))).value, np.full(3, 1 / 3), atol=1e-16)


def test_l2_normalize_345():
    np.testing.assert_allclose(D.l2_normalize(Tensor([3.0, 4.0])).value, [0.6, 0.8], atol=1e-16)


def test_matmul_identity():
    X = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_array_equal(D.matmul(Tensor(np.eye(3)), Tensor(X)).value, X)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 8), st.floats(0.1, 50.0))
def test_softmax_rows_positive_and_normalized(seed, rows, cols, spread):
    x = spread * np.random.default_rng(seed).normal(size=(rows, cols))
    y = D.softmax(Tensor(x), axis=-1).value
    assert np.all(y > 0) or spread > 30
    assert np.max(np.abs(y.sum(axis=-1) - 1.0)) <= 1e-12


def test_masked_softmax_zeroes_masked_slots():
    y = D.softmax(Tensor(np.array([5.0, 1.0, 2.0])), mask=np.array([False, True, True])).value
    assert y[0] == 0.0
    assert y.sum() == pytest.approx(1.0, abs=1e-15)


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], True)
    with Tape() as tape:
        loss = D.sum(D.square(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_constant_loss_gives_zero_gradient():
    x = Tensor([1.0, -3.0, 0.5], True)
    with Tape() as tape:
        loss = D.sum(x - x) + D.sum(Tensor(np.ones(2)))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_gradients_accumulate_over_fanout():
    x = Tensor([0.3, -0.4], True)
    with Tape() as tape:
        loss = D.sum(x * x + D.scale(x, 3.0))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.value + 3.0, rtol=1e-15)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), True)
    with Tape() as tape:
        y = D.square(x)
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_broadcast_mismatch_raises():
    with pytest.raises(DimensionError):
        D.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), True)
    y = D.tanh(x)
    assert D.current_tape() is None
    assert y.requires_grad


def test_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    w0, x0 = rng.normal(size=(4, 3)), rng.normal(size=(5, 4))

    def run():
        w = Tensor(w0.copy(), True)
        with Tape() as tape:
            out = D.softmax(D.tanh(Tensor(x0) @ w), axis=-1)
            loss = D.sum(D.log(out))
        tape.backward(loss)
        return out.value.copy(), w.grad.copy()

    (v1, g1), (v2, g2) = run(), run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


# -- finite-difference checker ------------------------------------------------------


def test_chained_tanh_matmul_matches_checker():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(4, 3)), True, "w")
    x = Tensor(rng.normal(size=(6, 4)))
    err = D.finite_diff_check(lambda: D.sum(D.square(D.tanh(x @ w))), [w], h=1e-5)
    assert err <= 1e-6


def test_quadratic_is_exact():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(5, 5))
    A = A @ A.T
    x = Tensor(rng.normal(size=5), True, "x")
    err = D.finite_diff_check(lambda: D.sum(D.reshape(x, (1, 5)) @ Tensor(A) * x), [x], h=1e-5)
    assert err <= 1e-9


def test_zero_gradient_parameter_scores_zero():
    x = Tensor(np.ones(3), True, "x")
    unused = Tensor(np.ones(2), True, "unused")
    errs = D.gradient_errors(lambda: D.sum(D.square(x)), {"x": x, "unused": unused})
    assert errs["unused"] == 0.0


def test_checker_flags_sabotaged_rule():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(3, 3)), True, "w")
    x = Tensor(rng.normal(size=(2, 3)))
    fn = lambda: D.sum(D.tanh(x @ w))  # noqa: E731
    assert D.finite_diff_check(fn, [w]) < 1e-6
    with D.sabotage("tanh"):
        assert D.finite_diff_check(fn, [w]) > 0.1
    assert D.finite_diff_check(fn, [w]) < 1e-6


def test_checker_subsamples_coordinates():
    w = Tensor(np.random.default_rng(8).normal(size=(10, 10)), True, "w")
    errs = D.gradient_errors(lambda: D.sum(D.sin(w)), [w], max_coords=7)
    assert errs["w"] < 1e-6


def test_checker_reports_nonfinite_loss():
    x = Tensor(np.array([1.0]), True, "x")
    with pytest.raises(NumericalError, match="x"):
        D.gradient_errors(lambda: D.scale(D.sum(x), 1.0) if x.value[0] < 1.0 + 1e-6 else
                          Tensor(np.array(np.inf)), [x])
