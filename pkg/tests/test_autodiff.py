import numpy as np
import pytest

from cmreg.autodiff import (AdamState, DomainError, ShapeError, Value, adam_step,
                            backward, concat, grad_check, lr_at_epoch, repeat_rows)


def test_matmul_shape_contract():
    a = Value(np.ones((2, 3)))
    b = Value(np.ones((3, 4)))
    assert (a @ b).shape == (2, 4)


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 4\)"):
        Value(np.ones((2, 3))) @ Value(np.ones((4, 4)))


def test_softmax_uniform():
    s = Value(np.zeros(3)).softmax(axis=0)
    np.testing.assert_allclose(s.data, [1 / 3] * 3)


def test_gather_identity_permutation():
    x = Value(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(x.gather_rows([0, 1, 2, 3]).data, x.data)


def test_backward_square():
    x = Value(np.array(3.0), requires_grad=True)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_softmax_sum_zero_grad():
    x = Value(np.random.default_rng(0).normal(size=5), requires_grad=True)
    backward(x.softmax(axis=0).sum())
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_backward_l2norm_matches_formula():
    rng = np.random.default_rng(1)
    x = Value(rng.normal(size=5), requires_grad=True)
    backward(x.l2norm())
    np.testing.assert_allclose(x.grad, x.data / np.linalg.norm(x.data), atol=1e-12)
    report = grad_check(lambda inp: inp[0].l2norm(), [x])
    assert report.passed


def test_backward_requires_scalar_root():
    x = Value(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x + x)


def test_backward_twice_accumulates():
    x = Value(np.array(2.0), requires_grad=True)
    y = x * x
    backward(y)
    backward(y)
    assert x.grad == pytest.approx(8.0)


def test_shared_subexpression_sums_paths():
    # f = (x*x) + (x*x) reused node: df/dx = 4x
    x = Value(np.array(1.5), requires_grad=True)
    sq = x * x
    backward(sq + sq)
    assert x.grad == pytest.approx(6.0)


def test_shared_subexpression_vs_path_enumeration():
    # DAG <= 6 nodes: y = a*b, z = y + y*a; brute-force dz/da = b + 2ab, dz/db = a + a^2
    a_val, b_val = 0.7, -1.3
    a = Value(np.array(a_val), requires_grad=True)
    b = Value(np.array(b_val), requires_grad=True)
    y = a * b
    backward(y + y * a)
    assert a.grad == pytest.approx(b_val + 2 * a_val * b_val)
    assert b.grad == pytest.approx(a_val + a_val ** 2)


def test_max_reduce_tie_lowest_flat_index():
    x = Value(np.array([[2.0, 2.0, 1.0]]), requires_grad=True)
    backward(x.max(axis=1).sum())
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_log_domain_error():
    with pytest.raises(DomainError):
        Value(np.array([0.0])).log()


def test_xlogx_zero_convention():
    v = Value(np.array([0.0, 1.0, 0.5]))
    np.testing.assert_allclose(v.xlogx().data, [0.0, 0.0, 0.5 * np.log(0.5)])


def test_concat_backward_splits():
    a = Value(np.ones((2, 2)), requires_grad=True)
    b = Value(np.ones((2, 3)), requires_grad=True)
    backward(concat([a, b], axis=1).sum())
    np.testing.assert_array_equal(a.grad, np.ones((2, 2)))
    np.testing.assert_array_equal(b.grad, np.ones((2, 3)))


def test_repeat_rows_broadcast_gradient():
    v = Value(np.array([1.0, 2.0]), requires_grad=True)
    backward(repeat_rows(v, 4).sum())
    np.testing.assert_array_equal(v.grad.reshape(-1), [4.0, 4.0])


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4))
    a = (Value(x).softmax(axis=1) @ Value(x)).sum()
    b = (Value(x).softmax(axis=1) @ Value(x)).sum()
    assert a.data == b.data


PRIMITIVES = [
    ("add", lambda x, y: (x + y).sum()),
    ("sub", lambda x, y: (x - y).sum()),
    ("mul", lambda x, y: (x * y).sum()),
    ("matmul", lambda x, y: (x @ y).sum()),
    ("softmax", lambda x, y: ((x.softmax(axis=1)) * y).sum()),
    ("sigmoid", lambda x, y: (x.sigmoid() * y).sum()),
    ("exp", lambda x, y: (x.exp() * y).sum()),
    ("leaky", lambda x, y: (x.leaky_relu() * y).sum()),
    ("mean", lambda x, y: (x.mean(axis=0) * y.mean(axis=0)).sum()),
    ("max", lambda x, y: (x.max(axis=1) * y.max(axis=1)).sum()),
    ("norm", lambda x, y: (x.l2norm(axis=1) * y.l2norm(axis=1)).sum()),
    ("transpose", lambda x, y: (x.T @ y).sum()),
]


@pytest.mark.parametrize("name,f", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradients_match_finite_differences(name, f):
    rng = np.random.default_rng(hash(name) % 2 ** 31)
    x = Value(rng.uniform(-1, 1, size=(4, 4)), requires_grad=True)
    y = Value(rng.uniform(-1, 1, size=(4, 4)), requires_grad=True)
    report = grad_check(lambda inp: f(inp[0], inp[1]), [x, y], tolerance=1e-3)
    assert report.passed, f"{name}: rel error {report.max_rel_error}"


def test_grad_check_quadratic_tight():
    x = Value(np.random.default_rng(5).normal(size=6), requires_grad=True)
    report = grad_check(lambda inp: (inp[0] * inp[0]).sum(), [x], epsilon=1e-5)
    assert report.max_rel_error < 1e-6


def test_grad_check_rejects_nondeterministic():
    state = {"n": 0}

    def f(inp):
        state["n"] += 1
        return (inp[0] * float(state["n"])).sum()

    with pytest.raises(RuntimeError, match="deterministic"):
        grad_check(f, [Value(np.ones(2), requires_grad=True)])


def test_adam_first_step_magnitude():
    # bias-corrected first step moves each element by ~lr regardless of |g|
    p = Value(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.3, -7.0])
    state = AdamState.init({"p": p})
    adam_step({"p": p}, state, lr=1e-4)
    np.testing.assert_allclose(np.abs(p.data - [1.0, -2.0]), 1e-4, rtol=1e-3)
    assert state.step == 1


def test_adam_zero_grad_no_move():
    p = Value(np.array([1.0]), requires_grad=True)
    p.grad = np.zeros(1)
    state = AdamState.init({"p": p})
    adam_step({"p": p}, state, lr=1.0)
    np.testing.assert_array_equal(p.data, [1.0])


def test_adam_shape_mismatch():
    p = Value(np.ones(2), requires_grad=True)
    p.grad = np.ones(3)
    with pytest.raises(ShapeError):
        adam_step({"p": p}, AdamState.init({"p": p}), lr=0.1)


def test_lr_schedule_reference_constants():
    assert lr_at_epoch(1e-4, 60) == pytest.approx(5e-5)
    assert lr_at_epoch(1e-4, 80) == pytest.approx(2.5e-5)
    assert lr_at_epoch(1e-4, 10) == pytest.approx(1e-4)
