import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cinetransfer import diffcore as dc
from cinetransfer.oracles.finite_diff import central_gradient


def test_sin_gradient_matches_closed_form():
    err, analytic, _ = dc.check_gradient(lambda x: dc.sin(x).sum(), [np.array([1.0])],
                                         return_details=True)
    assert abs(analytic[0][0] - np.cos(1.0)) <= 1e-12
    assert err <= 1e-6


def test_composite_expression_matches_fd(rng):
    A = rng.normal(size=(4, 3))
    x0 = rng.normal(size=3)

    def f(x):
        y = dc.as_tensor(A) @ x
        return (dc.exp(dc.sin(y)) * dc.sqrt(y * y + 1.0)).sum() / (x * x).sum()

    _, (g,) = dc.value_and_grad(f, [x0])
    fd = central_gradient(lambda x: f(dc.Tensor(x)).item(), x0, 1e-5)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_grad_requires_scalar():
    tape = dc.Tape()
    x = tape.variable(np.ones(3))
    with pytest.raises(dc.GradientError):
        dc.grad(x * 2.0, [x])


def test_unused_parameter_gets_zero():
    tape = dc.Tape()
    x, y = tape.variable(np.ones(2)), tape.variable(np.ones(2))
    gx, gy = dc.grad((x * 3.0).sum(), [x, y])
    np.testing.assert_array_equal(gx, [3.0, 3.0])
    np.testing.assert_array_equal(gy, [0.0, 0.0])


def test_grad_can_be_called_twice_on_one_tape():
    tape = dc.Tape()
    x = tape.variable(np.array([2.0]))
    a = (x * x).sum()
    b = (x * x * x).sum()
    assert dc.grad(a, [x])[0][0] == pytest.approx(4.0)
    assert dc.grad(b, [x])[0][0] == pytest.approx(12.0)


def test_mask_zeroes_adjoints_but_not_values():
    tape = dc.Tape()
    x = tape.variable(np.arange(6.0).reshape(3, 2))
    y = x * 2.0
    keep = np.array([[1.0], [0.0], [1.0]])
    tape.mask(y, keep)
    out = y.sum()
    assert out.item() == pytest.approx(30.0)
    g = dc.grad(out, [x])[0]
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [2, 2]])
    assert tape.mask_stats.total == 2


def test_mask_shape_mismatch():
    tape = dc.Tape()
    x = tape.variable(np.ones((3, 2)))
    with pytest.raises(dc.ShapeError):
        tape.mask(x * 1.0, np.ones((4, 1)))


def test_index_update_vjp(rng):
    base0, vals0 = rng.normal(size=(5, 2)), rng.normal(size=(2, 2))
    idx = np.array([1, 3])
    w = rng.normal(size=(5, 2))

    def f(b, v):
        return (dc.index_update(b, idx, v) * dc.as_tensor(w)).sum()

    err = dc.check_gradient(f, [base0, vals0])
    assert err < 1e-7


def test_norm2_rows_matches_numpy(rng):
    x = rng.normal(size=(7, 2))
    out = dc.norm2_rows(dc.Tensor(x)).data
    np.testing.assert_allclose(out, np.linalg.norm(x, axis=1), rtol=0, atol=1e-15)
    assert dc.check_gradient(lambda t: dc.norm2_rows(t).sum(), [x]) < 1e-7


def test_replay_reproduces_tape(rng):
    tape = dc.Tape()
    x = tape.variable(rng.normal(size=4))
    _ = (dc.exp(x) * dc.cos(x)).sum()
    assert tape.replay()


def test_non_finite_gradient_raises():
    tape = dc.Tape()
    x = tape.variable(np.array([0.0]))
    with np.errstate(divide="ignore"):
        out = (dc.log(x) * 0.0 + x).sum()
        with pytest.raises(dc.GradientError):
            dc.grad(out, [x])


def test_sqrt_subgradient_at_zero():
    tape = dc.Tape()
    x = tape.variable(np.array([0.0, 4.0]))
    g = dc.grad(dc.sqrt(x).sum(), [x])[0]
    np.testing.assert_allclose(g, [0.0, 0.25])


def test_check_gradient_rejects_non_finite_objective():
    with pytest.raises(dc.GradientError):
        dc.check_gradient(lambda t: (t * np.inf).sum(), [np.ones(1)])


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)))
def test_linear_ops_gradient_property(x):
    # d/dx sum(a*x + x^2) = a + 2x
    a = np.linspace(-1, 1, x.size)
    _, (g,) = dc.value_and_grad(lambda t: (t * dc.as_tensor(a) + t * t).sum(), [x])
    np.testing.assert_allclose(g, a + 2 * x, atol=1e-12)
