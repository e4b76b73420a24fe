import numpy as np
import pytest

from fdamerge import difftape as dt
from fdamerge.errors import NotScalarError, ShapeMismatchError, UnboundVariableError

SUPPORTED = {"constant", "variable", "matmul", "add", "sub", "hadamard", "scalar-mul",
             "activation", "sum", "frobenius-norm", "vector-norm", "inner-product",
             "safe-divide"}


class TestEvaluate:
    def test_constant(self):
        c = np.array([[1.0, 2.0]])
        assert np.array_equal(dt.evaluate(dt.constant(c)), c)

    def test_scalar_product(self):
        x = dt.variable("x", 1, 1)
        y = dt.variable("y", 1, 1)
        out = dt.evaluate(dt.hadamard(x, y), {"x": np.array([[2.0]]), "y": np.array([[3.0]])})
        assert out[0, 0] == 6.0

    def test_frobenius(self):
        assert dt.evaluate(dt.frobenius_norm(dt.constant([[3.0, 4.0]])))[0, 0] == 5.0

    def test_unbound(self):
        with pytest.raises(UnboundVariableError):
            dt.evaluate(dt.variable("x", 2, 1), {})

    def test_bound_shape_checked(self):
        with pytest.raises(ShapeMismatchError):
            dt.evaluate(dt.variable("x", 2, 1), {"x": np.ones((3, 1))})

    def test_matmul_transpose_flags(self, np_rng):
        a = np_rng.normal(size=(3, 4))
        b = np_rng.normal(size=(5, 4))
        e = dt.matmul(dt.constant(a), dt.constant(b), trans_b=True)
        assert np.allclose(dt.evaluate(e), a @ b.T)

    def test_determinism(self, np_rng):
        x = dt.variable("x", 4, 1)
        w = dt.constant(np_rng.normal(size=(4, 4)))
        e = dt.vector_norm(dt.tanh(dt.matmul(w, x)))
        binding = {"x": np_rng.normal(size=(4, 1))}
        assert dt.evaluate(e, binding).tobytes() == dt.evaluate(e, binding).tobytes()


class TestGradient:
    def test_quadratic(self):
        x = dt.variable("x", 3, 1)
        g = dt.gradient(dt.inner_product(x, x), x)
        xv = np.array([[1.0], [-2.0], [0.5]])
        assert np.allclose(dt.evaluate(g, {"x": xv}), 2 * xv)

    def test_nested_cubic(self):
        x = dt.variable("x", 1, 1)
        cube = dt.hadamard(dt.hadamard(x, x), x)
        g2 = dt.gradient(dt.gradient(cube, x), x)
        assert dt.evaluate(g2, {"x": np.array([[2.0]])})[0, 0] == pytest.approx(12.0)

    def test_closure_property(self, np_rng):
        x = dt.variable("x", 3, 1)
        w = dt.constant(np_rng.normal(size=(3, 3)))
        y = dt.smooth_gelu(dt.matmul(w, x))
        scalar = dt.safe_divide(dt.inner_product(y, y), dt.vector_norm(x, y))
        g = dt.gradient(scalar, x)
        assert dt.node_kinds(g) <= SUPPORTED
        gg = dt.gradient(g if g.shape == (1, 1) else dt.sum_entries(g), x)
        assert dt.node_kinds(gg) <= SUPPORTED

    def test_not_scalar(self):
        x = dt.variable("x", 2, 2)
        with pytest.raises(NotScalarError):
            dt.gradient(dt.add(x, x), x)

    def test_absent_variable_gives_zero(self):
        x = dt.variable("x", 2, 3)
        y = dt.variable("y", 1, 1)
        g = dt.gradient(dt.hadamard(y, y), x)
        assert np.array_equal(dt.evaluate(g, {}), np.zeros((2, 3)))

    def test_linearity(self, np_rng):
        x = dt.variable("x", 4, 1)
        w1 = dt.constant(np_rng.normal(size=(4, 4)))
        w2 = dt.constant(np_rng.normal(size=(4, 4)))
        f = dt.vector_norm(dt.matmul(w1, x))
        g = dt.sum_entries(dt.tanh(dt.matmul(w2, x)))
        a, b = 2.5, -1.25
        combo = dt.add(dt.smul(a, f), dt.smul(b, g))
        lhs = dt.gradient(combo, x)
        binding = {"x": np_rng.normal(size=(4, 1))}
        rhs = a * dt.evaluate(dt.gradient(f, x), binding) + b * dt.evaluate(dt.gradient(g, x), binding)
        assert np.allclose(dt.evaluate(lhs, binding), rhs, atol=1e-12)

    def test_second_order_matches_fd_of_gradient(self, np_rng):
        # d/dx of ||tanh(Wx)||^2 checked at second order via FD of the gradient graph
        x = dt.variable("x", 3, 1)
        w = dt.constant(np_rng.normal(size=(3, 3)))
        y = dt.tanh(dt.matmul(w, x))
        f = dt.inner_product(y, y)
        g = dt.gradient(f, x)
        gsum = dt.sum_entries(g)
        err = dt.check_finite_diff(gsum, x, {"x": np_rng.normal(size=(3, 1))})
        assert err <= 1e-6


class TestCheckFiniteDiff:
    def test_linear_exact(self, np_rng):
        x = dt.variable("x", 5, 1)
        w = dt.constant(np_rng.normal(size=(1, 5)))
        err = dt.check_finite_diff(dt.matmul(w, x), x, {"x": np_rng.normal(size=(5, 1))})
        assert err <= 1e-10

    def test_constant_zero(self, np_rng):
        x = dt.variable("x", 3, 1)
        err = dt.check_finite_diff(dt.constant([[4.0]]), x, {"x": np_rng.normal(size=(3, 1))})
        assert err == 0.0

    def test_cos_dist_style(self, np_rng):
        w = dt.constant(np_rng.normal(size=(4, 4)))
        t = dt.constant(np_rng.normal(size=(4, 1)))
        x = dt.variable("x", 4, 1)
        y = dt.matmul(w, x)
        expr = dt.sub(dt.constant([[1.0]]),
                      dt.safe_divide(dt.inner_product(y, t),
                                     dt.scalar_mul(dt.vector_norm(y), dt.vector_norm(t))))
        xv = np_rng.normal(size=(4, 1))
        err = dt.check_finite_diff(expr, x, {"x": xv},
                                   step=1e-5 * (1 + float(np.abs(xv).max())))
        assert err <= 1e-6

    @pytest.mark.parametrize("act", [dt.tanh, dt.smooth_gelu])
    def test_activations(self, np_rng, act):
        x = dt.variable("x", 4, 1)
        w = dt.constant(np_rng.normal(size=(3, 4)))
        f = dt.sum_entries(act(dt.matmul(w, x)))
        err = dt.check_finite_diff(f, x, {"x": np_rng.normal(size=(4, 1))})
        assert err <= 1e-6
