import math

import numpy as np
import pytest

from fdamerge.errors import (
    ConvergenceFailureError,
    DimensionMismatchError,
    ShapeMismatchError,
    ZeroNormError,
)
from fdamerge.numkit import RngStream, cos_dist, gaussian_matrix, nnls, svd


class TestCosDist:
    def test_identity_is_zero(self, np_rng):
        a = np_rng.normal(size=(3, 4))
        assert cos_dist(a, a) == pytest.approx(0.0, abs=1e-14)

    def test_antipodal_is_two(self, np_rng):
        a = np_rng.normal(size=(2, 5))
        assert cos_dist(a, -a) == pytest.approx(2.0, abs=1e-14)

    def test_hand_value(self):
        a = [[1.0, 0.0], [0.0, 0.0]]
        b = [[1.0, 1.0], [0.0, 0.0]]
        # inner = 1, norms 1 and sqrt(2)
        assert cos_dist(a, b) == pytest.approx(1.0 - 1.0 / math.sqrt(2), abs=1e-14)

    def test_positive_scale_invariance(self, np_rng):
        for _ in range(25):
            a = np_rng.normal(size=(3, 3))
            b = np_rng.normal(size=(3, 3))
            alpha, beta = np_rng.uniform(0.01, 100, size=2)
            assert cos_dist(alpha * a, beta * b) == pytest.approx(cos_dist(a, b), abs=1e-10)

    def test_zero_norm_rejected(self):
        with pytest.raises(ZeroNormError):
            cos_dist(np.zeros((2, 2)), np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cos_dist(np.ones((2, 2)), np.ones((2, 3)))

    def test_range(self, np_rng):
        for _ in range(50):
            a = np_rng.normal(size=(2, 2))
            b = np_rng.normal(size=(2, 2))
            assert 0.0 <= cos_dist(a, b) <= 2.0


def _eigvals_2x2(g):
    # quadratic-formula eigenvalues of a symmetric 2x2 matrix
    tr, det = g[0, 0] + g[1, 1], g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    disc = math.sqrt(max(tr * tr / 4 - det, 0.0))
    return tr / 2 + disc, tr / 2 - disc


class TestSvd:
    def test_identity(self):
        res = svd(np.eye(2))
        assert res.s == pytest.approx([1.0, 1.0])

    def test_diagonal(self):
        res = svd(np.diag([3.0, 0.0]))
        assert res.s == pytest.approx([3.0, 0.0])

    def test_gram_oracle(self):
        m = np.array([[0.0, 2.0], [1.0, 0.0]])
        lo, hi = sorted(_eigvals_2x2(m.T @ m))
        res = svd(m)
        assert res.s == pytest.approx([math.sqrt(hi), math.sqrt(lo)], abs=1e-12)

    @pytest.mark.parametrize("shape", [(5, 5), (17, 9), (9, 17), (64, 64), (256, 256)])
    def test_reconstruction_and_orthonormality(self, np_rng, shape):
        m = np_rng.normal(size=shape)
        res = svd(m)
        recon = (res.u * res.s) @ res.vt
        assert np.linalg.norm(recon - m) / max(1.0, np.linalg.norm(m)) <= 1e-10
        k = min(shape)
        assert np.linalg.norm(res.u.T @ res.u - np.eye(k)) <= 1e-10
        assert np.linalg.norm(res.vt @ res.vt.T - np.eye(k)) <= 1e-10
        assert np.all(np.diff(res.s) <= 0)
        assert np.all(res.s >= 0)


class TestNnls:
    def test_interior_solution(self):
        x = nnls(np.eye(2), np.array([2.0, 3.0]))
        assert x == pytest.approx([2.0, 3.0], abs=1e-12)

    def test_grid_search_oracle(self):
        a = np.eye(2)
        b = np.array([1.0, -1.0])
        x = nnls(a, b)
        # coarse grid over the non-negative quadrant
        grid = np.linspace(0.0, 2.0, 81)
        best = min(((u, v) for u in grid for v in grid),
                   key=lambda uv: np.sum((a @ np.array(uv) - b) ** 2))
        assert x == pytest.approx(best, abs=0.05)
        assert x == pytest.approx([1.0, 0.0], abs=1e-12)

    def test_zero_rhs(self):
        assert nnls(np.eye(3), np.zeros(3)) == pytest.approx([0.0, 0.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            nnls(np.eye(3), np.ones(2))

    def test_kkt_conditions_random(self, np_rng):
        for _ in range(40):
            m, n = np_rng.integers(2, 12, size=2)
            a = np_rng.normal(size=(m, n))
            b = np_rng.normal(size=m)
            x = nnls(a, b)
            g = a.T @ (a @ x - b)
            tol = 1e-8 * max(np.abs(a.T @ b).max(), 1e-12)
            assert np.all(x >= 0)
            active = x > 0
            assert np.all(np.abs(g[active]) <= tol)
            assert np.all(g[~active] >= -tol)

    def test_beats_clamped_least_squares(self, np_rng):
        for _ in range(30):
            m, n = np_rng.integers(3, 10, size=2)
            a = np_rng.normal(size=(m, n))
            b = np_rng.normal(size=m)
            x = nnls(a, b)
            ls, *_ = np.linalg.lstsq(a, b, rcond=None)
            clamped = np.maximum(ls, 0.0)
            assert np.sum((a @ x - b) ** 2) <= np.sum((a @ clamped - b) ** 2) + 1e-10


class TestRng:
    def test_gaussian_deterministic(self):
        a = gaussian_matrix(RngStream(42), 5, 7)
        b = gaussian_matrix(RngStream(42), 5, 7)
        assert np.array_equal(a, b)

    def test_gaussian_moments(self):
        samples = gaussian_matrix(RngStream(7), 1000, 100).ravel()
        assert abs(samples.mean()) <= 0.02
        assert abs(samples.var() - 1.0) <= 0.03

    def test_single_entry(self):
        m = gaussian_matrix(RngStream(0), 1, 1)
        assert m.shape == (1, 1) and np.isfinite(m[0, 0])

    def test_bad_dims(self):
        with pytest.raises(ShapeMismatchError):
            gaussian_matrix(RngStream(0), 0, 3)

    def test_child_streams_differ(self):
        root = RngStream(9)
        a = root.child(1).normal(2, 2)
        b = root.child(2).normal(2, 2)
        assert not np.array_equal(a, b)
        again = RngStream(9).child(1).normal(2, 2)
        assert np.array_equal(a, again)
