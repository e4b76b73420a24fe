import numpy as np
import pytest

from fdamerge.errors import (
    DegenerateStartError,
    InvalidKError,
    RankDeficientError,
)
from fdamerge.linear_lab import (
    SpectralDecomposition,
    coefficient_series,
    power_law_delta,
    predicted_coefficients,
    similarity_upper_bound,
    simulate_dynamics,
    spectral_decomposition,
    tail_energy,
    write_trajectory_csv,
)
from fdamerge.numkit import RngStream


def _random_delta(rng, d, scale=1.0):
    return power_law_delta(RngStream(int(rng.integers(1 << 30))), d, p=1.8, scale=scale)


class TestSpectralDecomposition:
    def test_invariants(self, np_rng):
        for _ in range(10):
            d = int(np_rng.integers(3, 10))
            dw = _random_delta(np_rng, d)
            dec = spectral_decomposition(dw)
            assert np.linalg.norm(dec.u.T @ dec.u - np.eye(d)) <= 1e-10
            recon = (dec.q * dec.lam_sqrt) @ dec.u.T
            assert np.linalg.norm(recon - dw) / np.linalg.norm(dw) <= 1e-10
            assert np.allclose(dec.lam_sqrt**2, dec.lam, rtol=1e-12)
            assert np.all(np.diff(dec.lam) <= 0)

    def test_rank_deficient_rejected(self):
        with pytest.raises(RankDeficientError):
            spectral_decomposition(np.diag([1.0, 0.0]))


class TestSimulateDynamics:
    def test_zero_step_size_freezes(self, np_rng):
        dw = _random_delta(np_rng, 5)
        x0 = np_rng.normal(size=5)
        traj = simulate_dynamics(dw, x0, 0.0, 20)
        assert np.allclose(traj.xs, x0)
        assert np.all(traj.betas < 0)
        assert np.all(traj.sigmas > 0)
        assert np.all(traj.gammas == 0.0)

    def test_eigenray_closure(self, np_rng):
        dw = _random_delta(np_rng, 6)
        dec = spectral_decomposition(dw)
        for i in (0, 3, 5):
            traj = simulate_dynamics(dw, dec.u[:, i], 1e-2, 30)
            for t in range(31):
                x = traj.xs[t]
                proj = dec.u[:, i] * (dec.u[:, i] @ x)
                assert np.linalg.norm(x - proj) <= 1e-10 * max(np.linalg.norm(x), 1e-30)

    def test_duplicate_recursion_oracle(self, np_rng):
        # independent re-implementation of the update rule, step for step
        dw = _random_delta(np_rng, 8)
        x0 = np_rng.normal(size=8)
        eta, steps = 5e-3, 50
        traj = simulate_dynamics(dw, x0, eta, steps)
        x = x0.copy()
        nf = np.linalg.norm(dw)
        gram = dw.T @ dw
        for t in range(steps):
            beta = -1.0 / (nf * np.linalg.norm(dw @ x) * np.linalg.norm(x))
            x = x + eta * beta * (gram @ x)
            assert np.max(np.abs(traj.xs[t + 1] - x)) <= 1e-12 * max(1.0, np.max(np.abs(x)))

    def test_sign_contract(self, np_rng):
        dw = _random_delta(np_rng, 5)
        traj = simulate_dynamics(dw, np_rng.normal(size=5), 1e-2, 40)
        assert np.all(traj.betas < 0)
        assert np.all(traj.gammas > 0)
        assert np.all(traj.sigmas > 0)

    def test_degenerate_start(self, np_rng):
        with pytest.raises(DegenerateStartError):
            simulate_dynamics(_random_delta(np_rng, 4), np.zeros(4), 1e-2, 3)

    def test_rank_deficiency(self, np_rng):
        with pytest.raises(RankDeficientError):
            simulate_dynamics(np.diag([1.0, 0.0, 2.0]), np_rng.normal(size=3), 1e-2, 3)

    def test_radial_term_flag(self, np_rng):
        dw = _random_delta(np_rng, 4)
        x0 = np_rng.normal(size=4)
        approx = simulate_dynamics(dw, x0, 1e-2, 10)
        full = simulate_dynamics(dw, x0, 1e-2, 10, include_radial=True)
        assert not np.allclose(approx.xs[-1], full.xs[-1])


class TestPredictedCoefficients:
    def test_single_step_factor(self, np_rng):
        dw = _random_delta(np_rng, 5)
        dec = spectral_decomposition(dw)
        x0 = np_rng.normal(size=5)
        gammas = [0.37]
        pred = predicted_coefficients(dec, x0, gammas)
        c0 = dec.u.T @ x0
        assert np.allclose(pred[1], c0 * (1 - 0.37 * dec.lam))

    def test_zero_eigenvalue_freezes_coefficient(self, np_rng):
        # hand-built decomposition with a zero tail eigenvalue
        d = 4
        q, _ = np.linalg.qr(np_rng.normal(size=(d, d)))
        lam = np.array([2.0, 1.0, 0.5, 0.0])
        dec = SpectralDecomposition(u=q, lam=lam, q=np.eye(d),
                                    lam_sqrt=np.sqrt(lam), alpha=np.sqrt(lam) * np.eye(d))
        x0 = np_rng.normal(size=d)
        pred = predicted_coefficients(dec, x0, [0.1] * 12)
        c0 = dec.u.T @ x0
        assert np.allclose(pred[:, 3], c0[3])

    def test_matches_simulation(self, np_rng):
        for _ in range(10):
            d = int(np_rng.integers(3, 12))
            dw = _random_delta(np_rng, d)
            x0 = np_rng.normal(size=d)
            traj = simulate_dynamics(dw, x0, 1e-2, 60)
            dec = spectral_decomposition(dw)
            actual = coefficient_series(dec, traj.xs)
            pred = predicted_coefficients(dec, x0, traj.gammas)
            err = np.abs(actual - pred) / (np.abs(pred) + 1e-12)
            assert err.max() <= 1e-10


class TestSimilarityBound:
    def _dec(self, np_rng, d=6):
        return spectral_decomposition(_random_delta(np_rng, d))

    def test_zero_tail_is_one(self, np_rng):
        dec = self._dec(np_rng)
        c0 = np.array([1.0, 2.0, 3.0, 0.0, 0.0, 0.0])
        assert similarity_upper_bound(dec, 0, c0, 3) == pytest.approx(1.0)

    def test_hand_value(self):
        d = 2
        dec = SpectralDecomposition(u=np.eye(d), lam=np.array([1.0, 0.5]),
                                    q=np.eye(d), lam_sqrt=np.array([1.0, np.sqrt(0.5)]),
                                    alpha=np.array([[1.0, 0.0], [0.0, 1.0]]))
        # head energy 1, tail energy 1
        assert similarity_upper_bound(dec, 0, np.array([0.0, 1.0]), 1) == pytest.approx(1 / np.sqrt(2))
        big = similarity_upper_bound(dec, 0, np.array([0.0, 1000.0]), 1)
        assert big == pytest.approx(1 / np.sqrt(1 + 1e6))

    def test_monotone_in_tail_energy(self, np_rng):
        dec = self._dec(np_rng)
        c0 = np_rng.normal(size=6)
        k = 2
        base = similarity_upper_bound(dec, 1, c0, k)
        grown = c0.copy()
        grown[k:] *= 3.0
        assert similarity_upper_bound(dec, 1, grown, k) <= base

    def test_invalid_k(self, np_rng):
        dec = self._dec(np_rng)
        with pytest.raises(InvalidKError):
            similarity_upper_bound(dec, 0, np.zeros(6), 0)


class TestTailEnergy:
    def test_head_vector_zero(self, np_rng):
        dec = spectral_decomposition(_random_delta(np_rng, 5))
        x = 2.0 * dec.u[:, 0] - dec.u[:, 1]
        assert tail_energy(x, dec, 2) == pytest.approx(0.0, abs=1e-20)

    def test_last_eigenvector_unit(self, np_rng):
        dec = spectral_decomposition(_random_delta(np_rng, 5))
        for k in (1, 2, 4):
            assert tail_energy(dec.u[:, 4], dec, k) == pytest.approx(1.0)

    def test_mixed(self, np_rng):
        dec = spectral_decomposition(_random_delta(np_rng, 5))
        x = (dec.u[:, 0] + dec.u[:, 4]) / np.sqrt(2)
        assert tail_energy(x, dec, 1) == pytest.approx(0.5)

    def test_weight_rows_beat_large_sigma_gaussian(self):
        # the quantitative face of the initialization principle: rows of a
        # long-tailed downstream weight carry a smaller tail-energy fraction
        # than isotropic draws (medians over 20 seeds)
        d, k = 16, 3
        wr_fracs, g_fracs = [], []
        for seed in range(20):
            stream = RngStream(seed)
            dw = power_law_delta(stream, d, p=2.0, scale=1.0)
            dec = spectral_decomposition(dw)
            wi = dw  # downstream weight with pretrained part zero
            row = wi[int(stream.integers(0, d)), :]
            wr_fracs.append(tail_energy(row, dec, k) / (np.linalg.norm(row) ** 2))
            g = 10.0 * stream.normal_vector(d)
            g_fracs.append(tail_energy(g, dec, k) / (np.linalg.norm(g) ** 2))
        assert np.median(wr_fracs) <= np.median(g_fracs)

    def test_csv(self, tmp_path, np_rng):
        dw = _random_delta(np_rng, 4)
        dec = spectral_decomposition(dw)
        x0 = np_rng.normal(size=4)
        traj = simulate_dynamics(dw, x0, 1e-2, 5)
        pred = predicted_coefficients(dec, x0, traj.gammas)
        write_trajectory_csv(tmp_path / "t.csv", dec, traj, pred)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "t,i,c,predicted"
        assert len(lines) == 1 + 6 * 4
