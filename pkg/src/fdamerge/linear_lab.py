"""Exact verification bench for the linear-model theory.

Simulates the single-anchor update rule x_{t+1} = x_t + eta beta_t
(dW^T dW) x_t with beta_t = -1/(||dW||_F ||dW x_t|| ||x_t||), checks the
coefficient product formula c_t^i = c_0^i prod_j (1 - gamma_j lambda_i)
against it, and evaluates the similarity upper bound that motivates
limiting tail energy at initialization.

The update rule drops the sigma_t x_t term of the full closed-form step
(eta sigma_t is a small positive number); pass include_radial=True for the
unapproximated affine form to quantify the gap. The coefficient product runs
over executed steps (gamma_seq[0..t-1]); the recursion proof fixes the
statement's 1-based product indexing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateStartError,
    InvalidKError,
    RankDeficientError,
    ShapeMismatchError,
    ZeroNormError,
)
from .numkit import as_matrix, as_vector

_RANK_RTOL = 1e-12


@dataclass
class LinearTrajectory:
    """Iterates and per-step scalars of the single-anchor dynamics.

    xs has T+1 rows; betas/sigmas/gammas have T entries. beta_t < 0 and
    sigma_t > 0 always; gamma_t = -eta beta_t > 0 whenever eta > 0.
    """

    xs: np.ndarray
    betas: np.ndarray
    sigmas: np.ndarray
    gammas: np.ndarray
    eta: float
    delta_w: np.ndarray


@dataclass
class SpectralDecomposition:
    """Eigenstructure of dW^T dW plus the dW = q diag(lam_sqrt) u^T factorization.

    u columns are the eigenvectors (descending eigenvalues lam); alpha rows
    are the coefficients of dW's rows on that basis: alpha = q @ diag(lam_sqrt).
    """

    u: np.ndarray
    lam: np.ndarray
    q: np.ndarray
    lam_sqrt: np.ndarray
    alpha: np.ndarray

    @property
    def dim(self) -> int:
        return self.u.shape[0]


def spectral_decomposition(delta_w) -> SpectralDecomposition:
    """Factor a full-rank square dW; verifies orthonormality and reconstruction."""
    dw = as_matrix(delta_w, "delta_w")
    if dw.shape[0] != dw.shape[1]:
        raise ShapeMismatchError(f"lab operates on square dW, got {dw.shape}")
    gram = dw.T @ dw
    lam, u = np.linalg.eigh(gram)
    lam = lam[::-1].copy()
    u = u[:, ::-1].copy()
    if lam[-1] <= _RANK_RTOL * max(lam[0], 1.0):
        raise RankDeficientError("dW^T dW has a (numerically) zero eigenvalue")
    lam_sqrt = np.sqrt(lam)
    q = dw @ u / lam_sqrt
    recon_err = np.linalg.norm((q * lam_sqrt) @ u.T - dw) / np.linalg.norm(dw)
    ortho_err = np.linalg.norm(u.T @ u - np.eye(dw.shape[0]))
    if recon_err > 1e-10 or ortho_err > 1e-10:
        raise RankDeficientError(
            f"decomposition failed: recon {recon_err:.2e}, ortho {ortho_err:.2e}")
    return SpectralDecomposition(u=u, lam=lam, q=q, lam_sqrt=lam_sqrt, alpha=q * lam_sqrt)


def simulate_dynamics(delta_w, x0, eta: float, steps: int,
                      include_radial: bool = False) -> LinearTrajectory:
    """Run the anchor update rule for `steps` iterations from x0."""
    dw = as_matrix(delta_w, "delta_w")
    x = as_vector(x0, "x0").copy()
    if np.linalg.norm(x) == 0.0:
        raise DegenerateStartError("x0 must be nonzero")
    sv = np.linalg.svd(dw, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise RankDeficientError("dW must be full rank")
    nf = float(np.linalg.norm(dw))
    gram = dw.T @ dw

    xs = np.empty((steps + 1, x.shape[0]))
    betas = np.empty(steps)
    sigmas = np.empty(steps)
    xs[0] = x
    for t in range(steps):
        nx = float(np.linalg.norm(x))
        ndx = float(np.linalg.norm(dw @ x))
        if nx == 0.0 or ndx == 0.0:
            raise ZeroNormError(f"iterate collapsed to zero at step {t}")
        betas[t] = -1.0 / (nf * ndx * nx)
        sigmas[t] = ndx / (nf * nx**3)
        scale = (1.0 + eta * sigmas[t]) if include_radial else 1.0
        x = scale * x + eta * betas[t] * (gram @ x)
        xs[t + 1] = x
    return LinearTrajectory(xs=xs, betas=betas, sigmas=sigmas,
                            gammas=-eta * betas, eta=eta, delta_w=dw)


def coefficient_series(decomp: SpectralDecomposition, xs: np.ndarray) -> np.ndarray:
    """c_t^i = u_i^T x_t for every recorded iterate; shape (T+1, d)."""
    return np.asarray(xs) @ decomp.u


def predicted_coefficients(decomp: SpectralDecomposition, x0,
                           gammas: Sequence[float]) -> np.ndarray:
    """Coefficient product formula c_t^i = c_0^i prod_{j<t} (1 - gamma_j lam_i).

    Row t uses the first t entries of gammas; shape (len(gammas)+1, d).
    """
    x0 = as_vector(x0, "x0")
    if np.linalg.norm(x0) == 0.0:
        raise DegenerateStartError("x0 must be nonzero")
    gam = np.asarray(gammas, dtype=np.float64)
    c0 = decomp.u.T @ x0
    out = np.empty((gam.shape[0] + 1, decomp.dim))
    out[0] = c0
    for t in range(gam.shape[0]):
        out[t + 1] = out[t] * (1.0 - gam[t] * decomp.lam)
    return out


def similarity_upper_bound(decomp: SpectralDecomposition, j: int, c0, k: int) -> float:
    """sqrt(sum_{i<=k} alpha_ji^2) / sqrt(sum_{i<=k} alpha_ji^2 + sum_{i>k} c0_i^2)."""
    d = decomp.dim
    if not 1 <= k <= d:
        raise InvalidKError(f"k must be in [1, {d}], got {k}")
    if not 0 <= j < decomp.alpha.shape[0]:
        raise InvalidKError(f"row index {j} out of range")
    c0 = as_vector(c0, "c0")
    if c0.shape[0] != d:
        raise ShapeMismatchError(f"c0 length {c0.shape[0]} vs dim {d}")
    head = float(np.sum(decomp.alpha[j, :k] ** 2))
    tail = float(np.sum(c0[k:] ** 2))
    if head + tail <= 0.0:
        raise ZeroNormError("similarity bound denominator is zero")
    return float(np.sqrt(head) / np.sqrt(head + tail))


def tail_energy(x, decomp: SpectralDecomposition, k: int) -> float:
    """Energy of x on the eigenvectors beyond the top k: sum_{i>k} (u_i^T x)^2."""
    d = decomp.dim
    if not 1 <= k < d:
        raise InvalidKError(f"k must be in [1, {d}), got {k}")
    x = as_vector(x, "x")
    if x.shape[0] != d:
        raise ShapeMismatchError(f"x length {x.shape[0]} vs dim {d}")
    coeffs = decomp.u.T @ x
    return float(np.sum(coeffs[k:] ** 2))


def power_law_delta(rng, d: int, p: float = 2.0, scale: float = 1.0) -> np.ndarray:
    """Random square dW with singular values scale * i^(-p) (long-tailed,
    strictly ordered). rng is a numkit RngStream."""
    qf, _ = np.linalg.qr(rng.normal(d, d))
    uf, _ = np.linalg.qr(rng.normal(d, d))
    s = scale * np.arange(1, d + 1, dtype=np.float64) ** (-p)
    return qf @ np.diag(s) @ uf.T


def write_trajectory_csv(path, decomp: SpectralDecomposition,
                         traj: LinearTrajectory, predicted: np.ndarray) -> None:
    """CSV rows (t, i, c_t_i, predicted_c_t_i), 17 significant digits."""
    actual = coefficient_series(decomp, traj.xs)
    lines = ["t,i,c,predicted"]
    for t in range(actual.shape[0]):
        for i in range(actual.shape[1]):
            lines.append(f"{t},{i},{actual[t, i]:.17g},{predicted[t, i]:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
