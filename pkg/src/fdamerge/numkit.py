"""Dense numerical kernel: matrices, distances, SVD, NNLS, seeded randomness.

Matrices are plain 2-D float64 numpy arrays, row-major, finite. The helpers
here validate those invariants at module boundaries so the rest of the
package can assume them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConvergenceFailureError,
    DimensionMismatchError,
    NumericalError,
    ShapeMismatchError,
    ZeroNormError,
)

# Norms below this are treated as zero by cosine-type operations.
ZERO_NORM_FLOOR = 1e-300


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"{name}: expected 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ShapeMismatchError(f"{name}: empty matrix {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name}: non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatchError(f"{name}: expected 1-D, got shape {v.shape}")
    if v.size == 0:
        raise ShapeMismatchError(f"{name}: empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"{name}: non-finite entries")
    return v


def check_finite(a: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name}: non-finite entries")
    return a


class RngStream:
    """Deterministic random stream backed by numpy's PCG64 generator.

    The same 64-bit seed reproduces the same sample sequence on every
    platform (PCG64 is a documented counter-based generator). State advances
    by interior mutation; do not share one stream across threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> "RngStream":
        """Derive an independent stream from this seed and integer keys."""
        words = np.random.SeedSequence([self.seed & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]]).generate_state(2)
        return RngStream(int(words[0]) << 32 | int(words[1]))

    def normal(self, rows: int, cols: int) -> np.ndarray:
        return self._gen.standard_normal((rows, cols))

    def normal_vector(self, n: int) -> np.ndarray:
        return self._gen.standard_normal(n)

    def integers(self, low: int, high: int, size: int | None = None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian_matrix(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    """Standard-normal matrix; deterministic per stream state."""
    if rows < 1 or cols < 1:
        raise ShapeMismatchError(f"gaussian_matrix: dims must be positive, got {rows}x{cols}")
    return rng.normal(rows, cols)


def cos_dist(a, b) -> float:
    """1 - <vec a, vec b> / (||a||_F ||b||_F), in [0, 2].

    Invariant under positive rescaling of either argument.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cos_dist: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_FLOOR or nb < ZERO_NORM_FLOOR:
        raise ZeroNormError("cos_dist: zero-norm operand")
    d = 1.0 - float(np.vdot(a, b)) / (na * nb)
    return min(max(d, 0.0), 2.0)


@dataclass(frozen=True)
class SvdResult:
    """m = u @ diag(s) @ vt with orthonormal u columns / vt rows, s sorted."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def svd(m) -> SvdResult:
    """Thin SVD with a verified reconstruction bound of 1e-10 relative."""
    m = as_matrix(m, "svd input")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailureError(f"svd did not converge: {exc}") from None
    recon = (u * s) @ vt
    rel = np.linalg.norm(recon - m) / max(1.0, np.linalg.norm(m))
    if rel > 1e-10:
        raise ConvergenceFailureError(f"svd reconstruction error {rel:.3e} exceeds 1e-10")
    return SvdResult(u=u, s=s, vt=vt)


def nnls(a, b, max_iter: int | None = None) -> np.ndarray:
    """Lawson-Hanson active-set solver for min ||a x - b||_2 s.t. x >= 0.

    Satisfies the KKT conditions: for every j either x_j > 0 and the
    gradient coordinate (a^T(ax-b))_j vanishes, or x_j = 0 and that
    coordinate is >= 0, both up to 1e-8 * ||a^T b||_inf.
    """
    a = as_matrix(a, "nnls a")
    b = as_vector(b, "nnls b")
    m, n = a.shape
    if b.shape[0] != m:
        raise DimensionMismatchError(f"nnls: a has {m} rows, b has length {b.shape[0]}")
    if max_iter is None:
        max_iter = max(30, 3 * n)

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(a.T @ b))))

    outer = 0
    while True:
        w = a.T @ (b - a @ x)
        free = ~passive
        if not free.any() or float(np.max(w[free])) <= tol:
            return x
        outer += 1
        if outer > max_iter:
            raise ConvergenceFailureError("nnls: active-set iteration cap exceeded")
        cand = np.where(free)[0]
        passive[cand[np.argmax(w[cand])]] = True

        while True:
            idx = np.where(passive)[0]
            s_sub, *_ = np.linalg.lstsq(a[:, idx], b, rcond=None)
            if float(np.min(s_sub)) >= -1e-14 * max(1.0, float(np.max(np.abs(s_sub)))):
                x = np.zeros(n)
                x[idx] = np.maximum(s_sub, 0.0)
                break
            # Step from x toward s until the first passive coordinate hits zero,
            # then drop coordinates pinned at zero from the passive set.
            s_full = np.zeros(n)
            s_full[idx] = s_sub
            neg = idx[s_sub <= 0.0]
            denom = x[neg] - s_full[neg]
            ratios = np.where(denom > 0.0, x[neg] / np.where(denom > 0.0, denom, 1.0), 0.0)
            alpha = float(np.min(ratios))
            x = x + alpha * (s_full - x)
            x[neg[ratios <= alpha]] = 0.0
            x[x < 0.0] = 0.0
            passive &= x > 0.0
