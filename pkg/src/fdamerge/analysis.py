"""Measurement suite: anchor spectra, subspace similarity against reference
features, and the non-negative projection-energy ratio of adaptation
directions onto sampled finetuning-update cones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    InvalidKError,
    NumericalError,
    ShapeMismatchError,
    ZeroDirectionError,
    ZeroMatrixError,
)
from .netmodel import Checkpoint, check_same_architecture, flatten_block
from .numkit import as_matrix, nnls, svd

TAIL_FRACTION = 0.2  # top-20% head convention shared by the spectra and similarity reports


@dataclass
class SpectralReport:
    """Sorted singular values, values normalized by the largest, and the
    energy fraction beyond the top-20% head."""

    singular_values: np.ndarray
    normalized: np.ndarray
    tail_energy_ratio: float


def spectral_report_of(x) -> SpectralReport:
    """Spectral report of a raw anchor/feature matrix (anchors as columns)."""
    x = as_matrix(x, "anchor matrix")
    if np.linalg.norm(x) == 0.0:
        raise ZeroMatrixError("spectral report of an all-zero matrix")
    s = svd(x).s
    head = math.ceil(TAIL_FRACTION * s.shape[0])
    total = float(np.sum(s**2))
    tail = float(np.sum(s[head:] ** 2))
    return SpectralReport(singular_values=s, normalized=s / s[0],
                          tail_energy_ratio=tail / total)


def spectral_report(anchors) -> SpectralReport:
    """Spectral report of an anchor set (or any object with an `x` matrix)."""
    return spectral_report_of(anchors.x if hasattr(anchors, "x") else anchors)


def _top_right_singular_vectors(a: np.ndarray, k: int) -> np.ndarray:
    res = svd(a)
    if res.vt.shape[0] < k:
        raise InvalidKError(
            f"need {k} right singular vectors, matrix provides {res.vt.shape[0]}")
    return res.vt[:k, :].T


def subspace_similarity(a, b, fraction: float) -> float:
    """Normalized trace of the product of the two top-k right-singular-subspace
    projectors, k = ceil(fraction * d); rows are samples, columns the shared
    d-dimensional feature space. 1 for identical spans, 0 for orthogonal ones.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"column dims differ: {a.shape[1]} vs {b.shape[1]}")
    if not 0.0 < fraction <= 1.0:
        raise InvalidKError(f"fraction must be in (0, 1], got {fraction}")
    if np.linalg.norm(a) == 0.0 or np.linalg.norm(b) == 0.0:
        raise ZeroMatrixError("subspace similarity of an all-zero matrix")
    k = math.ceil(fraction * a.shape[1])
    ua = _top_right_singular_vectors(a, k)
    ub = _top_right_singular_vectors(b, k)
    # tr(Ua Ua^T Ub Ub^T) = ||Ua^T Ub||_F^2
    return float(np.sum((ua.T @ ub) ** 2)) / k


@dataclass
class UpdateConeSample:
    """Per-batch finetuning update vectors for one task and block, stacked as
    columns of `vectors` (p x count)."""

    task_id: int
    block_index: int
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = as_matrix(self.vectors, "update vectors")
        if not np.any(self.vectors):
            raise NumericalError("update cone needs at least one nonzero vector")

    @property
    def count(self) -> int:
        return self.vectors.shape[1]


def projection_energy_ratio(direction, cone: UpdateConeSample) -> float:
    """||[dw] alpha|| / ||direction|| with alpha the NNLS coefficients of the
    direction on the sampled update vectors; always in [0, 1]."""
    direction = np.asarray(direction, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(direction))
    if norm < 1e-300:
        raise ZeroDirectionError("projection of a zero direction")
    a = cone.vectors
    if a.shape[0] != direction.shape[0]:
        raise ShapeMismatchError(
            f"direction length {direction.shape[0]} vs cone rows {a.shape[0]}")
    alpha = nnls(a, direction)
    ratio = float(np.linalg.norm(a @ alpha)) / norm
    if ratio > 1.0 + 1e-9:
        raise NumericalError(f"projection ratio {ratio} exceeds 1")
    return ratio


def fda_adaptation_direction(theta_before: Checkpoint, theta_after: Checkpoint,
                             l: int) -> np.ndarray:
    """Flattened parameter movement of block l between two checkpoints."""
    check_same_architecture(theta_before, theta_after)
    return flatten_block(theta_after.blocks[l]) - flatten_block(theta_before.blocks[l])


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_spectra_csv(path, spectra: Mapping[int, SpectralReport]) -> None:
    """Rows (step, j, normalized singular value)."""
    lines = ["step,j,normalized"]
    for step in sorted(spectra):
        for j, val in enumerate(spectra[step].normalized):
            lines.append(f"{step},{j},{val:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_similarity_csv(path, rows: Sequence[tuple[int, int, int, float]]) -> None:
    """Rows (step, block, task, similarity)."""
    lines = ["step,block,task,similarity"]
    for step, block, task, sim in rows:
        lines.append(f"{step},{block},{task},{sim:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_energy_csv(path, rows: Sequence[tuple[int, int, int, float]]) -> None:
    """Rows (step, block, task, projection energy ratio)."""
    lines = ["step,block,task,ratio"]
    for step, block, task, ratio in rows:
        lines.append(f"{step},{block},{task},{ratio:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
