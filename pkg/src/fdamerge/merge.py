"""Parameter-space mergers and anchor-driven adaptation.

Baselines: task arithmetic (uniform lambda), TSV-style per-task SVD
truncation, plain averaging. Adaptation minimizes the summed block-output
discrepancy against the downstream checkpoints over the anchors, block by
block, with mini-batch Adam; starting it from the pretrained checkpoint is
the from-pretrained mode, starting it from a merged checkpoint refines that
merge. Both modes share one code path, so refinement from the pretrained
checkpoint is bit-identical to the from-pretrained mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import _graphs, difftape as dt
from .errors import (
    ArchitectureMismatchError,
    MissingAnchorsError,
    ShapeMismatchError,
)
from .netmodel import (
    Checkpoint,
    DistKind,
    TaskVector,
    apply_task_vectors,
    check_same_architecture,
    forward_block,
)
from .numkit import RngStream, svd

if TYPE_CHECKING:
    from .construct import AnchorSet

DEFAULT_PRETRAIN_LR = 1e-5
DEFAULT_REFINE_LR = 1e-2


@dataclass(frozen=True)
class MergeRecipe:
    """One of: ta (scaled sum), tsv (per-task SVD truncation), average."""

    kind: str
    lam: float = 0.3
    rank_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ta", "tsv", "average"):
            raise ValueError(f"unknown merge recipe {self.kind!r}")
        if self.kind == "ta" and not 0.0 < self.lam <= 1.0:
            raise ValueError(f"ta lambda must be in (0, 1], got {self.lam}")
        if self.kind == "tsv" and not 0.0 < self.rank_fraction <= 1.0:
            raise ValueError(f"tsv rank fraction must be in (0, 1], got {self.rank_fraction}")


def merge_ta(theta_0: Checkpoint, taus: Sequence[TaskVector], lam: float) -> Checkpoint:
    """theta_0 + lam * sum_i tau_i."""
    return apply_task_vectors(theta_0, taus, [lam] * len(taus), name=f"ta({lam:g})")


def merge_average(theta_0: Checkpoint, taus: Sequence[TaskVector]) -> Checkpoint:
    """Mean of the downstream checkpoints."""
    m = len(taus)
    return apply_task_vectors(theta_0, taus, [1.0 / m] * m, name="average")


def _truncate_matrix(delta: np.ndarray, rank_fraction: float) -> np.ndarray:
    k = math.ceil(rank_fraction * min(delta.shape))
    res = svd(delta)
    return (res.u[:, :k] * res.s[:k]) @ res.vt[:k, :]


def merge_tsv(theta_0: Checkpoint, taus: Sequence[TaskVector], rank_fraction: float) -> Checkpoint:
    """Truncate each task vector's weight matrices to their top singular
    components (biases pass through), then sum onto theta_0."""
    if not 0.0 < rank_fraction <= 1.0:
        raise ValueError(f"rank fraction must be in (0, 1], got {rank_fraction}")
    truncated = []
    for tau in taus:
        check_same_architecture(theta_0, tau)
        blocks = []
        for blk in tau.deltas:
            params = {}
            for name, p in blk.param_items():
                params[name] = _truncate_matrix(p, rank_fraction) if p.ndim == 2 else p
            blocks.append(blk.with_params(params))
        truncated.append(TaskVector(blocks, name=tau.name))
    merged = apply_task_vectors(theta_0, truncated, [1.0] * len(truncated),
                                name=f"tsv({rank_fraction:g})")
    return merged


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators; functional (adam_step returns a new one)."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Mapping[str, np.ndarray], beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray], lr: float) -> tuple[AdamState, dict[str, np.ndarray]]:
    """One bias-corrected Adam update; deterministic, inputs untouched."""
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"adam_step {key}: grad {g.shape} vs param {p.shape}")
        m = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_m[key] = m
        new_v[key] = v
        new_p[key] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return (AdamState(m=new_m, v=new_v, step=t, beta1=state.beta1,
                      beta2=state.beta2, eps=state.eps), new_p)


# ---------------------------------------------------------------------------
# Anchor-driven adaptation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptConfig:
    lr: float = DEFAULT_PRETRAIN_LR
    batch_size: int = 128
    epochs: int = 100
    dist: DistKind = DistKind.COSINE
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch size and epochs must be positive")


@dataclass
class AdaptResult:
    checkpoint: Checkpoint
    traces: dict[int, list[float]] = field(default_factory=dict)


class _BlockAdaptProgram:
    """Compiled mean-batch loss + parameter gradients for one block, one batch size."""

    def __init__(self, block, dist: DistKind, batch: int):
        params = _graphs.param_variables(block)
        xs = [dt.variable(f"x{s}", block.in_dim, 1) for s in range(batch)]
        ts = [dt.variable(f"t{s}", block.out_dim, 1) for s in range(batch)]
        total = None
        for x, t in zip(xs, ts):
            term = _graphs.pair_dist(dist, _graphs.block_forward(block, params, x), t)
            total = term if total is None else dt.add(total, term)
        loss = dt.smul(1.0 / batch, total)
        self.param_names = sorted(params)
        grads = dt.gradients(loss, [params[k] for k in self.param_names])
        self.graph = dt.CompiledGraph([loss, *grads])
        self.batch = batch

    def run(self, param_values: Mapping[str, np.ndarray], x_cols: np.ndarray,
            t_cols: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        binding = {"p." + k: v for k, v in param_values.items()}
        for s in range(self.batch):
            binding[f"x{s}"] = x_cols[:, s:s + 1]
            binding[f"t{s}"] = t_cols[:, s:s + 1]
        out = self.graph.run(binding)
        loss = float(out[0][0, 0])
        grads = {k: g for k, g in zip(self.param_names, out[1:])}
        return loss, grads


def _column_targets(block, x: np.ndarray) -> np.ndarray:
    # One column at a time so the arithmetic matches the per-anchor graph
    # bitwise (exact-zero gradients when the parameters already coincide).
    cols = [forward_block(block, x[:, s:s + 1]) for s in range(x.shape[1])]
    return np.concatenate(cols, axis=1)


def adapt(theta_init: Checkpoint, theta_0: Checkpoint, targets: Sequence[Checkpoint],
          anchors: Mapping[tuple[int, int], "AnchorSet"], cfg: AdaptConfig) -> AdaptResult:
    """Minimize the anchor-output discrepancy to the downstream checkpoints.

    Runs independently per block: shuffled mini-batch Adam over the union of
    all tasks' anchors, starting from theta_init's block parameters. Every
    (task, block) pair must have an anchor set. Block independence comes from
    per-block derived shuffle streams, so processing order cannot matter.
    """
    check_same_architecture(theta_init, theta_0)
    for tgt in targets:
        check_same_architecture(theta_init, tgt)
    n_blocks = len(theta_init.blocks)
    for i in range(len(targets)):
        for l in range(n_blocks):
            if (i, l) not in anchors:
                raise MissingAnchorsError(f"no anchor set for task {i}, block {l}")

    new_blocks = []
    traces: dict[int, list[float]] = {}
    for l in range(n_blocks):
        block = theta_init.blocks[l]
        x_parts, t_parts = [], []
        for i in range(len(targets)):
            aset = anchors[(i, l)]
            x = np.asarray(aset.x, dtype=np.float64)
            if x.shape[0] != block.in_dim:
                raise ArchitectureMismatchError(
                    f"anchor dim {x.shape[0]} vs block {l} input dim {block.in_dim}")
            x_parts.append(x)
            t_parts.append(_column_targets(targets[i].blocks[l], x))
        x_all = np.concatenate(x_parts, axis=1)
        t_all = np.concatenate(t_parts, axis=1)
        n_total = x_all.shape[1]

        params = {name: (p.reshape(-1, 1) if p.ndim == 1 else p).copy()
                  for name, p in block.param_items()}
        state = AdamState.init(params)
        programs: dict[int, _BlockAdaptProgram] = {}
        rng = RngStream(cfg.seed).child(l)
        trace = []
        for _ in range(cfg.epochs):
            perm = rng.permutation(n_total)
            epoch_loss = 0.0
            start = 0
            while start < n_total:
                sel = perm[start:start + cfg.batch_size]
                size = len(sel)
                if size not in programs:
                    programs[size] = _BlockAdaptProgram(block, cfg.dist, size)
                loss, grads = programs[size].run(params, x_all[:, sel], t_all[:, sel])
                state, params = adam_step(state, params, grads, cfg.lr)
                epoch_loss += loss * size
                start += size
            trace.append(epoch_loss / n_total)
        flat = {name: (params[name].reshape(-1) if p.ndim == 1 else params[name])
                for name, p in block.param_items()}
        new_blocks.append(block.with_params(flat))
        traces[l] = trace

    return AdaptResult(Checkpoint(new_blocks, name="adapted"), traces)


def write_adapt_trace(path, traces: Mapping[int, Sequence[float]]) -> None:
    """CSV loss trace: columns (block, epoch, loss), 17 significant digits."""
    lines = ["block,epoch,loss"]
    for l in sorted(traces):
        for epoch, loss in enumerate(traces[l]):
            lines.append(f"{l},{epoch},{loss:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
