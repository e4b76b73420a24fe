"""Internal expression-graph builders shared by construction and adaptation.

Biases enter graphs as column matrices (q, 1); `param_binding` reshapes the
stored 1-D bias arrays accordingly.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import difftape as dt
from .errors import NumericalError
from .netmodel import ACT_GELU, ACT_TANH, AffineBlock, Block, DistKind, FfnBlock

# Smoothing half-width for the differentiable L1 surrogate |u| ~ u*tanh(u/eps).
# Exact to machine precision once |u| >> eps.
L1_SMOOTH_EPS = 1e-9


def _mat_shapes(block: Block) -> list[tuple[str, int, int]]:
    if isinstance(block, AffineBlock):
        return [("w", block.out_dim, block.in_dim), ("b", block.out_dim, 1)]
    return [("w1", block.hidden_dim, block.in_dim), ("b1", block.hidden_dim, 1),
            ("w2", block.out_dim, block.hidden_dim), ("b2", block.out_dim, 1)]


def param_variables(block: Block, prefix: str = "p.") -> dict[str, dt.Expr]:
    return {name: dt.variable(prefix + name, r, c) for name, r, c in _mat_shapes(block)}


def param_constants(block: Block) -> dict[str, dt.Expr]:
    return {name: dt.constant(val.reshape(-1, 1) if val.ndim == 1 else val)
            for name, val in block.param_items()}


def param_binding(block: Block, prefix: str = "p.") -> dict[str, np.ndarray]:
    return {prefix + name: (val.reshape(-1, 1) if val.ndim == 1 else val)
            for name, val in block.param_items()}


def block_forward(block: Block, params: Mapping[str, dt.Expr], x: dt.Expr) -> dt.Expr:
    """Block output as an expression; x is a (d, 1) column."""
    if isinstance(block, AffineBlock):
        return dt.add(dt.matmul(params["w"], x), params["b"])
    pre = dt.add(dt.matmul(params["w1"], x), params["b1"])
    hidden = dt.tanh(pre) if block.activation == ACT_TANH else dt.smooth_gelu(pre)
    if block.activation not in (ACT_TANH, ACT_GELU):
        raise NumericalError(f"non-smooth activation {block.activation!r} in graph")
    return dt.add(dt.matmul(params["w2"], hidden), params["b2"])


def pair_dist(kind: DistKind, y0: dt.Expr, y1: dt.Expr) -> dt.Expr:
    """Per-anchor representation discrepancy as a 1x1 expression.

    Cosine uses 0.5 ||y0/||y0|| - y1/||y1||||^2, identically 1 - cos, which
    makes coincident outputs give exactly-zero values and gradients. L1 is
    the smooth surrogate sum d*tanh(d/eps).
    """
    kind = DistKind(kind)
    if kind == DistKind.COSINE:
        u0 = dt.safe_divide(y0, dt.vector_norm(y0))
        u1 = dt.safe_divide(y1, dt.vector_norm(y1))
        r = dt.sub(u0, u1)
        return dt.smul(0.5, dt.inner_product(r, r))
    d = dt.sub(y0, y1)
    if kind == DistKind.L2:
        return dt.smul(0.5, dt.inner_product(d, d))
    return dt.sum_entries(dt.hadamard(d, dt.tanh(dt.smul(1.0 / L1_SMOOTH_EPS, d))))


def summed_dist(kind: DistKind, block0: Block, params0: Mapping[str, dt.Expr],
                block_i: Block, params_i: Mapping[str, dt.Expr],
                xs: list[dt.Expr]) -> dt.Expr:
    """Sum over anchors of Dist(block(params0, x), block(params_i, x))."""
    total = None
    for x in xs:
        term = pair_dist(kind, block_forward(block0, params0, x),
                         block_forward(block_i, params_i, x))
        total = term if total is None else dt.add(total, term)
    return total


def block_delta(block0: Block, block_i: Block) -> dict[str, np.ndarray]:
    """Per-parameter deltas block_i - block0, biases as columns."""
    p0 = dict(block0.param_items())
    out = {}
    for name, vi in block_i.param_items():
        d = vi - p0[name]
        out[name] = d.reshape(-1, 1) if d.ndim == 1 else d
    return out
