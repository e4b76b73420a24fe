"""Anchor construction: initialize synthetic inputs and optimize them so the
parameter gradient they induce at the pretrained block aligns with the task
vector.

The matching loss is the cosine distance between the (signed) induced
gradient and the block task vector, with all block parameters concatenated
into one vector. Under the default "descent" sign convention the negative
induced gradient is aligned with the task vector, which is the direction the
adaptation stage actually moves; "literal" aligns the raw gradient instead
and reproduces the closed-form single-anchor dynamics.

Anchor-set files: magic "FDAANCH1", u16 LE version, u32 task id, u32 block
index, u32 dims (d, n), u8 init-scheme tag (0=weight-rows, 1=scaled-gaussian)
plus sigma as float64 LE (0.0 for weight-rows), u8 sign tag (0=literal,
1=descent), anchors row-major float64 LE, loss trace (u32 length + float64
values), and a trailing u32 CRC32 of everything after the magic.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import _graphs, difftape as dt
from .errors import (
    FormatViolationError,
    InvalidSigmaError,
    IoError,
    NumericalError,
    ShapeMismatchError,
    ZeroNormError,
    ZeroTaskVectorError,
)
from .merge import AdamState, adam_step
from .netmodel import (
    AffineBlock,
    Block,
    Checkpoint,
    DistKind,
    check_same_architecture,
    forward_block,
)
from .numkit import RngStream, ZERO_NORM_FLOOR, cos_dist, gaussian_matrix

ANCHOR_MAGIC = b"FDAANCH1"
ANCHOR_VERSION = 1

SIGN_LITERAL = "literal"
SIGN_DESCENT = "descent"

WEIGHT_ROWS = "weight_rows"
SCALED_GAUSSIAN = "scaled_gaussian"


@dataclass(frozen=True)
class InitScheme:
    """Anchor initialization: rows of the downstream input-facing weight, or
    scaled standard-normal draws."""

    kind: str
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in (WEIGHT_ROWS, SCALED_GAUSSIAN):
            raise InvalidSigmaError(f"unknown init scheme {self.kind!r}")
        if self.kind == SCALED_GAUSSIAN and not self.sigma > 0.0:
            raise InvalidSigmaError(f"sigma must be positive, got {self.sigma}")

    @staticmethod
    def weight_rows() -> "InitScheme":
        return InitScheme(WEIGHT_ROWS)

    @staticmethod
    def scaled_gaussian(sigma: float) -> "InitScheme":
        return InitScheme(SCALED_GAUSSIAN, sigma)


@dataclass(frozen=True)
class ConstructionConfig:
    steps: int = 1200
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dist: DistKind = DistKind.COSINE
    sign: str = SIGN_DESCENT
    n_anchors: int = 64
    init: InitScheme = InitScheme.scaled_gaussian(0.01)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0.0 or self.n_anchors < 1:
            raise ValueError("lr must be positive and n_anchors >= 1")
        if self.sign not in (SIGN_LITERAL, SIGN_DESCENT):
            raise ValueError(f"unknown sign convention {self.sign!r}")


@dataclass
class AnchorSet:
    """One task's anchors for one block plus the construction trace."""

    task_id: int
    block_index: int
    x: np.ndarray
    init_scheme: InitScheme
    sign: str
    loss_trace: np.ndarray
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    @property
    def n_anchors(self) -> int:
        return self.x.shape[1]


def _input_facing_weight(block: Block) -> np.ndarray:
    return block.w if isinstance(block, AffineBlock) else block.w1


def init_anchors(scheme: InitScheme, block_i: Block, n: int, rng: RngStream) -> np.ndarray:
    """Draw n anchor columns in the block's input space.

    weight-rows: columns are rows of the downstream block's input-facing
    weight (w for affine, w1 for ffn), sampled uniformly with replacement.
    scaled-gaussian: sigma times standard-normal entries.
    """
    if n < 1:
        raise ShapeMismatchError("n must be >= 1")
    d = block_i.in_dim
    if scheme.kind == WEIGHT_ROWS:
        w = _input_facing_weight(block_i)
        rows = rng.integers(0, w.shape[0], size=n)
        return w[rows, :].T.copy()
    return scheme.sigma * gaussian_matrix(rng, d, n)


class _MatchingProgram:
    """Compiled matching loss and its anchor gradients for one block pair.

    The inner parameter gradient is built once as a graph over the anchor
    variables; the outer gradient differentiates through it (nested
    differentiation). Parameters of the pretrained block enter as variables
    bound to fixed values so the same program serves the finite-difference
    harness.
    """

    def __init__(self, block0: Block, block_i: Block, dist: DistKind, sign: str, n: int):
        delta = _graphs.block_delta(block0, block_i)
        tau_sq = sum(float((v * v).sum()) for v in delta.values())
        if tau_sq <= 0.0:
            raise ZeroTaskVectorError("block task vector is all-zero")
        params = _graphs.param_variables(block0)
        consts = _graphs.param_constants(block_i)
        self.xs = [dt.variable(f"x{j}", block0.in_dim, 1) for j in range(n)]
        total = _graphs.summed_dist(dist, block0, params, block_i, consts, self.xs)

        names = sorted(params)
        grads = dt.gradients(total, [params[k] for k in names])
        num = None
        for name, g in zip(names, grads):
            term = dt.inner_product(g, dt.constant(delta[name]))
            num = term if num is None else dt.add(num, term)
        den = dt.scalar_mul(dt.constant([[np.sqrt(tau_sq)]]), dt.vector_norm(*grads))
        signed = 1.0 if sign == SIGN_LITERAL else -1.0
        self.loss = dt.sub(dt.constant([[1.0]]), dt.smul(signed, dt.safe_divide(num, den)))
        self.anchor_grads = dt.gradients(self.loss, self.xs)
        self.graph = dt.CompiledGraph([self.loss, *self.anchor_grads])
        self.theta_binding = _graphs.param_binding(block0)
        self.n = n

    def run(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        binding = dict(self.theta_binding)
        for j in range(self.n):
            binding[f"x{j}"] = x[:, j:j + 1]
        out = self.graph.run(binding)
        grad = np.concatenate(out[1:], axis=1)
        return float(out[0][0, 0]), grad


def induced_gradient(block0: Block, block_i: Block, x: np.ndarray,
                     dist: DistKind) -> dict[str, np.ndarray]:
    """Gradient of the summed anchor discrepancy w.r.t. the pretrained block's
    parameters, evaluated at those parameters. Biases come back 1-D."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != block0.in_dim:
        raise ShapeMismatchError(f"anchors must be ({block0.in_dim}, n), got {x.shape}")
    if DistKind(dist) == DistKind.COSINE:
        _check_output_norms(block0, block_i, x)
    params = _graphs.param_variables(block0)
    consts = _graphs.param_constants(block_i)
    xs = [dt.variable(f"x{j}", block0.in_dim, 1) for j in range(x.shape[1])]
    total = _graphs.summed_dist(dist, block0, params, block_i, consts, xs)
    names = sorted(params)
    grads = dt.gradients(total, [params[k] for k in names])
    binding = _graphs.param_binding(block0)
    for j in range(x.shape[1]):
        binding[f"x{j}"] = x[:, j:j + 1]
    values = dt.CompiledGraph(grads).run(binding)
    shapes = {name: p.shape for name, p in block0.param_items()}
    return {name: v.reshape(shapes[name]) for name, v in zip(names, values)}


def matching_loss(grad: Mapping[str, np.ndarray], tau_block: Block, sign: str) -> float:
    """cos_dist between the signed induced gradient and the block task vector,
    parameters concatenated into one vector."""
    if sign not in (SIGN_LITERAL, SIGN_DESCENT):
        raise NumericalError(f"unknown sign convention {sign!r}")
    g_parts, t_parts = [], []
    for name, tau in tau_block.param_items():
        if name not in grad:
            raise ShapeMismatchError(f"missing gradient entry {name!r}")
        g = np.asarray(grad[name], dtype=np.float64)
        if g.shape != tau.shape:
            raise ShapeMismatchError(f"{name}: grad {g.shape} vs tau {tau.shape}")
        g_parts.append(g.ravel())
        t_parts.append(tau.ravel())
    g = np.concatenate(g_parts)
    if sign == SIGN_DESCENT:
        g = -g
    return cos_dist(g.reshape(1, -1), np.concatenate(t_parts).reshape(1, -1))


def _check_output_norms(block0: Block, block_i: Block, x: np.ndarray) -> np.ndarray:
    """Columns whose output under either block has (numerically) zero norm."""
    y0 = forward_block(block0, x)
    y1 = forward_block(block_i, x)
    n0 = np.linalg.norm(y0, axis=0)
    n1 = np.linalg.norm(y1, axis=0)
    return (n0 < ZERO_NORM_FLOOR) | (n1 < ZERO_NORM_FLOOR)


def _optimize_anchors(block0: Block, block_i: Block, x0: np.ndarray,
                      cfg: ConstructionConfig, steps: int, rng: RngStream,
                      snapshot_steps: Sequence[int] = ()) -> tuple[np.ndarray, np.ndarray, dict]:
    program = _MatchingProgram(block0, block_i, cfg.dist, cfg.sign, x0.shape[1])
    x = np.array(x0, dtype=np.float64)
    cosine = DistKind(cfg.dist) == DistKind.COSINE
    nudge_rng = rng.child(7)
    wanted = set(snapshot_steps)
    snapshots: dict[int, np.ndarray] = {}

    def guard(x_cur: np.ndarray) -> np.ndarray:
        # Anchors mapped to zero output under cosine get one seeded nudge,
        # then the step retries; a second failure is a hard error.
        if not cosine:
            return x_cur
        bad = _check_output_norms(block0, block_i, x_cur)
        if not bad.any():
            return x_cur
        d = x_cur.shape[0]
        for j in np.where(bad)[0]:
            u = nudge_rng.normal_vector(d)
            x_cur = x_cur.copy()
            x_cur[:, j] = x_cur[:, j] + 1e-8 * u / np.linalg.norm(u)
        if _check_output_norms(block0, block_i, x_cur).any():
            raise ZeroNormError("anchor output norm is zero even after nudge")
        return x_cur

    state = AdamState.init({"x": x}, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    trace = np.empty(steps + 1)
    if 0 in wanted:
        snapshots[0] = x.copy()
    for t in range(steps):
        x = guard(x)
        loss, grad = program.run(x)
        trace[t] = loss
        state, updated = adam_step(state, {"x": x}, {"x": grad}, cfg.lr)
        x = updated["x"]
        if (t + 1) in wanted:
            snapshots[t + 1] = x.copy()
    x = guard(x)
    trace[steps], _ = program.run(x)
    return x, trace, snapshots


def construct_fdas(theta_0: Checkpoint, theta_i: Checkpoint, l: int,
                   cfg: ConstructionConfig, rng: RngStream, task_id: int = 0,
                   snapshot_steps: Sequence[int] = ()) -> AnchorSet:
    """Stage-I construction for one (task, block) pair.

    Initializes per cfg.init, then runs cfg.steps full-batch Adam updates of
    the anchors against the matching loss via nested differentiation. The loss
    trace has steps + 1 entries (value before each update plus the final one).
    """
    check_same_architecture(theta_0, theta_i)
    block0 = theta_0.blocks[l]
    block_i = theta_i.blocks[l]
    x0 = init_anchors(cfg.init, block_i, cfg.n_anchors, rng)
    x, trace, snaps = _optimize_anchors(block0, block_i, x0, cfg, cfg.steps, rng,
                                        snapshot_steps)
    return AnchorSet(task_id=task_id, block_index=l, x=x, init_scheme=cfg.init,
                     sign=cfg.sign, loss_trace=trace, snapshots=snaps)


def closed_form_anchor_gradient(x: np.ndarray, w0: np.ndarray, wi: np.ndarray) -> np.ndarray:
    """Ascent direction of the literal single-anchor objective for a bias-free
    affine block under the squared-error distance:

        delta = sigma_t x + beta_t (dW^T dW) x,
        sigma_t = ||dW x|| / (||dW||_F ||x||^3),
        beta_t  = -1 / (||dW||_F ||dW x|| ||x||),  dW = wi - w0.

    Equals minus the nested-differentiation gradient of the literal matching
    loss at x.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    dw = np.asarray(wi, dtype=np.float64) - np.asarray(w0, dtype=np.float64)
    if dw.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"x length {x.shape[0]} vs weight cols {dw.shape[1]}")
    nx = float(np.linalg.norm(x))
    dwx = dw @ x
    ndx = float(np.linalg.norm(dwx))
    nf = float(np.linalg.norm(dw))
    from .errors import DegenerateAnchorError
    if nx < ZERO_NORM_FLOOR or ndx < ZERO_NORM_FLOOR or nf < ZERO_NORM_FLOOR:
        raise DegenerateAnchorError("closed form requires x != 0 and dW x != 0")
    sigma_t = ndx / (nf * nx**3)
    beta_t = -1.0 / (nf * ndx * nx)
    return sigma_t * x + beta_t * (dw.T @ dwx)


def tune_sigma(theta_0: Checkpoint, theta_i: Checkpoint, l: int,
               candidates: Sequence[float], probe_steps: int, rng: RngStream,
               cfg: ConstructionConfig | None = None) -> float:
    """Probe each candidate sigma for a few steps from one shared unit draw
    (rescaled per candidate) and return the sigma with the lowest final
    matching loss; ties break toward the smaller sigma."""
    if not candidates:
        raise ValueError("need at least one sigma candidate")
    for s in candidates:
        if not s > 0.0:
            raise InvalidSigmaError(f"sigma candidates must be positive, got {s}")
    cfg = cfg or ConstructionConfig()
    check_same_architecture(theta_0, theta_i)
    block0 = theta_0.blocks[l]
    block_i = theta_i.blocks[l]
    base = gaussian_matrix(rng, block0.in_dim, cfg.n_anchors)
    best_sigma, best_loss = None, None
    for sigma in candidates:
        probe_cfg = replace(cfg, init=InitScheme.scaled_gaussian(sigma))
        _, trace, _ = _optimize_anchors(block0, block_i, sigma * base, probe_cfg,
                                        probe_steps, rng.child(int(1e6 * sigma) & 0x7FFFFFFF))
        final = float(trace[-1])
        if best_loss is None or final < best_loss or (final == best_loss and sigma < best_sigma):
            best_sigma, best_loss = sigma, final
    return best_sigma


# ---------------------------------------------------------------------------
# Anchor-set serialization
# ---------------------------------------------------------------------------

_INIT_TAGS = {WEIGHT_ROWS: 0, SCALED_GAUSSIAN: 1}
_SIGN_TAGS = {SIGN_LITERAL: 0, SIGN_DESCENT: 1}


def save_anchor_set(aset: AnchorSet, path) -> None:
    d, n = aset.x.shape
    parts = [struct.pack("<HIIII", ANCHOR_VERSION, aset.task_id, aset.block_index, d, n),
             struct.pack("<Bd", _INIT_TAGS[aset.init_scheme.kind], aset.init_scheme.sigma),
             struct.pack("<B", _SIGN_TAGS[aset.sign]),
             np.ascontiguousarray(aset.x, dtype="<f8").tobytes(),
             struct.pack("<I", len(aset.loss_trace)),
             np.ascontiguousarray(aset.loss_trace, dtype="<f8").tobytes()]
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    try:
        with open(path, "wb") as fh:
            fh.write(ANCHOR_MAGIC)
            fh.write(payload)
            fh.write(struct.pack("<I", crc))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def load_anchor_set(path) -> AnchorSet:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    if len(raw) < 12 or raw[:8] != ANCHOR_MAGIC:
        raise FormatViolationError(f"{path}: bad magic")
    payload, (crc_stored,) = raw[8:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FormatViolationError(f"{path}: CRC32 mismatch")
    try:
        version, task_id, block_index, d, n = struct.unpack_from("<HIIII", payload, 0)
        off = struct.calcsize("<HIIII")
        init_tag, sigma = struct.unpack_from("<Bd", payload, off)
        off += struct.calcsize("<Bd")
        (sign_tag,) = struct.unpack_from("<B", payload, off)
        off += 1
        x = np.frombuffer(payload, dtype="<f8", count=d * n, offset=off).reshape(d, n).copy()
        off += 8 * d * n
        (trace_len,) = struct.unpack_from("<I", payload, off)
        off += 4
        trace = np.frombuffer(payload, dtype="<f8", count=trace_len, offset=off).copy()
        off += 8 * trace_len
    except (struct.error, ValueError) as exc:
        raise FormatViolationError(f"{path}: truncated payload ({exc})") from None
    if version != ANCHOR_VERSION:
        raise FormatViolationError(f"{path}: unsupported version {version}")
    if off != len(payload):
        raise FormatViolationError(f"{path}: {len(payload) - off} trailing bytes")
    init_kinds = {v: k for k, v in _INIT_TAGS.items()}
    sign_kinds = {v: k for k, v in _SIGN_TAGS.items()}
    if init_tag not in init_kinds or sign_tag not in sign_kinds:
        raise FormatViolationError(f"{path}: unknown init/sign tag")
    scheme = (InitScheme.weight_rows() if init_kinds[init_tag] == WEIGHT_ROWS
              else InitScheme.scaled_gaussian(sigma))
    return AnchorSet(task_id=task_id, block_index=block_index, x=x,
                     init_scheme=scheme, sign=sign_kinds[sign_tag], loss_trace=trace)
