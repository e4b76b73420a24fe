"""Layer-wise network model: blocks, checkpoints, task vectors, distances.

A network is an ordered list of blocks. Each block is either an affine map
W x + b or a two-layer feed-forward map W2 act(W1 x + b1) + b2. A block's
`activation` field means two different things: for FFN blocks it is the
inner nonlinearity, for affine blocks it is the nonlinearity the enclosing
network applies *after* the block when stacking (forward_block itself never
applies it, so anchors always live in the block's raw input/output spaces).

Checkpoint / task-vector files share one binary layout (External
Interfaces): magic (8 ASCII bytes, "FDACKPT1" or "FDATVEC1"), u16 LE format
version, u32 LE block count, then per block a u8 kind tag (0=affine,
1=ffn), u8 activation tag (0=none, 1=tanh, 2=smooth-gelu), u32 LE dims
(d, h-or-0, q), and the parameters row-major float64 LE in declared order
(w, b for affine; w1, b1, w2, b2 for ffn). A u32 LE CRC32 of everything
after the magic closes the file.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    FormatViolationError,
    IoError,
    NumericalError,
    ShapeMismatchError,
    ZeroNormError,
)
from .numkit import ZERO_NORM_FLOOR, cos_dist

CHECKPOINT_MAGIC = b"FDACKPT1"
TASKVECTOR_MAGIC = b"FDATVEC1"
FORMAT_VERSION = 1

ACT_NONE = "none"
ACT_TANH = "tanh"
ACT_GELU = "smooth-gelu"
_ACT_TAGS = {ACT_NONE: 0, ACT_TANH: 1, ACT_GELU: 2}
_ACT_NAMES = {v: k for k, v in _ACT_TAGS.items()}

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def act_apply(name: str, z: np.ndarray) -> np.ndarray:
    if name == ACT_TANH:
        return np.tanh(z)
    if name == ACT_GELU:
        return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + _GELU_A * z**3)))
    if name == ACT_NONE:
        return z
    raise NumericalError(f"unknown activation {name!r}")


def act_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation at z."""
    if name == ACT_TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    if name == ACT_GELU:
        t = np.tanh(_GELU_C * (z + _GELU_A * z**3))
        return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * z * z)
    if name == ACT_NONE:
        return np.ones_like(z)
    raise NumericalError(f"unknown activation {name!r}")


@dataclass(eq=False)
class AffineBlock:
    """y = w @ x + b. `activation` is applied by the network after the block."""

    w: np.ndarray
    b: np.ndarray
    activation: str = ACT_NONE

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.w.ndim != 2:
            raise ShapeMismatchError(f"affine w must be 2-D, got {self.w.shape}")
        if self.b.shape[0] != self.w.shape[0]:
            raise ShapeMismatchError(f"affine b length {self.b.shape[0]} vs w rows {self.w.shape[0]}")
        if self.activation not in _ACT_TAGS:
            raise NumericalError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("w", self.w), ("b", self.b)]

    def with_params(self, params: dict[str, np.ndarray]) -> "AffineBlock":
        return AffineBlock(params["w"], params["b"], self.activation)


@dataclass(eq=False)
class FfnBlock:
    """y = w2 @ act(w1 @ x + b1) + b2."""

    w1: np.ndarray
    b1: np.ndarray
    activation: str
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1)
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ShapeMismatchError("ffn weights must be 2-D")
        if self.w2.shape[1] != self.w1.shape[0]:
            raise ShapeMismatchError(f"ffn w2 cols {self.w2.shape[1]} vs w1 rows {self.w1.shape[0]}")
        if self.b1.shape[0] != self.w1.shape[0] or self.b2.shape[0] != self.w2.shape[0]:
            raise ShapeMismatchError("ffn bias lengths inconsistent with weights")
        if self.activation not in (ACT_TANH, ACT_GELU):
            raise NumericalError(f"ffn activation must be smooth, got {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def with_params(self, params: dict[str, np.ndarray]) -> "FfnBlock":
        return FfnBlock(params["w1"], params["b1"], self.activation, params["w2"], params["b2"])


Block = Union[AffineBlock, FfnBlock]


def forward_block(block: Block, x: np.ndarray) -> np.ndarray:
    """Map a block over one input vector (d,) or a column batch (d, n)."""
    x = np.asarray(x, dtype=np.float64)
    vec_in = x.ndim == 1
    cols = x[:, None] if vec_in else x
    if cols.ndim != 2 or cols.shape[0] != block.in_dim:
        raise ShapeMismatchError(f"block input dim {block.in_dim}, got shape {x.shape}")
    if isinstance(block, AffineBlock):
        y = block.w @ cols + block.b[:, None]
    else:
        hidden = act_apply(block.activation, block.w1 @ cols + block.b1[:, None])
        y = block.w2 @ hidden + block.b2[:, None]
    return y[:, 0] if vec_in else y


class DistKind(str, Enum):
    COSINE = "cosine"
    L1 = "l1"
    L2 = "l2"


def block_dist(kind: DistKind, y0: np.ndarray, y1: np.ndarray) -> float:
    """Representation discrepancy between two block outputs.

    Cosine -> 1 - cos angle; L1 -> sum |y0 - y1|; L2 -> 0.5 ||y0 - y1||^2.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    if y0.shape != y1.shape:
        raise ShapeMismatchError(f"block_dist: {y0.shape} vs {y1.shape}")
    kind = DistKind(kind)
    if kind == DistKind.COSINE:
        return cos_dist(y0.reshape(1, -1), y1.reshape(1, -1))
    d = y0 - y1
    if kind == DistKind.L1:
        return float(np.abs(d).sum())
    return 0.5 * float((d * d).sum())


def block_is_residual(block: Block) -> bool:
    """Square FFN blocks ride a residual stream when the network composes
    them (h + block(h)), the way a Resblock uses its feed-forward layer.
    The block maps themselves never include the skip."""
    return isinstance(block, FfnBlock) and block.in_dim == block.out_dim


@dataclass(eq=False)
class Network:
    """Encoder blocks plus an optional per-task affine head (evaluation only).

    Composition rules: affine blocks apply their trailing activation; square
    FFN blocks are applied residually (see block_is_residual).
    """

    blocks: list[Block]
    head: AffineBlock | None = None

    def __post_init__(self):
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ArchitectureMismatchError(
                    f"block chain broken: {prev.out_dim} -> {nxt.in_dim}")
        if self.head is not None and self.blocks and self.head.in_dim != self.blocks[-1].out_dim:
            raise ArchitectureMismatchError("head input dim does not match final block")

    def _step(self, blk: Block, h: np.ndarray) -> np.ndarray:
        out = forward_block(blk, h)
        if block_is_residual(blk):
            return h + out
        if isinstance(blk, AffineBlock) and blk.activation != ACT_NONE:
            return act_apply(blk.activation, out)
        return out

    def encode(self, x: np.ndarray) -> np.ndarray:
        h = x
        for blk in self.blocks:
            h = self._step(blk, h)
        return h

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.encode(x)
        return forward_block(self.head, h) if self.head is not None else h

    def block_inputs(self, x: np.ndarray) -> list[np.ndarray]:
        """Input seen by each block when the network runs on x."""
        outs = []
        h = x
        for blk in self.blocks:
            outs.append(h)
            h = self._step(blk, h)
        return outs


def _block_descriptor(block: Block) -> tuple:
    if isinstance(block, AffineBlock):
        return ("affine", block.activation, block.in_dim, 0, block.out_dim)
    return ("ffn", block.activation, block.in_dim, block.hidden_dim, block.out_dim)


@dataclass(eq=False)
class Checkpoint:
    """Named parameter set over a fixed block architecture."""

    blocks: list[Block]
    name: str = ""
    meta: dict = field(default_factory=dict)

    def descriptor(self) -> tuple:
        return tuple(_block_descriptor(b) for b in self.blocks)

    def network(self, head: AffineBlock | None = None) -> Network:
        return Network(list(self.blocks), head)


@dataclass(eq=False)
class TaskVector:
    """Per-block parameter deltas tau = theta_i - theta_0."""

    deltas: list[Block]
    name: str = ""

    def descriptor(self) -> tuple:
        return tuple(_block_descriptor(b) for b in self.deltas)


def check_same_architecture(a, b) -> None:
    if a.descriptor() != b.descriptor():
        raise ArchitectureMismatchError(
            f"architecture mismatch: {a.descriptor()} vs {b.descriptor()}")


def _map_blocks(template: Sequence[Block], fn) -> list[Block]:
    out = []
    for idx, blk in enumerate(template):
        params = {name: fn(idx, name) for name, _ in blk.param_items()}
        out.append(blk.with_params(params))
    return out


def task_vector(theta_i: Checkpoint, theta_0: Checkpoint) -> TaskVector:
    """Elementwise theta_i - theta_0, block by block."""
    check_same_architecture(theta_i, theta_0)
    p0 = [dict(b.param_items()) for b in theta_0.blocks]
    pi = [dict(b.param_items()) for b in theta_i.blocks]
    deltas = _map_blocks(theta_0.blocks, lambda l, n: pi[l][n] - p0[l][n])
    return TaskVector(deltas, name=f"{theta_i.name}-{theta_0.name}")


def apply_task_vectors(theta_0: Checkpoint, taus: Sequence[TaskVector],
                       coeffs: Sequence[float], name: str = "") -> Checkpoint:
    """theta_0 + sum_i coeff_i * tau_i, elementwise."""
    if len(taus) != len(coeffs):
        raise ArchitectureMismatchError("one coefficient per task vector required")
    for tau in taus:
        check_same_architecture(theta_0, tau)
    p0 = [dict(b.param_items()) for b in theta_0.blocks]
    pt = [[dict(b.param_items()) for b in tau.deltas] for tau in taus]

    def combined(l, n):
        acc = p0[l][n].copy()
        for tau_params, c in zip(pt, coeffs):
            acc += c * tau_params[l][n]
        return acc

    return Checkpoint(_map_blocks(theta_0.blocks, combined), name=name)


def snap_to_base(theta_0: Checkpoint, theta_i: Checkpoint, max_rounds: int = 8) -> Checkpoint:
    """Replace theta_i by theta_0 + fl(theta_i - theta_0), iterated to a fixpoint.

    Perturbs each parameter by at most one ulp and guarantees the task-vector
    add-back roundtrip is bitwise exact afterwards.
    """
    check_same_architecture(theta_0, theta_i)
    p0 = [dict(b.param_items()) for b in theta_0.blocks]
    cur = [dict(b.param_items()) for b in theta_i.blocks]
    for _ in range(max_rounds):
        nxt = [{n: p0[l][n] + (cur[l][n] - p0[l][n]) for n in cur[l]} for l in range(len(cur))]
        if all(np.array_equal(nxt[l][n], cur[l][n]) for l in range(len(cur)) for n in cur[l]):
            break
        cur = nxt
    blocks = _map_blocks(theta_0.blocks, lambda l, n: cur[l][n])
    return Checkpoint(blocks, name=theta_i.name, meta=dict(theta_i.meta))


def checkpoints_allclose(a: Checkpoint, b: Checkpoint, rtol=0.0, atol=0.0) -> bool:
    if a.descriptor() != b.descriptor():
        return False
    for ba, bb in zip(a.blocks, b.blocks):
        for (_, pa), (_, pb) in zip(ba.param_items(), bb.param_items()):
            if rtol == 0.0 and atol == 0.0:
                if not np.array_equal(pa, pb):
                    return False
            elif not np.allclose(pa, pb, rtol=rtol, atol=atol):
                return False
    return True


def flatten_block(block: Block) -> np.ndarray:
    """Concatenate a block's parameters (declared order, row-major)."""
    return np.concatenate([p.ravel() for _, p in block.param_items()])


def block_param_count(block: Block) -> int:
    return sum(p.size for _, p in block.param_items())


# ---------------------------------------------------------------------------
# Binary serialization
# ---------------------------------------------------------------------------

def _encode_blocks(blocks: Sequence[Block]) -> bytes:
    out = [struct.pack("<HI", FORMAT_VERSION, len(blocks))]
    for blk in blocks:
        kind, act, d, h, q = _block_descriptor(blk)
        out.append(struct.pack("<BBIII", 0 if kind == "affine" else 1, _ACT_TAGS[act], d, h, q))
        for _, p in blk.param_items():
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def _write_file(path, magic: bytes, blocks: Sequence[Block]) -> None:
    payload = _encode_blocks(blocks)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(payload)
            fh.write(struct.pack("<I", crc))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatViolationError(f"{self.path}: truncated payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_file(path, magic: bytes) -> list[Block]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    if len(raw) < len(magic) + 4:
        raise FormatViolationError(f"{path}: file too short")
    if raw[:8] != magic:
        raise FormatViolationError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    payload, crc_bytes = raw[8:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FormatViolationError(f"{path}: CRC32 mismatch")

    r = _Reader(payload, path)
    version, nblocks = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise FormatViolationError(f"{path}: unsupported format version {version}")
    blocks: list[Block] = []
    for _ in range(nblocks):
        kind_tag, act_tag, d, h, q = r.unpack("<BBIII")
        if act_tag not in _ACT_NAMES:
            raise FormatViolationError(f"{path}: unknown activation tag {act_tag}")
        act = _ACT_NAMES[act_tag]
        if kind_tag == 0:
            if h != 0:
                raise FormatViolationError(f"{path}: affine block with h={h}")
            w = np.frombuffer(r.take(8 * q * d), dtype="<f8").reshape(q, d).copy()
            b = np.frombuffer(r.take(8 * q), dtype="<f8").copy()
            blocks.append(AffineBlock(w, b, act))
        elif kind_tag == 1:
            if h == 0 or act == ACT_NONE:
                raise FormatViolationError(f"{path}: ffn block with h={h}, act={act}")
            w1 = np.frombuffer(r.take(8 * h * d), dtype="<f8").reshape(h, d).copy()
            b1 = np.frombuffer(r.take(8 * h), dtype="<f8").copy()
            w2 = np.frombuffer(r.take(8 * q * h), dtype="<f8").reshape(q, h).copy()
            b2 = np.frombuffer(r.take(8 * q), dtype="<f8").copy()
            blocks.append(FfnBlock(w1, b1, act, w2, b2))
        else:
            raise FormatViolationError(f"{path}: unknown block kind tag {kind_tag}")
    if r.pos != len(payload):
        raise FormatViolationError(f"{path}: {len(payload) - r.pos} trailing bytes")
    return blocks


def save_checkpoint(c: Checkpoint, path) -> None:
    _write_file(path, CHECKPOINT_MAGIC, c.blocks)


def load_checkpoint(path, name: str = "") -> Checkpoint:
    return Checkpoint(_read_file(path, CHECKPOINT_MAGIC), name=name or str(path))


def save_task_vector(tv: TaskVector, path) -> None:
    _write_file(path, TASKVECTOR_MAGIC, tv.deltas)


def load_task_vector(path, name: str = "") -> TaskVector:
    return TaskVector(_read_file(path, TASKVECTOR_MAGIC), name=name or str(path))
