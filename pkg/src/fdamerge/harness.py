"""Synthetic multi-task data, classifier training, and update-vector sampling.

Tasks are rotated Gaussian cluster classification problems over a shared
input dimension; a pooled dataset over all tasks (with disjoint label
ranges) serves as the pretraining corpus, so the pretrained encoder carries
features every task can use while per-task finetuning still improves.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import UpdateConeSample
from .errors import ConfigError, NumericalError, ShapeMismatchError
from .merge import AdamState, adam_step
from .netmodel import (
    ACT_NONE,
    AffineBlock,
    Block,
    Checkpoint,
    FfnBlock,
    Network,
    act_apply,
    act_grad,
    block_is_residual,
    flatten_block,
)
from .numkit import RngStream

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
_SPLIT_CODES = {"train": SPLIT_TRAIN, "val": SPLIT_VAL, "test": SPLIT_TEST}


@dataclass(frozen=True)
class TaskGenConfig:
    m: int = 4
    input_dim: int = 16
    classes: int = 4
    clusters_per_class: int = 8
    train_per_class: int = 64
    val_per_class: int = 16
    test_per_class: int = 24
    noise: float = 0.35
    cluster_spread: float = 2.0

    def __post_init__(self):
        if self.m < 1 or self.input_dim < 2 or self.classes < 2:
            raise ConfigError("need m >= 1, input_dim >= 2, classes >= 2")
        if self.clusters_per_class < 1:
            raise ConfigError("clusters_per_class must be >= 1")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 1:
            raise ConfigError("every split needs at least one sample per class")


@dataclass
class TaskDataset:
    """Gaussian-cluster classification task; rows of x are samples."""

    task_id: int
    x: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    spec: dict = field(default_factory=dict)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == _SPLIT_CODES[split]
        return self.x[mask], self.labels[mask]


def _rotation(rng: RngStream, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(dim, dim))
    return q * np.sign(np.diag(r))


def gen_tasks(cfg: TaskGenConfig, seed: int) -> list[TaskDataset]:
    """m cluster-classification tasks differing by rotation and class layout.

    Each class is a mixture of clusters_per_class Gaussian blobs; with more
    blobs than encoder output dimensions a linear probe on a generic encoder
    cannot solve the task, while finetuning the encoder can. Class counts are
    exactly balanced in every split; byte-identical per seed.
    """
    root = RngStream(seed)
    tasks = []
    per_class = cfg.train_per_class + cfg.val_per_class + cfg.test_per_class
    for i in range(cfg.m):
        rng = root.child(i)
        means = cfg.cluster_spread * rng.normal(cfg.classes * cfg.clusters_per_class,
                                                cfg.input_dim)
        rot = _rotation(rng, cfg.input_dim)
        xs, ys, splits = [], [], []
        for c in range(cfg.classes):
            # Round-robin over the class's clusters, so every split stays
            # exactly class-balanced.
            cluster_ids = np.arange(per_class) % cfg.clusters_per_class
            centers = means[c * cfg.clusters_per_class + cluster_ids]
            pts = centers + cfg.noise * rng.normal(per_class, cfg.input_dim)
            xs.append(pts @ rot.T)
            ys.append(np.full(per_class, c, dtype=np.int64))
            splits.append(np.concatenate([
                np.full(cfg.train_per_class, SPLIT_TRAIN, dtype=np.int8),
                np.full(cfg.val_per_class, SPLIT_VAL, dtype=np.int8),
                np.full(cfg.test_per_class, SPLIT_TEST, dtype=np.int8)]))
        tasks.append(TaskDataset(
            task_id=i, x=np.concatenate(xs), labels=np.concatenate(ys),
            split=np.concatenate(splits),
            spec={"classes": cfg.classes, "clusters_per_class": cfg.clusters_per_class,
                  "rotation_seed": seed, "noise": cfg.noise}))
    return tasks


def pooled_pretrain_dataset(tasks: Sequence[TaskDataset]) -> TaskDataset:
    """Union of the tasks' samples with disjoint label ranges (task i class c
    becomes label i*C + c); the pretraining corpus."""
    classes = int(max(t.labels.max() for t in tasks)) + 1
    x = np.concatenate([t.x for t in tasks])
    labels = np.concatenate([t.labels + classes * t.task_id for t in tasks])
    split = np.concatenate([t.split for t in tasks])
    return TaskDataset(task_id=-1, x=x, labels=labels, split=split,
                       spec={"pooled_from": [t.task_id for t in tasks]})


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def init_network(blocks_spec: Sequence[Block], head_classes: int, rng: RngStream,
                 weight_scale: float = 0.3, bias_scale: float = 0.05) -> Network:
    """Fresh network with seeded Gaussian parameters shaped like blocks_spec."""
    blocks: list[Block] = []
    for blk in blocks_spec:
        params = {name: (weight_scale * rng.normal(*p.shape) if p.ndim == 2
                         else bias_scale * rng.normal_vector(p.shape[0]))
                  for name, p in blk.param_items()}
        blocks.append(blk.with_params(params))
    out_dim = blocks[-1].out_dim
    head = AffineBlock(weight_scale * rng.normal(head_classes, out_dim),
                       bias_scale * rng.normal_vector(head_classes))
    return Network(blocks, head)


def _forward_caches(net: Network, x_cols: np.ndarray):
    caches = []
    h = x_cols
    for blk in net.blocks:
        if isinstance(blk, AffineBlock):
            z = blk.w @ h + blk.b[:, None]
            out = act_apply(blk.activation, z) if blk.activation != ACT_NONE else z
            caches.append(("affine", h, z))
        else:
            z1 = blk.w1 @ h + blk.b1[:, None]
            a1 = act_apply(blk.activation, z1)
            out = blk.w2 @ a1 + blk.b2[:, None]
            if block_is_residual(blk):
                out = h + out
            caches.append(("ffn", h, z1, a1))
        h = out
    logits = net.head.w @ h + net.head.b[:, None]
    return caches, h, logits


def _softmax_ce(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=0, keepdims=True)
    expd = np.exp(shifted)
    p = expd / expd.sum(axis=0, keepdims=True)
    n = y.shape[0]
    loss = float(-np.mean(np.log(p[y, np.arange(n)] + 1e-300)))
    dlogits = p.copy()
    dlogits[y, np.arange(n)] -= 1.0
    return loss, dlogits / n


def _backward(net: Network, caches, penult, dlogits):
    grads = {"head.w": dlogits @ penult.T, "head.b": dlogits.sum(axis=1)}
    dh = net.head.w.T @ dlogits
    for l in range(len(net.blocks) - 1, -1, -1):
        blk = net.blocks[l]
        cache = caches[l]
        if cache[0] == "affine":
            _, h_in, z = cache
            dz = dh * act_grad(blk.activation, z) if blk.activation != ACT_NONE else dh
            grads[f"{l}.w"] = dz @ h_in.T
            grads[f"{l}.b"] = dz.sum(axis=1)
            dh = blk.w.T @ dz
        else:
            _, h_in, z1, a1 = cache
            dz2 = dh
            grads[f"{l}.w2"] = dz2 @ a1.T
            grads[f"{l}.b2"] = dz2.sum(axis=1)
            dz1 = (blk.w2.T @ dz2) * act_grad(blk.activation, z1)
            grads[f"{l}.w1"] = dz1 @ h_in.T
            grads[f"{l}.b1"] = dz1.sum(axis=1)
            dh = blk.w1.T @ dz1
            if block_is_residual(blk):
                dh = dh + dz2
    return grads


def _net_params(net: Network) -> dict[str, np.ndarray]:
    params = {}
    for l, blk in enumerate(net.blocks):
        for name, p in blk.param_items():
            params[f"{l}.{name}"] = p.copy()
    for name, p in net.head.param_items():
        params[f"head.{name}"] = p.copy()
    return params


def _net_from_params(template: Network, params: dict[str, np.ndarray]) -> Network:
    blocks = []
    for l, blk in enumerate(template.blocks):
        blocks.append(blk.with_params({name: params[f"{l}.{name}"]
                                       for name, _ in blk.param_items()}))
    head = template.head.with_params({name: params[f"head.{name}"]
                                      for name, _ in template.head.param_items()})
    return Network(blocks, head)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    head: AffineBlock
    losses: list[float]


def train(network: Network, dataset: TaskDataset, epochs: int, lr: float,
          seed: int, batch_size: int = 32, name: str = "",
          trainable: str = "all") -> TrainResult:
    """Mini-batch Adam on softmax cross-entropy; deterministic per seed.

    trainable selects the parameter set the optimizer touches: "all",
    "encoder" (head frozen, the downstream-finetuning setup), or "head"
    (linear probe on a frozen encoder).
    """
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch size must be positive")
    if lr < 0:
        raise ConfigError("learning rate must be >= 0")
    if trainable not in ("all", "encoder", "head"):
        raise ConfigError(f"trainable must be all|encoder|head, got {trainable!r}")
    x, y = dataset.subset("train")
    if x.shape[1] != network.blocks[0].in_dim:
        raise ShapeMismatchError(
            f"data dim {x.shape[1]} vs network input dim {network.blocks[0].in_dim}")
    if int(y.max()) >= network.head.out_dim:
        raise ConfigError(f"label {int(y.max())} outside head range {network.head.out_dim}")

    def is_trainable(key: str) -> bool:
        head_param = key.startswith("head.")
        return (trainable == "all" or (trainable == "head") == head_param)

    cols = x.T
    rng = RngStream(seed)
    params = _net_params(network)
    opt_params = {k: v for k, v in params.items() if is_trainable(k)}
    state = AdamState.init(opt_params)
    net = _net_from_params(network, params)
    losses = []
    n = cols.shape[1]
    for _ in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            caches, penult, logits = _forward_caches(net, cols[:, sel])
            loss, dlogits = _softmax_ce(logits, y[sel])
            grads = _backward(net, caches, penult, dlogits)
            state, opt_params = adam_step(
                state, opt_params, {k: grads[k] for k in opt_params}, lr)
            params.update(opt_params)
            net = _net_from_params(network, params)
            epoch_loss += loss * len(sel)
        losses.append(epoch_loss / n)
    ckpt = Checkpoint(list(net.blocks), name=name or f"train(task={dataset.task_id})",
                      meta={"seed": seed, "epochs": epochs, "lr": lr, "batch": batch_size})
    return TrainResult(checkpoint=ckpt, head=net.head, losses=losses)


def evaluate(ckpt: Checkpoint, head: AffineBlock, dataset: TaskDataset,
             split: str = "test") -> tuple[float, float]:
    """(accuracy, mean cross-entropy) of the encoder + head on one split."""
    x, y = dataset.subset(split)
    net = ckpt.network(head)
    logits = net.forward(x.T)
    loss, _ = _softmax_ce(logits, y)
    acc = float(np.mean(np.argmax(logits, axis=0) == y))
    return acc, loss


def sample_update_vectors(theta: Checkpoint, dataset: TaskDataset, count: int,
                          seed: int, lr: float = 1e-2, batch_size: int = 32,
                          head: AffineBlock | None = None) -> list[UpdateConeSample]:
    """Per-batch parameter deltas for `count` consecutive finetuning batches,
    flattened per block; one cone sample per block."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    x, y = dataset.subset("train")
    rng = RngStream(seed)
    if head is None:
        out_dim = theta.blocks[-1].out_dim
        classes = int(y.max()) + 1
        head = AffineBlock(0.3 * rng.normal(classes, out_dim),
                           0.05 * rng.normal_vector(classes))
    net = Network(list(theta.blocks), head)
    params = _net_params(net)
    state = AdamState.init(params)
    cols = x.T
    n = cols.shape[1]
    deltas: list[list[np.ndarray]] = [[] for _ in theta.blocks]
    taken = 0
    perm = rng.permutation(n)
    pos = 0
    while taken < count:
        if pos >= n:
            perm = rng.permutation(n)
            pos = 0
        sel = perm[pos:pos + batch_size]
        pos += batch_size
        before = _net_from_params(net, params)
        caches, penult, logits = _forward_caches(before, cols[:, sel])
        _, dlogits = _softmax_ce(logits, y[sel])
        grads = _backward(before, caches, penult, dlogits)
        state, params = adam_step(state, params, grads, lr)
        after = _net_from_params(net, params)
        for l in range(len(theta.blocks)):
            deltas[l].append(flatten_block(after.blocks[l]) - flatten_block(before.blocks[l]))
        taken += 1
    cones = []
    for l, vecs in enumerate(deltas):
        try:
            cones.append(UpdateConeSample(task_id=dataset.task_id, block_index=l,
                                          vectors=np.stack(vecs, axis=1)))
        except NumericalError as exc:
            raise ConfigError(f"block {l}: {exc} (lr=0?)") from None
    return cones


def block_input_features(theta: Checkpoint, head: AffineBlock | None,
                         dataset: TaskDataset, l: int, count: int = 64,
                         split: str = "val") -> np.ndarray:
    """Inputs block l sees when the network runs on the first `count` samples
    of a split, rows = samples (reference features for subspace similarity)."""
    x, _ = dataset.subset(split)
    x = x[:count]
    net = theta.network(head)
    return net.block_inputs(x.T)[l].T


# ---------------------------------------------------------------------------
# Dataset files (three .npy arrays + a meta json; byte-stable per seed)
# ---------------------------------------------------------------------------

def save_task_dataset(ds: TaskDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = out / f"task_{ds.task_id:02d}"
    np.save(f"{prefix}.x.npy", ds.x)
    np.save(f"{prefix}.y.npy", ds.labels)
    np.save(f"{prefix}.split.npy", ds.split)
    with open(f"{prefix}.meta.json", "w", encoding="utf-8") as fh:
        json.dump({"task_id": ds.task_id, "spec": ds.spec}, fh, sort_keys=True)
        fh.write("\n")


def load_task_dataset(out_dir, task_id: int) -> TaskDataset:
    prefix = Path(out_dir) / f"task_{task_id:02d}"
    try:
        x = np.load(f"{prefix}.x.npy")
        y = np.load(f"{prefix}.y.npy")
        split = np.load(f"{prefix}.split.npy")
        with open(f"{prefix}.meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load task {task_id} from {out_dir}: {exc}") from None
    return TaskDataset(task_id=task_id, x=x, labels=y, split=split, spec=meta.get("spec", {}))


def load_all_tasks(out_dir) -> list[TaskDataset]:
    paths = sorted(Path(out_dir).glob("task_*.x.npy"))
    if not paths:
        raise ConfigError(f"no task files in {out_dir}")
    ids = [int(p.name.split("_")[1].split(".")[0]) for p in paths]
    return [load_task_dataset(out_dir, i) for i in sorted(ids)]
