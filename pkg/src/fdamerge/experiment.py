"""End-to-end experiment driver: pretrain, finetune, construct anchors, merge,
adapt, evaluate, and emit reports plus analysis CSVs.

Stage seeds all derive from one master seed, so a run is byte-identical per
(config, seed) pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, config as cfgmod, harness
from .construct import AnchorSet, ConstructionConfig, InitScheme, construct_fdas, save_anchor_set
from .errors import ConfigError
from .merge import (
    AdaptConfig,
    DEFAULT_REFINE_LR,
    adapt,
    merge_average,
    merge_ta,
    merge_tsv,
    write_adapt_trace,
)
from .netmodel import (
    ACT_TANH,
    AffineBlock,
    Block,
    Checkpoint,
    DistKind,
    FfnBlock,
    save_checkpoint,
    save_task_vector,
    snap_to_base,
    task_vector,
)
from .numkit import RngStream

# Stage tags for derived seeds.
_S_TASKS, _S_PRETRAIN, _S_FINETUNE, _S_CONSTRUCT, _S_ADAPT, _S_CONE = 1, 2, 3, 4, 5, 6


def default_blocks_spec(input_dim: int = 16) -> list[Block]:
    """Desk-scale standard architecture: tanh affine into a tanh FFN."""
    return [
        AffineBlock(np.zeros((32, input_dim)), np.zeros(32), ACT_TANH),
        FfnBlock(np.zeros((64, 32)), np.zeros(64), ACT_TANH, np.zeros((32, 64)), np.zeros(32)),
    ]


def parse_blocks_spec(text: str) -> list[Block]:
    """Comma-separated blocks: affine:<in>:<out>[:act] | ffn:<in>:<hidden>:<out>[:act]."""
    blocks: list[Block] = []
    for part in text.split(","):
        fields = part.strip().split(":")
        try:
            if fields[0] == "affine":
                d, q = int(fields[1]), int(fields[2])
                act = fields[3] if len(fields) > 3 else "none"
                blocks.append(AffineBlock(np.zeros((q, d)), np.zeros(q), act))
            elif fields[0] == "ffn":
                d, h, q = int(fields[1]), int(fields[2]), int(fields[3])
                act = fields[4] if len(fields) > 4 else ACT_TANH
                blocks.append(FfnBlock(np.zeros((h, d)), np.zeros(h), act,
                                       np.zeros((q, h)), np.zeros(q)))
            else:
                raise ConfigError(f"unknown block kind {fields[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"bad block spec {part!r}: {exc}") from None
    if not blocks:
        raise ConfigError("architecture needs at least one block")
    return blocks


@dataclass(frozen=True)
class TrainStageConfig:
    epochs: int = 60
    lr: float = 5e-3
    batch_size: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: harness.TaskGenConfig = harness.TaskGenConfig()
    blocks: tuple[Block, ...] = ()
    pretrain: TrainStageConfig = TrainStageConfig(epochs=40)
    probe: TrainStageConfig = TrainStageConfig(epochs=40, lr=1e-2)
    finetune: TrainStageConfig = TrainStageConfig(epochs=300, lr=1e-2)
    construct: ConstructionConfig = ConstructionConfig(steps=150, n_anchors=32)
    adapt_pre: AdaptConfig = AdaptConfig(lr=1e-3, epochs=60)
    adapt_refine: AdaptConfig = AdaptConfig(lr=DEFAULT_REFINE_LR, epochs=40)
    ta_lambdas: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    tsv_rank_fraction: float = 0.5
    # Per-task finetuning learning-rate multipliers (cycled over tasks).
    # Heterogeneous budgets give heterogeneous task-vector magnitudes, the
    # regime where a single uniform scaling factor cannot fit every task.
    finetune_multipliers: tuple[float, ...] = (0.1, 0.3, 1.0, 3.0)
    cone_count: int = 64
    analysis_fraction: float = 0.2
    emit_analysis: bool = True

    def resolved_blocks(self) -> list[Block]:
        return list(self.blocks) if self.blocks else default_blocks_spec(self.tasks.input_dim)


def experiment_config_from_mapping(raw: dict[str, str]) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed key=value pairs; unknown keys fail."""
    cfg = dict(raw)
    t = cfgmod.take
    tasks = harness.TaskGenConfig(
        m=t(cfg, "tasks.m", int, 4),
        input_dim=t(cfg, "tasks.input_dim", int, 16),
        classes=t(cfg, "tasks.classes", int, 4),
        train_per_class=t(cfg, "tasks.train_per_class", int, 40),
        val_per_class=t(cfg, "tasks.val_per_class", int, 16),
        test_per_class=t(cfg, "tasks.test_per_class", int, 24),
        noise=t(cfg, "tasks.noise", float, 0.4),
        cluster_spread=t(cfg, "tasks.cluster_spread", float, 1.5))
    blocks_text = t(cfg, "arch.blocks", str, "")
    blocks = tuple(parse_blocks_spec(blocks_text)) if blocks_text else ()
    pretrain = TrainStageConfig(epochs=t(cfg, "pretrain.epochs", int, 40),
                                lr=t(cfg, "pretrain.lr", float, 5e-3),
                                batch_size=t(cfg, "pretrain.batch", int, 32))
    probe = TrainStageConfig(epochs=t(cfg, "probe.epochs", int, 40),
                             lr=t(cfg, "probe.lr", float, 1e-2),
                             batch_size=t(cfg, "probe.batch", int, 32))
    finetune = TrainStageConfig(epochs=t(cfg, "finetune.epochs", int, 300),
                                lr=t(cfg, "finetune.lr", float, 1e-2),
                                batch_size=t(cfg, "finetune.batch", int, 32))
    init_kind = t(cfg, "construct.init", str, "gauss")
    sigma = t(cfg, "construct.sigma", float, 0.01)
    if init_kind in ("gauss", "scaled_gaussian"):
        init = InitScheme.scaled_gaussian(sigma)
    elif init_kind == "weight_rows":
        init = InitScheme.weight_rows()
    else:
        raise ConfigError(f"construct.init: unknown scheme {init_kind!r}")
    construct = ConstructionConfig(
        steps=t(cfg, "construct.steps", int, 150),
        lr=t(cfg, "construct.lr", float, 1e-2),
        dist=DistKind(t(cfg, "construct.dist", str, "cosine")),
        sign=t(cfg, "construct.sign", str, "descent"),
        n_anchors=t(cfg, "construct.n_anchors", int, 32),
        init=init,
        seed=0)
    adapt_pre = AdaptConfig(lr=t(cfg, "adapt.lr", float, 1e-3),
                            batch_size=t(cfg, "adapt.batch", int, 128),
                            epochs=t(cfg, "adapt.epochs", int, 60),
                            dist=DistKind(t(cfg, "adapt.dist", str, "cosine")))
    adapt_refine = AdaptConfig(lr=t(cfg, "refine.lr", float, DEFAULT_REFINE_LR),
                               batch_size=t(cfg, "refine.batch", int, 128),
                               epochs=t(cfg, "refine.epochs", int, 40),
                               dist=DistKind(t(cfg, "refine.dist", str, "cosine")))
    lambdas = t(cfg, "merge.ta_lambdas", str, "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    try:
        ta_lambdas = tuple(float(v) for v in lambdas.split(","))
    except ValueError:
        raise ConfigError(f"merge.ta_lambdas: cannot parse {lambdas!r}") from None
    out = ExperimentConfig(
        tasks=tasks, blocks=blocks, pretrain=pretrain, probe=probe, finetune=finetune,
        construct=construct, adapt_pre=adapt_pre, adapt_refine=adapt_refine,
        ta_lambdas=ta_lambdas,
        tsv_rank_fraction=t(cfg, "merge.tsv_rank_fraction", float, 0.5),
        cone_count=t(cfg, "analysis.cone_count", int, 64),
        analysis_fraction=t(cfg, "analysis.fraction", float, 0.2),
        emit_analysis=t(cfg, "analysis.enabled", bool, True))
    # io.* keys are consumed by the CLI, not the experiment itself.
    leftovers = {k: v for k, v in cfg.items() if not k.startswith(("io.", "lab."))}
    cfgmod.reject_unknown(leftovers, "experiment config")
    return out


@dataclass
class Report:
    """Per-task metrics per variant, arithmetic averages, and accuracy deltas
    of the anchor-adapted variants against their initial models."""

    rows: list[tuple[str, int, float, float]] = field(default_factory=list)
    averages: dict[str, tuple[float, float]] = field(default_factory=dict)
    deltas: dict[str, float] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)

    def add(self, variant: str, metrics: dict[int, tuple[float, float]],
            delta_base: str | None = None) -> None:
        self.order.append(variant)
        accs, ces = [], []
        for task in sorted(metrics):
            acc, ce = metrics[task]
            self.rows.append((variant, task, acc, ce))
            accs.append(acc)
            ces.append(ce)
        self.averages[variant] = (float(np.mean(accs)), float(np.mean(ces)))
        if delta_base is not None:
            self.deltas[variant] = self.averages[variant][0] - self.averages[delta_base][0]

    def average_accuracy(self, variant: str) -> float:
        return self.averages[variant][0]

    def to_csv_text(self) -> str:
        lines = ["variant,task,accuracy,cross_entropy,delta_vs_init"]
        for variant in self.order:
            for v, task, acc, ce in self.rows:
                if v == variant:
                    lines.append(f"{variant},{task},{acc:.17g},{ce:.17g},")
            acc, ce = self.averages[variant]
            delta = self.deltas.get(variant)
            delta_txt = f"{delta:.17g}" if delta is not None else ""
            lines.append(f"{variant},avg,{acc:.17g},{ce:.17g},{delta_txt}")
        return "\n".join(lines) + "\n"


def write_report(report: Report, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv_text())


@dataclass
class ExperimentArtifacts:
    """Everything a run produced, for tests and downstream analysis."""

    report: Report
    theta0: Checkpoint
    individuals: list[Checkpoint]
    heads: list[AffineBlock]
    tasks: list[harness.TaskDataset]
    anchors: dict[tuple[int, int], AnchorSet]
    merges: dict[str, Checkpoint]
    fda_pretrained: Checkpoint
    fda_refined: Checkpoint
    ta_best_name: str
    adapt_traces: dict[str, dict[int, list[float]]]


def _eval_on_all(ckpt: Checkpoint, heads, tasks) -> dict[int, tuple[float, float]]:
    return {t.task_id: harness.evaluate(ckpt, heads[t.task_id], t) for t in tasks}


def run_experiment(cfg: ExperimentConfig, seed: int,
                   out_dir: str | Path | None = None) -> ExperimentArtifacts:
    """Execute the full pipeline; optionally write every artifact under out_dir."""
    root = RngStream(seed)
    tasks = harness.gen_tasks(cfg.tasks, root.child(_S_TASKS).seed)
    blocks_spec = cfg.resolved_blocks()
    if blocks_spec[0].in_dim != cfg.tasks.input_dim:
        raise ConfigError(
            f"architecture input dim {blocks_spec[0].in_dim} vs tasks.input_dim {cfg.tasks.input_dim}")

    # Pretrain on a pooled generic corpus drawn from the same task family but
    # a different seed: the encoder learns transferable cluster-separation
    # features without ever seeing the downstream tasks.
    pretrain_tasks = harness.gen_tasks(cfg.tasks, root.child(_S_PRETRAIN, 7).seed)
    pool = harness.pooled_pretrain_dataset(pretrain_tasks)
    pre_net = harness.init_network(blocks_spec, cfg.tasks.classes * cfg.tasks.m,
                                   root.child(_S_PRETRAIN))
    pre = harness.train(pre_net, pool, cfg.pretrain.epochs, cfg.pretrain.lr,
                        root.child(_S_PRETRAIN, 1).seed, cfg.pretrain.batch_size,
                        name="pretrained")
    theta0 = pre.checkpoint

    # Per-task heads are linear probes on the frozen pretrained encoder; the
    # heads then stay frozen while the encoder finetunes (mirrors merging
    # setups that keep task heads fixed and merge encoders only). Finetuned
    # encoders are snapped so task-vector roundtrips are exact.
    individuals, heads, taus = [], [], []
    mults = cfg.finetune_multipliers or (1.0,)
    for t in tasks:
        rng_i = root.child(_S_FINETUNE, t.task_id)
        head0 = harness.init_network(blocks_spec, cfg.tasks.classes, rng_i).head
        probe = harness.train(theta0.network(head0), t, cfg.probe.epochs, cfg.probe.lr,
                              rng_i.child(1).seed, cfg.probe.batch_size,
                              name=f"probe{t.task_id}", trainable="head")
        ft_lr = cfg.finetune.lr * mults[t.task_id % len(mults)]
        ft = harness.train(theta0.network(probe.head), t, cfg.finetune.epochs,
                           ft_lr, rng_i.child(2).seed,
                           cfg.finetune.batch_size, name=f"task{t.task_id}",
                           trainable="encoder")
        snapped = snap_to_base(theta0, ft.checkpoint)
        individuals.append(snapped)
        heads.append(ft.head)
        taus.append(task_vector(snapped, theta0))

    # Stage I: anchors per (task, block).
    n_blocks = len(blocks_spec)
    anchors: dict[tuple[int, int], AnchorSet] = {}
    snapshot_steps = (0, cfg.construct.steps)
    for t in tasks:
        for l in range(n_blocks):
            rng_c = root.child(_S_CONSTRUCT, t.task_id, l)
            anchors[(t.task_id, l)] = construct_fdas(
                theta0, individuals[t.task_id], l, cfg.construct, rng_c,
                task_id=t.task_id, snapshot_steps=snapshot_steps)

    # Baseline merges.
    merges: dict[str, Checkpoint] = {}
    for lam in cfg.ta_lambdas:
        merges[f"ta({lam:g})"] = merge_ta(theta0, taus, lam)
    merges["average"] = merge_average(theta0, taus)
    merges[f"tsv({cfg.tsv_rank_fraction:g})"] = merge_tsv(theta0, taus, cfg.tsv_rank_fraction)

    report = Report()
    report.add("pretrained", _eval_on_all(theta0, heads, tasks))
    report.add("individual", {t.task_id: harness.evaluate(
        individuals[t.task_id], heads[t.task_id], t) for t in tasks})
    merge_metrics = {}
    for name in sorted(merges):
        merge_metrics[name] = _eval_on_all(merges[name], heads, tasks)
        report.add(name, merge_metrics[name])
    ta_names = [f"ta({lam:g})" for lam in cfg.ta_lambdas]
    ta_best_name = min(ta_names,
                       key=lambda nm: (-float(np.mean([merge_metrics[nm][t.task_id][0]
                                                       for t in tasks])), nm))

    # Stage II: adaptation from pretrained (Eq. 5 usage) and refinement of the
    # best TA merge (Eq. 6 usage).
    adapt_traces = {}
    pre_cfg = replace(cfg.adapt_pre, seed=root.child(_S_ADAPT, 0).seed)
    res_pre = adapt(theta0, theta0, individuals, anchors, pre_cfg)
    fda_pre = res_pre.checkpoint
    adapt_traces["fda_pretrained"] = res_pre.traces
    refine_cfg = replace(cfg.adapt_refine, seed=root.child(_S_ADAPT, 1).seed)
    res_ref = adapt(merges[ta_best_name], theta0, individuals, anchors, refine_cfg)
    fda_ref = res_ref.checkpoint
    adapt_traces["fda_refined_ta"] = res_ref.traces

    report.add("fda_pretrained", _eval_on_all(fda_pre, heads, tasks), delta_base="pretrained")
    report.add("fda_refined_ta", _eval_on_all(fda_ref, heads, tasks), delta_base=ta_best_name)

    artifacts = ExperimentArtifacts(
        report=report, theta0=theta0, individuals=individuals, heads=heads,
        tasks=tasks, anchors=anchors, merges=merges, fda_pretrained=fda_pre,
        fda_refined=fda_ref, ta_best_name=ta_best_name, adapt_traces=adapt_traces)

    if out_dir is not None:
        _write_artifacts(cfg, artifacts, Path(out_dir), root)
    return artifacts


def _write_artifacts(cfg: ExperimentConfig, art: ExperimentArtifacts,
                     out: Path, root: RngStream) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_report(art.report, out / "report.csv")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    save_checkpoint(art.theta0, ckpt_dir / "theta0.ckpt")
    for i, (ind, head) in enumerate(zip(art.individuals, art.heads)):
        save_checkpoint(ind, ckpt_dir / f"theta_{i:02d}.ckpt")
        save_checkpoint(Checkpoint([head]), ckpt_dir / f"head_{i:02d}.ckpt")
        save_task_vector(task_vector(ind, art.theta0), ckpt_dir / f"tau_{i:02d}.tv")
    for name, ckpt in sorted(art.merges.items()):
        save_checkpoint(ckpt, ckpt_dir / f"{name}.ckpt")
    save_checkpoint(art.fda_pretrained, ckpt_dir / "fda_pretrained.ckpt")
    save_checkpoint(art.fda_refined, ckpt_dir / "fda_refined_ta.ckpt")
    anchor_dir = out / "anchors"
    anchor_dir.mkdir(exist_ok=True)
    for (i, l), aset in sorted(art.anchors.items()):
        save_anchor_set(aset, anchor_dir / f"anchors_t{i:02d}_b{l}.fda")
    for name, traces in sorted(art.adapt_traces.items()):
        write_adapt_trace(out / f"trace_{name}.csv", traces)
    if cfg.emit_analysis:
        _emit_analysis(cfg, art, out, root)


def _emit_analysis(cfg: ExperimentConfig, art: ExperimentArtifacts,
                   out: Path, root: RngStream) -> None:
    ana_dir = out / "analysis"
    ana_dir.mkdir(exist_ok=True)
    sim_rows, energy_rows = [], []
    for (i, l), aset in sorted(art.anchors.items()):
        spectra = {step: analysis.spectral_report_of(x)
                   for step, x in sorted(aset.snapshots.items())}
        analysis.write_spectra_csv(ana_dir / f"spectra_t{i:02d}_b{l}.csv", spectra)
        feats = harness.block_input_features(art.individuals[i], art.heads[i],
                                             art.tasks[i], l)
        for step, x in sorted(aset.snapshots.items()):
            sim_rows.append((step, l, i, analysis.subspace_similarity(
                x.T, feats, cfg.analysis_fraction)))
    analysis.write_similarity_csv(ana_dir / "similarity.csv", sim_rows)

    for t in art.tasks:
        i = t.task_id
        cones = harness.sample_update_vectors(
            art.theta0, t, cfg.cone_count, root.child(_S_CONE, i).seed,
            head=art.heads[i])
        for step in sorted(art.anchors[(i, 0)].snapshots):
            probe_anchors = {}
            for l in range(len(art.theta0.blocks)):
                aset = art.anchors[(i, l)]
                probe_anchors[(0, l)] = AnchorSet(
                    task_id=i, block_index=l, x=aset.snapshots[step],
                    init_scheme=aset.init_scheme, sign=aset.sign,
                    loss_trace=aset.loss_trace)
            probe_cfg = replace(cfg.adapt_pre, epochs=max(5, cfg.adapt_pre.epochs // 4),
                                seed=root.child(_S_CONE, i, 99).seed)
            adapted = adapt(art.theta0, art.theta0, [art.individuals[i]],
                            probe_anchors, probe_cfg).checkpoint
            for l in range(len(art.theta0.blocks)):
                direction = analysis.fda_adaptation_direction(art.theta0, adapted, l)
                energy_rows.append((step, l, i, analysis.projection_energy_ratio(
                    direction, cones[l])))
    analysis.write_energy_csv(ana_dir / "energy.csv", energy_rows)
