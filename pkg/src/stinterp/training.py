"""Training loop, evaluation protocol, ablations, and the linear baseline."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctf import save_checkpoint
from .data import STPatch, read_manifest, split_tuples
from .losses import loss_sim, loss_smooth
from .metrics import MetricReport, mean_reports, metric_suite
from .model import InterpolationNetwork, ModelConfig
from .model.modulation import compute_positions
from .optim import adamw_step, cosine_lr, init_optimizer
from .tensor import no_grad

THREADS_ENV = "STINTERP_THREADS"


def thread_count():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class RunConfig:
    """Training hyperparameters; defaults follow the reference protocol."""

    dataset: str = ""
    checkpoint: str = ""
    epochs: int = 40
    batch_size: int = 6
    lr0: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    sim_weight: float = 1.0
    smooth_weight: float = 1.0
    graph_blend: float = 0.5
    alpha: float = 0.5
    s: int = 1
    seed: int = 0
    dtype: str = "float32"
    channels: int = 32
    feat_channels: int = 16
    gate_hidden: int = 32
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_path: str = ""

    @classmethod
    def from_file(cls, path, **overrides):
        data = json.loads(Path(path).read_text())
        data.update(overrides)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)

    def model_config(self, genes, patch_size):
        return ModelConfig(
            genes=genes,
            patch_size=patch_size,
            feat_channels=self.feat_channels,
            channels=self.channels,
            gate_hidden=self.gate_hidden,
            graph_blend=self.graph_blend,
            dtype=self.dtype,
            init_seed=self.seed,
        )


@dataclass
class TrainResult:
    checkpoint_dir: str
    steps: int
    log: list = field(default_factory=list)

    @property
    def final(self):
        return self.log[-1] if self.log else {}


def _tuple_positions(slice_tuple, s, alpha, variant=None):
    # the no-modulation ablation interpolates on the uniform grid
    eff_alpha = 0.0 if variant == "no_dlsm" else alpha
    return compute_positions(slice_tuple.he_anchors[0], slice_tuple.he_anchors[1], s, eff_alpha)


def tuple_loss(net, slice_tuple, config, variant=None):
    """Forward one tuple and build its weighted training loss.

    The tuple's own target count decides how many positions to interpolate,
    so training batches may mix window spans.
    """
    s = len(slice_tuple.targets) or config.s
    positions = _tuple_positions(slice_tuple, s, config.alpha, variant)
    collect = {}
    preds = net.forward_tuple(slice_tuple, positions, variant=variant, collect=collect)
    l_sim = loss_sim(preds, slice_tuple.targets)
    l_smo = loss_smooth(collect["flow01"], collect["flow10"])
    total = config.sim_weight * l_sim + config.smooth_weight * l_smo
    return total, l_sim, l_smo


def fit_model(net, tuples, config: RunConfig, variant=None, log_sink=None, checkpoint_dir=None):
    """Optimize ``net`` on in-memory tuples; returns the line-oriented log.

    One step samples ``batch_size`` tuples, accumulates their gradients with
    equal weight, and applies a single AdamW update under the cosine
    schedule (total horizon = epochs x batches per epoch, fixed up front).
    """
    if not tuples:
        raise ValueError("no training tuples")
    batches_per_epoch = math.ceil(len(tuples) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    state = init_optimizer(
        net.params, lr0=config.lr0, lr_min=config.lr_min, total_steps=total_steps,
        betas=config.betas, eps=config.eps, weight_decay=config.weight_decay,
    )
    order_rng = np.random.default_rng(config.seed)
    log = []
    step = 0
    for _ in range(config.epochs):
        order = order_rng.permutation(len(tuples))
        for b in range(batches_per_epoch):
            batch = order[b * config.batch_size : (b + 1) * config.batch_size]
            net.params.zero_grad()
            sims = smos = totals = 0.0
            inv = 1.0 / len(batch)
            for idx in batch:
                total, l_sim, l_smo = tuple_loss(net, tuples[idx], config, variant)
                (total * inv).backward()
                sims += l_sim.item() * inv
                smos += l_smo.item() * inv
                totals += total.item() * inv
            if not math.isfinite(totals):
                raise TrainingDivergedError(step, totals)
            if variant is not None:
                # ablated variants bypass whole branches; their parameters
                # see no gradient and simply stay put
                for t in net.params.tensors():
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
            lr = cosine_lr(state)
            adamw_step(net.params, state)
            record = {"step": step, "lr": lr, "l_sim": sims, "l_smo": smos, "total": totals}
            log.append(record)
            if log_sink is not None:
                log_sink(record)
            step += 1
            if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{step:06d}", net.params, step,
                                model_meta=net.meta())
    return log, state


def train(config: RunConfig):
    """Dataset-directory training entry point; writes checkpoints and a log."""
    if not config.dataset:
        raise ValueError("config.dataset must point at a dataset directory")
    manifest = read_manifest(config.dataset)
    gen = manifest["generator"]
    tuples = split_tuples(config.dataset, "train", config.s)
    net = InterpolationNetwork(config.model_config(gen["genes"], gen["size"]))

    ckpt_dir = Path(config.checkpoint) if config.checkpoint else None
    log_file = open(config.log_path, "w") if config.log_path else None

    def sink(record):
        line = (f"step={record['step']} lr={record['lr']:.6e} l_sim={record['l_sim']:.6f} "
                f"l_smo={record['l_smo']:.6f} total={record['total']:.6f}")
        if log_file:
            log_file.write(line + "\n")

    try:
        log, state = fit_model(net, tuples, config, log_sink=sink, checkpoint_dir=ckpt_dir)
    finally:
        if log_file:
            log_file.close()
    steps = len(log)
    if ckpt_dir:
        save_checkpoint(ckpt_dir / "final", net.params, steps, model_meta=net.meta())
    return TrainResult(checkpoint_dir=str(ckpt_dir / "final") if ckpt_dir else "", steps=steps, log=log), net


# ----------------------------------------------------------------------
# baseline and evaluation
# ----------------------------------------------------------------------


def baseline_linear(st0, st1, positions):
    """Depth-weighted blend of the anchors at each position."""
    a = st0.genes if isinstance(st0, STPatch) else np.asarray(st0)
    b = st1.genes if isinstance(st1, STPatch) else np.asarray(st1)
    if a.shape != b.shape:
        raise ValueError(f"anchor shapes differ: {a.shape} vs {b.shape}")
    base_index = st0.slice_index if isinstance(st0, STPatch) else 0
    pos = positions.positions if hasattr(positions, "positions") else positions
    return [
        STPatch(genes=(1.0 - p) * a + p * b, slice_index=base_index + i + 1)
        for i, p in enumerate(pos)
    ]


@dataclass
class EvalRow:
    s: int
    model: MetricReport
    baseline: MetricReport
    tuples: int


def evaluate_tuples(net, tuples, s, alpha, variant=None):
    """Model and linear-baseline metrics over a tuple list (mean of per-tuple
    means; each per-tuple mean averages its s interpolated positions)."""

    def one(slice_tuple):
        positions = _tuple_positions(slice_tuple, s, alpha, variant)
        if not np.all(np.diff(positions.positions) > 0) or not (
            0.0 < positions.positions[0] and positions.positions[-1] < 1.0
        ):
            raise AssertionError(f"position contract violated: {positions.positions}")
        preds = net.forward_tuple(slice_tuple, positions, variant=variant)
        model_reports = [metric_suite(p, t) for p, t in zip(preds, slice_tuple.targets)]
        base = baseline_linear(*slice_tuple.anchors, positions)
        base_reports = [metric_suite(p, t) for p, t in zip(base, slice_tuple.targets)]
        return mean_reports(model_reports), mean_reports(base_reports)

    workers = thread_count()
    with no_grad():
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, tuples))
        else:
            results = [one(t) for t in tuples]
    model_rows = [m for m, _ in results]
    base_rows = [b for _, b in results]
    return EvalRow(s=s, model=mean_reports(model_rows), baseline=mean_reports(base_rows),
                   tuples=len(tuples)), results


def evaluate(net, dataset, split, s, alpha=0.5, variant=None):
    tuples = split_tuples(dataset, split, s)
    return evaluate_tuples(net, tuples, s, alpha, variant=variant)


def format_rows(rows):
    """Aligned-column text table, one line per (variant, s) row."""
    header = f"{'row':<16} {'s':>2} {'PSNR':>8} {'RMSE':>8} {'PCC':>8} {'SSIM':>8} {'tuples':>7}"
    lines = [header, "-" * len(header)]
    for name, row in rows:
        for label, rep in (("model", row.model), ("baseline", row.baseline)):
            tag = f"{name}/{label}" if name else label
            lines.append(
                f"{tag:<16} {row.s:>2} {rep.psnr:>8.3f} {rep.rmse:>8.4f} "
                f"{rep.pcc:>8.4f} {rep.ssim:>8.4f} {row.tuples:>7}"
            )
    return "\n".join(lines)


def rows_to_json(rows):
    return [
        {"name": name, "s": row.s, "tuples": row.tuples,
         "model": row.model.as_dict(), "baseline": row.baseline.as_dict()}
        for name, row in rows
    ]


# ----------------------------------------------------------------------
# ablations
# ----------------------------------------------------------------------

ABLATION_VARIANTS = ("no_cross_modal", "no_mgc_graph", "no_dlsm")


def ablate(config: RunConfig, variant, split="test"):
    """Train and evaluate one ablated variant of the model."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    manifest = read_manifest(config.dataset)
    gen = manifest["generator"]
    tuples = split_tuples(config.dataset, "train", config.s)
    net = InterpolationNetwork(config.model_config(gen["genes"], gen["size"]))
    fit_model(net, tuples, config, variant=variant)
    row, _ = evaluate(net, config.dataset, split, config.s, config.alpha, variant=variant)
    return net, row
