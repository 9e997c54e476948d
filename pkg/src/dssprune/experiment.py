"""Train -> score -> prune -> finetune -> evaluate, with checkpoints and metrics."""
from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import DataConfig, TrainConfig
from .data import (
    BackgroundMode,
    BackgroundSource,
    Dataset,
    grayscale_to_rgb,
    load_mnist,
    make_batches,
    synth_mnistm,
)
from .errors import DSSPruneError, InputError, RunError
from .metrics import MetricsRecord, append_metrics
from .model import ModelSpec, build_convnet, forward, predict
from .pruning import apply_prune, make_plan, sparsity_report
from .saliency import ActivationStats, Method, collect_stats, save_stats, score_layers
from .tensor import SGD, Tape, backward, softmax_cross_entropy

log = logging.getLogger(__name__)

BASELINE_TAG = "baseline"


@dataclass(frozen=True)
class DomainSplit:
    """Training and held-out evaluation data of one domain."""

    train: Dataset
    eval: Dataset


def load_domains(data: DataConfig) -> tuple[DomainSplit, DomainSplit]:
    """MNIST (as RGB) for the source domain and its synthesized MNIST-M counterpart as target."""
    gray_train, gray_eval = load_mnist(data.mnist_dir, data.train_size, data.eval_size)
    if data.background_dir:
        bg = BackgroundSource(BackgroundMode.IMAGE_DIRECTORY, data.background_dir, data.synth_seed)
    else:
        bg = BackgroundSource(BackgroundMode.PROCEDURAL, seed=data.synth_seed)
    source = DomainSplit(grayscale_to_rgb(gray_train), grayscale_to_rgb(gray_eval))
    target = DomainSplit(
        synth_mnistm(gray_train, bg, seed=data.synth_seed),
        synth_mnistm(gray_eval, bg, seed=data.synth_seed, index_offset=len(gray_train)),
    )
    return source, target


# ------------------------------------------------------------------ training


def _fit(model: ModelSpec, ds: Dataset, epochs: int, lr: float, cfg: TrainConfig, epoch_offset: int = 0) -> list[float]:
    if len(ds) == 0:
        raise InputError("cannot train on an empty dataset")
    history: list[float] = []
    if epochs == 0:
        return history
    opt = SGD(model.parameters(), lr, cfg.momentum)
    for epoch in range(epochs):
        total, seen = 0.0, 0
        for images, labels in make_batches(ds, cfg.batch_size, cfg.seed, epoch_offset + epoch):
            with Tape():
                logits, _ = forward(model, images)
                loss = softmax_cross_entropy(logits, labels)
                backward(loss)
            value = loss.item()
            if not math.isfinite(value):
                raise RunError(f"loss diverged ({value}) in epoch {epoch}", stage="train", epoch=epoch)
            opt.step()
            total += value * len(labels)
            seen += len(labels)
        history.append(total / seen)
        log.debug("epoch %d: mean loss %.4f", epoch, history[-1])
    return history


def train(model: ModelSpec, source: Dataset, cfg: TrainConfig) -> tuple[ModelSpec, list[float]]:
    """Train in place with SGD+momentum; returns the model and per-epoch mean loss."""
    return model, _fit(model, source, cfg.epochs, cfg.lr, cfg)


def finetune(model: ModelSpec, source: Dataset, cfg: TrainConfig) -> ModelSpec:
    # batch order continues the training epoch sequence
    _fit(model, source, cfg.finetune_epochs, cfg.finetune_lr, cfg, epoch_offset=cfg.epochs)
    return model


def evaluate(model: ModelSpec, ds: Dataset, batch_size: int = 500) -> float:
    if len(ds) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, ds.images, batch_size) == ds.labels))


# ------------------------------------------------------------------ pipeline


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except RunError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
    except (DSSPruneError, ArithmeticError, ValueError, OSError) as exc:
        raise RunError(f"[{name}] {exc}", stage=name) from exc


@dataclass
class Baseline:
    """A trained model with its accuracies and cached activation stats."""

    model: ModelSpec
    source_acc: float
    target_acc: float
    loss_history: list[float]
    seed: int
    _stats: dict[int | None, tuple[ActivationStats, ActivationStats]] = field(default_factory=dict, repr=False)

    def stats(self, source: DomainSplit, target: DomainSplit, sample_cap: int | None, workdir: Path | None = None):
        if sample_cap not in self._stats:
            src = collect_stats(self.model, source.train, sample_cap=sample_cap)
            tgt = collect_stats(self.model, target.train, sample_cap=sample_cap)
            if workdir is not None:
                save_stats(src, workdir / "stats_source.bin")
                save_stats(tgt, workdir / "stats_target.bin")
            self._stats[sample_cap] = (src, tgt)
        return self._stats[sample_cap]

    def record(self, wall_time: float = 0.0) -> MetricsRecord:
        return MetricsRecord(BASELINE_TAG, 0.0, self.seed, self.source_acc, self.target_acc, self.target_acc, wall_time)


def _check_domains(source: DomainSplit, target: DomainSplit) -> None:
    shapes = {source.train.shape, source.eval.shape, target.train.shape, target.eval.shape}
    if len(shapes) != 1:
        raise InputError(f"source and target datasets have different shapes: {sorted(shapes)}")


def prepare_baseline(
    cfg: TrainConfig,
    source: DomainSplit,
    target: DomainSplit,
    workdir: Path | None = None,
    eval_batch_size: int = 500,
    class_count: int = 10,
) -> Baseline:
    """Build and train the model for ``cfg.seed``, then measure its accuracies."""
    _check_domains(source, target)
    for ds in (source.train, source.eval, target.eval):
        ds.validate(class_count)
    with _stage("train"):
        model = build_convnet(source.train.shape, class_count, seed=cfg.seed)
        _, history = train(model, source.train, cfg)
    if workdir is not None:
        with _stage("checkpoint"):
            workdir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, workdir / "trained.ckpt")
    with _stage("evaluate"):
        src_acc = evaluate(model, source.eval, eval_batch_size)
        tgt_acc = evaluate(model, target.eval, eval_batch_size)
    log.info("train: seed %d, %d epochs, final loss %s, source acc %.4f, target acc %.4f",
             cfg.seed, cfg.epochs, f"{history[-1]:.4f}" if history else "n/a", src_acc, tgt_acc)
    return Baseline(model, src_acc, tgt_acc, history, cfg.seed)


def run_pipeline(
    cfg: TrainConfig,
    source: DomainSplit,
    target: DomainSplit,
    workdir=None,
    baseline: Baseline | None = None,
    eval_batch_size: int = 500,
) -> MetricsRecord:
    """One full experiment cell; returns its metrics record.

    ``baseline`` may carry a model already trained with this exact config
    (training is deterministic, so this only saves time). When the plan
    removes no channel there is nothing to recover and finetuning is skipped,
    which makes a zero-ratio run identical to the baseline.
    """
    start = time.perf_counter()
    workdir = Path(workdir) if workdir is not None else None
    if baseline is None:
        baseline = prepare_baseline(cfg, source, target, workdir, eval_batch_size)
    elif baseline.seed != cfg.seed:
        raise InputError(f"baseline was trained with seed {baseline.seed}, config asks for {cfg.seed}")
    method = cfg.score_method
    cell = None
    if workdir is not None:
        cell = workdir / f"{method.value}_r{cfg.sparsity_ratio:.3f}"
        cell.mkdir(parents=True, exist_ok=True)

    with _stage("score"):
        src_stats = tgt_stats = None
        if method in (Method.DSS, Method.REVERSE_DSS):
            src_stats, tgt_stats = baseline.stats(source, target, cfg.sample_cap, workdir)
        scores = score_layers(baseline.model, method, src_stats, tgt_stats, seed=cfg.seed)
    with _stage("prune"):
        plan = make_plan(scores, cfg.sparsity_ratio)
        pruned = apply_prune(baseline.model, plan)
        report = sparsity_report(baseline.model, pruned, plan)
        if cell is not None:
            plan.save(cell / "plan.txt")
            save_checkpoint(pruned, cell / "pruned.ckpt")
    log.info("prune: %s %s", method.value, report.summary())
    with _stage("evaluate"):
        before = evaluate(pruned, target.eval, eval_batch_size)
    log.info("evaluate: target acc before finetune %.4f (baseline %.4f)", before, baseline.target_acc)

    if plan:
        with _stage("finetune"):
            finetune(pruned, source.train, cfg)
            if cell is not None:
                save_checkpoint(pruned, cell / "finetuned.ckpt")
        with _stage("evaluate"):
            src_acc = evaluate(pruned, source.eval, eval_batch_size)
            after = evaluate(pruned, target.eval, eval_batch_size)
        log.info("finetune: %d epochs, source acc %.4f, target acc %.4f", cfg.finetune_epochs, src_acc, after)
    else:
        src_acc, after = baseline.source_acc, before
        log.info("finetune: skipped, nothing was pruned")

    return MetricsRecord(
        method.value, float(cfg.sparsity_ratio), int(cfg.seed), src_acc, before, after, time.perf_counter() - start
    )


@dataclass
class SweepResult:
    records: list[MetricsRecord]
    failures: list[tuple[float, str, int, str]]

    @property
    def ok(self) -> bool:
        return not self.failures


def run_sweep(
    cfg: TrainConfig,
    ratios: Sequence[float],
    methods: Iterable[Method | str],
    seeds: Sequence[int],
    source: DomainSplit,
    target: DomainSplit,
    workdir=None,
    metrics_path=None,
    eval_batch_size: int = 500,
) -> SweepResult:
    """Every (ratio, method, seed) cell; failures are recorded and the sweep goes on.

    One baseline is trained per seed and shared by that seed's cells.
    """
    methods = [Method.parse(m) for m in methods]
    for r in ratios:
        if not 0 <= r < 1:
            raise InputError(f"sparsity ratios must lie in [0, 1), got {r}")
    records: list[MetricsRecord] = []
    failures: list[tuple[float, str, int, str]] = []
    for seed in seeds:
        seed_cfg = cfg.replace(seed=seed)
        seed_dir = Path(workdir) / f"seed{seed}" if workdir is not None else None
        try:
            base = prepare_baseline(seed_cfg, source, target, seed_dir, eval_batch_size)
        except RunError as exc:
            failures += [(r, m.value, seed, str(exc)) for m in methods for r in ratios]
            log.error("seed %d: baseline failed: %s", seed, exc)
            continue
        for method in methods:
            for ratio in ratios:
                cell_cfg = seed_cfg.replace(score_method=method, sparsity_ratio=ratio)
                try:
                    rec = run_pipeline(cell_cfg, source, target, seed_dir, base, eval_batch_size)
                except RunError as exc:
                    failures.append((ratio, method.value, seed, str(exc)))
                    log.error("cell ratio=%s method=%s seed=%d failed: %s", ratio, method.value, seed, exc)
                    continue
                records.append(rec)
                if metrics_path is not None:
                    append_metrics([rec], metrics_path)
    return SweepResult(records, failures)

