"""Desk-scale end-to-end pipeline on synthetic data.

Generates an ellipse-on-speckle corpus, pre-trains all three contrastive
methods, fine-tunes each checkpoint plus a supervised baseline on a quarter
of the labels, and checks a set of directional health criteria.  The whole
run is seeded and reproducible.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import bus_only_corpus, make_bus_split
from .finetune import FinetuneConfig, RunResult, finetune
from .models import (
    Arch,
    Method,
    TransferScope,
    build_segmentation_network,
    segmentation_spec,
    transfer_audit,
    transfer_weights,
)
from .pretrain import PretrainConfig, TrainTrace, run_pretraining
from .report import aggregate, render_results_table
from .synthetic import make_synthetic_corpus

SSL_METHODS = (Method.SIMCLR, Method.MOCO, Method.SIMSIAM)


@dataclass(frozen=True)
class SmokeSettings:
    n_images: int = 200
    image_size: int = 32
    counts: tuple[int, int, int] = (140, 20, 40)
    pretrain_epochs: int = 20
    pretrain_batch: int = 64
    pretrain_lr: float = 1e-3
    moco_momentum: float = 0.9  # the key encoder must track the query within 40 steps
    finetune_epochs: int = 30
    finetune_lr: float = 3e-4  # desk-scale corpus needs to converge within 30 epochs
    finetune_fraction: float = 0.25
    base_width: int = 16
    depth: int = 4
    seed: int = 0
    min_dice: float = 0.70
    ssl_margin: float = 0.02
    collapse_floor: float = 0.01


@dataclass
class SmokeReport:
    settings: SmokeSettings
    traces: dict[str, TrainTrace] = field(default_factory=dict)
    results: dict[str, RunResult] = field(default_factory=dict)
    audits: dict[str, dict] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def check_lines(self) -> list[str]:
        return [f"[{'PASS' if ok else 'FAIL'}] {name}" for name, ok in self.checks.items()]


def run_smoke(out_dir: Path | str | None = None, settings: SmokeSettings = SmokeSettings()) -> SmokeReport:
    started = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    corpus_samples = make_synthetic_corpus(
        n=settings.n_images, size=settings.image_size, seed=settings.seed
    )
    sample_map = {s.id: s for s in corpus_samples}
    split = make_bus_split(
        corpus_samples, seed=settings.seed, counts=settings.counts, name="synthetic"
    )
    corpus = bus_only_corpus(split, image_size=settings.image_size, name="synthetic")

    report = SmokeReport(settings=settings)
    checkpoints = {}
    for method in SSL_METHODS:
        config = PretrainConfig(
            method=method,
            corpus_name="synthetic",
            arch=Arch.UNET,
            image_size=settings.image_size,
            batch_size=settings.pretrain_batch,
            epochs=settings.pretrain_epochs,
            lr=settings.pretrain_lr,
            momentum=settings.moco_momentum,
            seed=settings.seed,
            base_width=settings.base_width,
            depth=settings.depth,
        )
        run_out = out / f"pretrain_{method.value}" if out is not None else None
        checkpoint, trace = run_pretraining(config, corpus, sample_map, out_dir=run_out)
        checkpoints[method.value] = checkpoint
        report.traces[method.value] = trace

    results_log = out / "results.tsv" if out is not None else None
    base_finetune = FinetuneConfig(
        scope=TransferScope.ENCODER_ONLY,
        fraction=settings.finetune_fraction,
        lr=settings.finetune_lr,
        epochs=settings.finetune_epochs,
        seed=settings.seed,
        image_size=settings.image_size,
        arch=Arch.UNET,
        base_width=settings.base_width,
        depth=settings.depth,
        corpus_name="synthetic",
    )
    for method in SSL_METHODS:
        config = dataclasses.replace(base_finetune, init=checkpoints[method.value])
        report.audits[method.value] = _audit_transfer(config)
        _, result = finetune(config, split, sample_map, results_log=results_log)
        report.results[method.value] = result
    _, baseline = finetune(base_finetune, split, sample_map, results_log=results_log)
    report.results["supervised"] = baseline

    _evaluate_checks(report)
    report.seconds = time.perf_counter() - started
    if out is not None:
        table = aggregate(report.results.values(), fractions=(settings.finetune_fraction,))
        (out / "summary.txt").write_text(
            render_results_table(table) + "\n" + "\n".join(report.check_lines()) + "\n",
            encoding="utf-8",
        )
    return report


def _audit_transfer(config: FinetuneConfig) -> dict:
    """Rebuild the fine-tuning model exactly as `finetune` will and audit it."""
    checkpoint = config.init
    torch.manual_seed(config.seed)
    spec = segmentation_spec(
        checkpoint.spec.arch,
        checkpoint.spec.input_size,
        base_width=checkpoint.spec.base_width,
        depth=checkpoint.spec.depth,
    )
    model = build_segmentation_network(spec)
    transfer_weights(checkpoint, model, config.scope)
    return transfer_audit(checkpoint, model)


def _evaluate_checks(report: SmokeReport) -> None:
    settings = report.settings
    checks = report.checks
    for method in SSL_METHODS:
        trace = report.traces[method.value]
        first, last = trace.records[0], trace.records[-1]
        checks[f"pretrain_loss_decreased_{method.value}"] = last.train_loss < first.train_loss
    for name, result in report.results.items():
        checks[f"test_dice_{name}_ge_{settings.min_dice}"] = result.test_dice >= settings.min_dice
    ssl_mean = sum(report.results[m.value].test_dice for m in SSL_METHODS) / len(SSL_METHODS)
    supervised = report.results["supervised"].test_dice
    checks["ssl_mean_dice_vs_supervised"] = ssl_mean >= supervised - settings.ssl_margin
    collapse_ok = all(
        record.collapse_metric > settings.collapse_floor
        for record in report.traces[Method.SIMSIAM.value].records
    )
    checks["simsiam_no_collapse"] = collapse_ok
    for method in SSL_METHODS:
        audit = report.audits[method.value]
        checks[f"transfer_audit_{method.value}"] = (
            audit["encoder_equal"] is True and audit["decoder_equal"] is False
        )
