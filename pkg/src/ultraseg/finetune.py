"""Supervised fine-tuning on labelled masks, seeded repeats, and Dice evaluation.

The test partition is touched exactly once per run, after training picks the
best-validation weights.  Repeats share one split and label subset and vary
only the seed, so run-to-run differences isolate initialization and shuffling.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import ImageSample, SplitSpec, resize, subset_labels
from .errors import ConfigurationError, ValidationError
from .models import (
    Arch,
    Checkpoint,
    SegmentationNetwork,
    TransferScope,
    build_segmentation_network,
    segmentation_spec,
    stack_images,
    transfer_weights,
)


@dataclass(frozen=True)
class FinetuneConfig:
    init: Checkpoint | None = None  # None: supervised baseline, trained from scratch
    scope: TransferScope = TransferScope.ENCODER_ONLY
    fraction: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 1e-6
    epochs: int = 100
    batch_size: int = 32
    image_size: int | None = None  # None: the checkpoint's pre-training size
    seed: int = 0
    patience: int = 20
    arch: Arch = Arch.UNET  # used when init is None
    base_width: int = 64
    depth: int = 4
    corpus_name: str | None = None  # results-log label; defaults from init

    def resolved_image_size(self) -> int:
        if self.init is not None:
            size = self.init.spec.input_size
            if self.image_size is not None and self.image_size != size:
                raise ConfigurationError(
                    f"image size {self.image_size} != checkpoint pre-training size {size}"
                )
            return size
        if self.image_size is None:
            raise ConfigurationError("image_size is required when training from scratch")
        return self.image_size

    def method_label(self) -> str:
        return self.init.method.value if self.init is not None else "supervised"

    def corpus_label(self) -> str:
        if self.corpus_name is not None:
            return self.corpus_name
        return self.init.corpus_name if self.init is not None else "none"


@dataclass(frozen=True)
class RunResult:
    """One fine-tuning run, the atom of every results table."""

    method: str
    corpus: str
    arch: str
    image_size: int
    fraction: float
    seed: int
    test_dice: float
    val_curve: tuple[float, ...] = ()

    def fingerprint(self) -> tuple:
        return (self.method, self.corpus, self.arch, self.image_size, self.fraction, self.seed)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap coefficient ``2|P & G| / (|P| + |G|)``; 1.0 when both are empty."""
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    for name, mask in (("pred", pred), ("gt", gt)):
        if not np.isin(np.unique(mask), (0, 1)).all():
            raise ValidationError(f"{name} mask is not binary")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    intersection = int(np.logical_and(pred, gt).sum())
    return 2.0 * intersection / total


def _mean_dice(model: SegmentationNetwork, batch: torch.Tensor, masks: Sequence[np.ndarray]) -> float:
    predictions = model.predict_mask(batch).numpy()
    return float(np.mean([dice(p, g) for p, g in zip(predictions, masks)]))


def _prepare(samples: Sequence[ImageSample], size: int) -> tuple[torch.Tensor, torch.Tensor, list[np.ndarray]]:
    resized = [resize(s, size) for s in samples]
    missing = [s.id for s in resized if s.mask is None]
    if missing:
        raise ConfigurationError(f"samples without masks cannot be used for fine-tuning: {missing[:3]}")
    images = stack_images([s.pixels for s in resized])
    masks = [s.mask for s in resized]
    targets = torch.from_numpy(np.stack(masks).astype(np.float32))
    return images, targets, masks


def _audit_no_leakage(split: SplitSpec, train_ids: Sequence[str]) -> None:
    leaked = (set(train_ids) | set(split.val_ids)) & set(split.test_ids)
    if leaked:
        raise ValidationError(f"test ids leaked into training/validation: {sorted(leaked)[:3]}")


def finetune(
    config: FinetuneConfig,
    split: SplitSpec,
    samples: Mapping[str, ImageSample],
    results_log: Path | str | None = None,
) -> tuple[SegmentationNetwork, RunResult]:
    """Train (or fine-tune) a segmentation network on one label fraction.

    Uses per-pixel binary cross-entropy, validates Dice on the val partition
    each epoch with early stopping, then scores the best weights once on the
    test partition.
    """
    if config.fraction in split.fraction_subsets:
        train_ids = list(split.fraction_subsets[config.fraction])
    else:
        train_ids = subset_labels(split, config.fraction, split.seed)
    if not train_ids:
        raise ConfigurationError(f"fraction {config.fraction} selects no training images")
    _audit_no_leakage(split, train_ids)

    size = config.resolved_image_size()
    torch.manual_seed(config.seed)
    if config.init is not None:
        spec = segmentation_spec(
            config.init.spec.arch,
            size,
            base_width=config.init.spec.base_width,
            depth=config.init.spec.depth,
        )
        model = build_segmentation_network(spec)
        transfer_weights(config.init, model, config.scope)
    else:
        spec = segmentation_spec(config.arch, size, base_width=config.base_width, depth=config.depth)
        model = build_segmentation_network(spec)

    train_images, train_targets, _ = _prepare([samples[i] for i in train_ids], size)
    val_images, _, val_masks = _prepare([samples[i] for i in split.val_ids], size)
    test_images, _, test_masks = _prepare([samples[i] for i in split.test_ids], size)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    criterion = torch.nn.BCEWithLogitsLoss()

    best_state = copy.deepcopy(model.state_dict())
    best_val = -math.inf
    stale = 0
    val_curve: list[float] = []
    n = len(train_ids)
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch])).permutation(n)
        model.train()
        for begin in range(0, n, config.batch_size):
            index = torch.from_numpy(order[begin : begin + config.batch_size])
            optimizer.zero_grad()
            logits = model(train_images[index])
            loss = criterion(logits, train_targets[index])
            loss.backward()
            optimizer.step()
        val_dice = _mean_dice(model, val_images, val_masks)
        val_curve.append(val_dice)
        if val_dice > best_val:
            best_val = val_dice
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_state_dict(best_state)
    test_dice = _mean_dice(model, test_images, test_masks)
    result = RunResult(
        method=config.method_label(),
        corpus=config.corpus_label(),
        arch=spec.arch.value,
        image_size=size,
        fraction=config.fraction,
        seed=config.seed,
        test_dice=test_dice,
        val_curve=tuple(val_curve),
    )
    if results_log is not None:
        append_result(results_log, result)
    return model, result


def repeat_experiment(
    config: FinetuneConfig,
    split: SplitSpec,
    samples: Mapping[str, ImageSample],
    n: int = 10,
    base_seed: int | None = None,
    results_log: Path | str | None = None,
) -> list[RunResult]:
    """``n`` independent runs with consecutive seeds over the same data split."""
    if n < 1:
        raise ValidationError(f"need at least one repeat, got {n}")
    start = config.seed if base_seed is None else base_seed
    results = []
    for seed in range(start, start + n):
        run_config = dataclasses.replace(config, seed=seed)
        try:
            _, result = finetune(run_config, split, samples, results_log=results_log)
        except Exception as err:
            raise RuntimeError(f"fine-tuning run with seed {seed} failed: {err}") from err
        results.append(result)
    return results


# ---------------------------------------------------------------------------
# Results log
# ---------------------------------------------------------------------------

def result_line(result: RunResult) -> str:
    return (
        f"{result.method}\t{result.corpus}\t{result.arch}\t{result.image_size}"
        f"\t{result.fraction}\t{result.seed}\t{result.test_dice:.6f}"
    )


def append_result(path: Path | str, result: RunResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(result_line(result) + "\n")


def read_results(path: Path | str) -> list[RunResult]:
    results = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise ValidationError(f"{path}:{lineno}: expected 7 tab-separated fields")
        results.append(
            RunResult(
                method=parts[0],
                corpus=parts[1],
                arch=parts[2],
                image_size=int(parts[3]),
                fraction=float(parts[4]),
                seed=int(parts[5]),
                test_dice=float(parts[6]),
            )
        )
    return results
