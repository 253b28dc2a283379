"""Self-supervised pre-training stage: per-method steps, collapse monitoring,
checkpoint selection on validation loss, and seeded end-to-end determinism."""

from __future__ import annotations

import copy
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .augment import two_views
from .data import ImageSample, PretrainCorpus
from .errors import ConfigurationError, TrainingDivergedError, ValidationError
from .losses import (
    LossValue,
    QueueState,
    info_nce,
    momentum_update_module,
    nt_xent,
    queue_push,
    simsiam_loss,
)
from .models import (
    Arch,
    Checkpoint,
    Method,
    NetworkSpec,
    TrainMeta,
    build_ssl_network,
    save_checkpoint,
    snapshot_segments,
    ssl_spec,
    stack_images,
)

# Published batch sizes per method and image size; 32x32 runs use the first
# entry, 50x50 and 64x64 runs the second.
BATCH_DEFAULTS = {
    Method.SIMCLR: (512, 256),
    Method.MOCO: (256, 64),
    Method.SIMSIAM: (512, 512),
}
SIMSIAM_MAX_BATCH = 512  # larger batches collapse on the ultrasound corpora
TAU_DEFAULTS = {Method.MOCO: 0.07, Method.SIMCLR: 0.5, Method.SIMSIAM: None}
COLLAPSE_THRESHOLD = 0.01
COLLAPSE_PATIENCE = 3
VAL_EPOCH_TAG = 0  # validation views reuse one tag so losses compare across epochs


@dataclass(frozen=True)
class PretrainConfig:
    method: Method
    corpus_name: str = ""
    arch: Arch = Arch.UNET
    image_size: int = 32
    batch_size: int | None = None  # None: published default for (method, size)
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-6
    tau: float | None = None  # None: method default
    momentum: float = 0.999
    queue_size: int | None = None  # None: derived from corpus and batch size
    seed: int = 0
    base_width: int = 64
    depth: int = 4
    embedding_dim: int = 128
    pretrain_decoder: bool | None = None

    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            batch = self.batch_size
        else:
            small, large = BATCH_DEFAULTS[self.method]
            batch = small if self.image_size <= 32 else large
        if self.method is Method.SIMSIAM and batch > SIMSIAM_MAX_BATCH:
            raise ConfigurationError(
                f"siamese batch size capped at {SIMSIAM_MAX_BATCH}, got {batch}"
            )
        if batch < 2:
            raise ConfigurationError(f"batch size must be >= 2, got {batch}")
        return batch

    def resolved_tau(self) -> float | None:
        return self.tau if self.tau is not None else TAU_DEFAULTS[self.method]

    def resolved_queue_size(self, train_size: int) -> int:
        batch = self.resolved_batch_size()
        if self.queue_size is not None:
            k = self.queue_size
            if k % batch != 0:
                raise ConfigurationError(f"queue size {k} must be a multiple of batch size {batch}")
            if k >= train_size:
                raise ConfigurationError(f"queue size {k} must be smaller than the corpus ({train_size})")
            return k
        k = batch * (min(2048, train_size - 1) // batch)
        if k == 0:
            raise ConfigurationError(
                f"corpus of {train_size} images cannot sustain a queue with batch size {batch}"
            )
        return k

    def network_spec(self) -> NetworkSpec:
        return ssl_spec(
            self.arch,
            self.image_size,
            self.method,
            embedding_dim=self.embedding_dim,
            base_width=self.base_width,
            depth=self.depth,
            pretrain_decoder=self.pretrain_decoder,
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    collapse_metric: float
    wall_time: float


@dataclass
class TrainTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def best_val_curve(self) -> list[float]:
        best = math.inf
        curve = []
        for record in self.records:
            best = min(best, record.val_loss)
            curve.append(best)
        return curve

    def to_lines(self) -> str:
        rows = [
            f"{r.epoch}\t{r.train_loss:.6f}\t{r.val_loss:.6f}\t{r.collapse_metric:.6f}\t{r.wall_time:.3f}"
            for r in self.records
        ]
        return "\n".join(rows) + ("\n" if rows else "")


def collapse_metric(embeddings: torch.Tensor) -> float:
    """Mean per-dimension standard deviation of L2-normalized embeddings.

    Near zero means every embedding is (almost) identical; a healthy batch of
    spread-out unit vectors sits near ``1/sqrt(D)``.
    """
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ValidationError("collapse metric needs a [B >= 2, D] embedding batch")
    normalized = torch.nn.functional.normalize(embeddings.detach(), dim=1)
    return float(normalized.std(dim=0, unbiased=False).mean())


class SSLTrainer:
    """Owns the model(s), optimizer, and queue for one pre-training run."""

    def __init__(self, config: PretrainConfig, queue_size: int | None = None):
        self.config = config
        self.tau = config.resolved_tau()
        torch.manual_seed(config.seed)
        self.model = build_ssl_network(config.network_spec(), config.method)
        self.key_model = None
        self.queue: QueueState | None = None
        if config.method is Method.MOCO:
            if queue_size is None:
                raise ConfigurationError("a queue size is required for momentum training")
            self.key_model = copy.deepcopy(self.model)
            for param in self.key_model.parameters():
                param.requires_grad_(False)
            self.queue = QueueState.create(queue_size, config.embedding_dim)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay
        )
        self.steps = 0
        self.last_embeddings: torch.Tensor | None = None

    def _loss(self, views_a: torch.Tensor, views_b: torch.Tensor) -> LossValue:
        method = self.config.method
        if method is Method.SIMCLR:
            za = self.model(views_a)
            zb = self.model(views_b)
            self.last_embeddings = torch.nn.functional.normalize(za.detach(), dim=1)
            return nt_xent(torch.cat([za, zb]), self.tau)
        if method is Method.MOCO:
            q = torch.nn.functional.normalize(self.model(views_a), dim=1)
            with torch.no_grad():
                k = self.key_model.embed(views_b)
            loss = info_nce(q, k, self.queue, self.tau)
            self._pending_keys = k
            self.last_embeddings = q.detach()
            return loss
        z1, p1 = self.model(views_a)
        z2, p2 = self.model(views_b)
        self.last_embeddings = torch.nn.functional.normalize(z1.detach(), dim=1)
        return simsiam_loss(p1, z1, p2, z2)

    @torch.no_grad()
    def warm_up_queue(self, view_batches) -> None:
        """Fill the dictionary with real keys before the first gradient step,
        so early losses are scored against as many negatives as later ones."""
        if self.queue is None:
            return
        self.key_model.train()
        for views in view_batches:
            if self.queue.filled >= self.queue.capacity:
                break
            keys = self.key_model.embed(views)
            room = self.queue.capacity - self.queue.filled
            self.queue = queue_push(self.queue, keys[:room])

    def step(self, views_a: torch.Tensor, views_b: torch.Tensor) -> LossValue:
        """One optimizer step on the trainable parameters.

        For momentum training the key encoder and queue are updated after the
        gradient step, and gradients never reach the key encoder.
        """
        self.model.train()
        if self.key_model is not None:
            self.key_model.train()
        loss = self._loss(views_a, views_b)
        if not torch.isfinite(loss.value):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.steps}",
                snapshot={"step": self.steps, "loss": float(loss.value.detach()), "aux": loss.aux},
            )
        self.optimizer.zero_grad()
        loss.value.backward()
        self.optimizer.step()
        if self.config.method is Method.MOCO:
            momentum_update_module(self.key_model, self.model, self.config.momentum)
            self.queue = queue_push(self.queue, self._pending_keys)
        self.steps += 1
        return loss

    @torch.no_grad()
    def evaluate(self, views_a: torch.Tensor, views_b: torch.Tensor) -> float:
        """Method loss on held-out views; mutates no trainer state."""
        saved = self.last_embeddings
        self.model.eval()
        if self.key_model is not None:
            self.key_model.eval()
        loss = self._loss(views_a, views_b)
        self.last_embeddings = saved  # collapse tracking follows train batches only
        return float(loss.value)


def _views_batch(
    samples: Sequence[ImageSample], size: int, seed: int, epoch: int
) -> tuple[torch.Tensor, torch.Tensor]:
    pairs = [two_views(s, size, seed, epoch) for s in samples]
    return stack_images([p.view_a for p in pairs]), stack_images([p.view_b for p in pairs])


def _resolve_samples(
    ids: Sequence[str], samples: Mapping[str, ImageSample], corpus: str
) -> list[ImageSample]:
    missing = [i for i in ids if i not in samples]
    if missing:
        raise ConfigurationError(f"corpus {corpus!r}: unresolved ids, e.g. {missing[:3]}")
    return [samples[i] for i in ids]


def run_pretraining(
    config: PretrainConfig,
    corpus: PretrainCorpus,
    samples: Mapping[str, ImageSample],
    out_dir: Path | str | None = None,
) -> tuple[Checkpoint, TrainTrace]:
    """Run the full self-supervised stage on one corpus.

    Deterministic given the seed.  The returned checkpoint holds the weights
    with the best validation loss (or the initial weights when ``epochs=0``),
    and the trace has one record per completed epoch.
    """
    if config.image_size != corpus.image_size:
        raise ConfigurationError(
            f"config image size {config.image_size} != corpus image size {corpus.image_size}"
        )
    batch_size = config.resolved_batch_size()
    train = _resolve_samples(corpus.train_ids, samples, corpus.name)
    val = _resolve_samples(corpus.val_ids, samples, corpus.name)
    if config.epochs > 0:
        if len(train) < batch_size:
            raise ConfigurationError(
                f"corpus {corpus.name!r} has {len(train)} train images, need >= batch {batch_size}"
            )
        if len(val) < 2:
            raise ConfigurationError(f"corpus {corpus.name!r} needs >= 2 validation images")

    queue_size = (
        config.resolved_queue_size(len(train)) if config.method is Method.MOCO else None
    )
    trainer = SSLTrainer(config, queue_size=queue_size)
    corpus_name = config.corpus_name or corpus.name

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        _echo_config(config, queue_size, out_path / "config.txt")
        _echo_corpus(corpus, out_path / "corpus.txt")

    best_val = math.inf
    best_segments = snapshot_segments(trainer.model)
    best_meta = TrainMeta(epochs=0, final_loss=None, seed=config.seed, extra=_run_metadata(config))
    trace = TrainTrace()
    collapse_streak = 0

    if config.method is Method.MOCO and config.epochs > 0:
        warm_order = np.random.default_rng(np.random.SeedSequence([config.seed, 0])).permutation(
            len(train)
        )
        trainer.warm_up_queue(
            _views_batch(
                [train[i] for i in warm_order[begin : begin + batch_size]],
                config.image_size,
                config.seed,
                VAL_EPOCH_TAG,
            )[1]
            for begin in range(0, len(train) - batch_size + 1, batch_size)
        )

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch])).permutation(
            len(train)
        )
        epoch_losses = []
        for begin in range(0, len(train) - batch_size + 1, batch_size):
            batch = [train[i] for i in order[begin : begin + batch_size]]
            views_a, views_b = _views_batch(batch, config.image_size, config.seed, epoch)
            loss = trainer.step(views_a, views_b)
            epoch_losses.append(loss.item())
        collapse = collapse_metric(trainer.last_embeddings)
        val_a, val_b = _views_batch(val, config.image_size, config.seed, VAL_EPOCH_TAG)
        val_loss = trainer.evaluate(val_a, val_b)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            val_loss=val_loss,
            collapse_metric=collapse,
            wall_time=time.perf_counter() - start,
        )
        trace.records.append(record)

        collapse_streak = collapse_streak + 1 if collapse < COLLAPSE_THRESHOLD else 0
        if collapse_streak == COLLAPSE_PATIENCE:
            warnings.warn(
                f"embedding collapse suspected: metric < {COLLAPSE_THRESHOLD} for "
                f"{COLLAPSE_PATIENCE} consecutive epochs (epoch {epoch})",
                RuntimeWarning,
                stacklevel=2,
            )

        if val_loss < best_val:
            best_val = val_loss
            best_segments = snapshot_segments(trainer.model)
            best_meta = TrainMeta(
                epochs=epoch,
                final_loss=record.train_loss,
                seed=config.seed,
                extra=_run_metadata(config),
            )
            if out_path is not None:
                checkpoint = Checkpoint(
                    method=config.method,
                    corpus_name=corpus_name,
                    spec=trainer.model.spec,
                    segments=best_segments,
                    train_meta=best_meta,
                )
                save_checkpoint(checkpoint, out_path / "best.ckpt")
        if out_path is not None:
            (out_path / "metrics.tsv").write_text(trace.to_lines(), encoding="utf-8")

    checkpoint = Checkpoint(
        method=config.method,
        corpus_name=corpus_name,
        spec=trainer.model.spec,
        segments=best_segments,
        train_meta=best_meta,
    )
    if out_path is not None:
        save_checkpoint(checkpoint, out_path / "best.ckpt")
        (out_path / "metrics.tsv").write_text(trace.to_lines(), encoding="utf-8")
    return checkpoint, trace


def _run_metadata(config: PretrainConfig) -> dict:
    return {
        "init_scheme": "fan_in_uniform",
        "batch_norm_shuffling": "none",
        "augmentation": "mocov2_defaults",
    }


def _echo_config(config: PretrainConfig, queue_size: int | None, path: Path) -> None:
    lines = [
        f"method = {config.method.value}",
        f"arch = {config.arch.value}",
        f"image_size = {config.image_size}",
        f"batch_size = {config.resolved_batch_size()}",
        f"epochs = {config.epochs}",
        f"lr = {config.lr}",
        f"weight_decay = {config.weight_decay}",
        f"tau = {config.resolved_tau()}",
        f"momentum = {config.momentum}",
        f"queue_size = {queue_size}",
        f"seed = {config.seed}",
        f"base_width = {config.base_width}",
        f"depth = {config.depth}",
        f"embedding_dim = {config.embedding_dim}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _echo_corpus(corpus: PretrainCorpus, path: Path) -> None:
    lines = [f"name = {corpus.name}", f"image_size = {corpus.image_size}"]
    lines.append("[train_ids]")
    lines.extend(corpus.train_ids)
    lines.append("[val_ids]")
    lines.extend(corpus.val_ids)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
