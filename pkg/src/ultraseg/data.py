"""Dataset ingestion, partitioning, corpus mixing, and label-fraction subsets.

Images enter through explicit tab-separated manifests so that every split is
auditable and portable.  All partitioning is seeded and deterministic: the
same inputs and seed always produce the same ordered id lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, IngestionError, ValidationError


class Source(str, Enum):
    BUS = "bus"
    CAMUS = "camus"
    LUS = "lus"
    CIFAR10 = "cifar10"
    MINI_IMAGENET = "mini_imagenet"
    SYNTHETIC = "synthetic"


# Published partition sizes for the breast ultrasound corpus and the two
# auxiliary ultrasound corpora.  The CAMUS/LUS internal train/val division is
# the unique round-hundreds assignment consistent with the combined 2553/299
# pre-training totals.
BUS_COUNTS = (546, 78, 156)
CAMUS_COUNTS = (1800, 200)
LUS_COUNTS = (207, 21)
CIFAR10_SPLIT = (50000, 10000)
MINI_IMAGENET_SPLIT = (48000, 12000)

CANONICAL_FRACTIONS = (1.0, 0.5, 0.25, 0.1)

MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One image, optionally with a binary lesion mask."""

    id: str
    source: Source
    pixels: np.ndarray  # [H, W, C] float32 in [0, 1]
    mask: np.ndarray | None = None  # [H, W] uint8 in {0, 1}

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3:
            raise ValidationError(f"sample {self.id!r}: pixels must be [H, W, C], got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValidationError(f"sample {self.id!r}: pixels contain non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError(f"sample {self.id!r}: pixels outside [0, 1]")
        if self.mask is not None:
            m = self.mask
            if m.shape != px.shape[:2]:
                raise ValidationError(
                    f"sample {self.id!r}: mask shape {m.shape} != pixel shape {px.shape[:2]}"
                )
            values = np.unique(m)
            if not np.isin(values, (0, 1)).all():
                raise ValidationError(f"sample {self.id!r}: mask values outside {{0, 1}}")


@dataclass(frozen=True)
class SplitSpec:
    """Seeded assignment of sample ids to train/val/test and label fractions."""

    name: str
    seed: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    fraction_subsets: Mapping[float, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        train, val, test = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if train & val or train & test or val & test:
            raise ValidationError(f"split {self.name!r}: train/val/test are not pairwise disjoint")
        previous: set[str] | None = None
        for fraction in sorted(self.fraction_subsets):
            subset = set(self.fraction_subsets[fraction])
            if not subset <= train:
                raise ValidationError(f"split {self.name!r}: fraction {fraction} subset escapes train ids")
            if previous is not None and not previous <= subset:
                raise ValidationError(f"split {self.name!r}: fraction subsets are not nested")
            previous = subset


@dataclass(frozen=True)
class PretrainCorpus:
    """Named id pool for the self-supervised stage, possibly spanning sources."""

    name: str
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    image_size: int = 32

    def __post_init__(self):
        if set(self.train_ids) & set(self.val_ids):
            raise ValidationError(f"corpus {self.name!r}: train and val overlap")


def _ids_of(samples: Sequence) -> list[str]:
    """Accept either ImageSample sequences or bare id sequences."""
    return [s if isinstance(s, str) else s.id for s in samples]


def _check_unique(ids: Sequence[str], context: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise ValidationError(f"{context}: duplicate id {i!r}")
        seen.add(i)


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------

def _decode_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.float32) / 255.0
            arr = np.repeat(arr[:, :, None], 3, axis=2)  # one backbone contract for all corpora
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def _decode_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 0).astype(np.uint8)  # nonzero pixels mark the lesion


def load_manifest(root_path: Path | str, source: Source) -> list[ImageSample]:
    """Load every sample listed in ``root_path/manifest.tsv``.

    Each record is ``id<TAB>image_relpath<TAB>mask_relpath`` with ``-`` for a
    missing mask.  Samples come back ordered by id regardless of manifest
    order, so parallel callers see a stable sequence.
    """
    root = Path(root_path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise IngestionError(f"no {MANIFEST_NAME} under {root}")

    records: list[tuple[str, str, str]] = []
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise IngestionError(f"{manifest}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        records.append((parts[0], parts[1], parts[2]))

    _check_unique([r[0] for r in records], f"manifest {manifest}")

    samples = []
    for sample_id, image_rel, mask_rel in sorted(records):
        image_path = root / image_rel
        if not image_path.is_file():
            raise IngestionError(f"sample {sample_id!r}: missing image file {image_rel}")
        pixels = _decode_image(image_path)
        mask = None
        if mask_rel != "-":
            mask_path = root / mask_rel
            if not mask_path.is_file():
                raise IngestionError(f"sample {sample_id!r}: missing mask file {mask_rel}")
            mask = _decode_mask(mask_path)
        samples.append(ImageSample(id=sample_id, source=source, pixels=pixels, mask=mask))
    return samples


def write_manifest(root_path: Path | str, entries: Sequence[tuple[str, str, str | None]]) -> Path:
    """Write ``manifest.tsv`` for (id, image_relpath, mask_relpath|None) entries."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"{i}\t{img}\t{mask if mask is not None else '-'}" for i, img, mask in entries]
    path = root / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Splits and subsets
# ---------------------------------------------------------------------------

def _seeded_permutation(ids: Sequence[str], seed: int) -> list[str]:
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order]


def subset_labels(split: SplitSpec, fraction: float, seed: int) -> list[str]:
    """Seeded, nested subset of the train ids with ``floor(fraction * n)`` elements.

    Subsets drawn with the same seed nest across fractions: the 10% subset is
    contained in the 25% subset, and so on up to the full train list.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(split.train_ids)
    permuted = _seeded_permutation(list(split.train_ids), seed)
    size = math.floor(fraction * len(split.train_ids))
    return permuted[:size]


def make_bus_split(
    samples: Sequence,
    seed: int,
    counts: tuple[int, int, int] = BUS_COUNTS,
    name: str = "bus",
    fractions: Sequence[float] = CANONICAL_FRACTIONS,
) -> SplitSpec:
    """Seeded train/val/test partition of the fine-tuning corpus.

    ``counts`` defaults to the published 546/78/156 breast ultrasound
    partition; override it for corpora of other sizes.
    """
    ids = _ids_of(samples)
    _check_unique(ids, f"split {name!r}")
    n_train, n_val, n_test = counts
    expected = n_train + n_val + n_test
    if len(ids) != expected:
        raise ConfigurationError(
            f"split {name!r}: expected {expected} samples for counts {counts}, got {len(ids)}"
        )
    permuted = _seeded_permutation(sorted(ids), seed)
    train = tuple(permuted[:n_train])
    val = tuple(permuted[n_train : n_train + n_val])
    test = tuple(permuted[n_train + n_val :])
    split = SplitSpec(name=name, seed=seed, train_ids=train, val_ids=val, test_ids=test)
    subsets = {f: tuple(subset_labels(split, f, seed)) for f in fractions}
    return SplitSpec(
        name=name, seed=seed, train_ids=train, val_ids=val, test_ids=test, fraction_subsets=subsets
    )


def _split_source(
    samples: Sequence, counts: tuple[int, int], seed: int, label: str
) -> tuple[list[str], list[str]]:
    ids = _ids_of(samples)
    n_train, n_val = counts
    if len(ids) != n_train + n_val:
        raise ConfigurationError(
            f"{label}: expected {n_train + n_val} samples for counts {counts}, got {len(ids)}"
        )
    permuted = _seeded_permutation(sorted(ids), seed)
    return permuted[:n_train], permuted[n_train:]


def make_multiorgan_corpus(
    bus_split: SplitSpec,
    camus: Sequence,
    lus: Sequence,
    seed: int,
    camus_counts: tuple[int, int] = CAMUS_COUNTS,
    lus_counts: tuple[int, int] = LUS_COUNTS,
    image_size: int = 32,
    name: str = "multi-organ",
) -> PretrainCorpus:
    """Pool breast, cardiac, and lung ultrasound ids into one pre-training corpus.

    With the published sizes this yields 546 + 1800 + 207 = 2553 training and
    78 + 200 + 21 = 299 validation ids, and the breast train partition is a
    subset of the corpus train partition.
    """
    camus_train, camus_val = _split_source(camus, camus_counts, seed, "camus")
    lus_train, lus_val = _split_source(lus, lus_counts, seed + 1, "lus")
    train = tuple(bus_split.train_ids) + tuple(camus_train) + tuple(lus_train)
    val = tuple(bus_split.val_ids) + tuple(camus_val) + tuple(lus_val)
    _check_unique(train + val, f"corpus {name!r}")
    return PretrainCorpus(name=name, train_ids=train, val_ids=val, image_size=image_size)


def mix_with_natural(
    bus_split: SplitSpec,
    natural: Sequence,
    natural_split: tuple[int, int],
    image_size: int = 32,
    name: str = "bus+natural",
) -> PretrainCorpus:
    """Union of the breast ultrasound partitions with a natural-image corpus.

    The natural corpus keeps its manifest order: the first ``natural_split[0]``
    ids join the train pool and the next ``natural_split[1]`` the val pool, so
    canonical dataset splits can be reproduced by listing them in order.
    """
    ids = _ids_of(natural)
    n_train, n_val = natural_split
    if len(ids) != n_train + n_val:
        raise ConfigurationError(
            f"corpus {name!r}: natural corpus has {len(ids)} ids, expected {n_train + n_val}"
        )
    train = tuple(bus_split.train_ids) + tuple(ids[:n_train])
    val = tuple(bus_split.val_ids) + tuple(ids[n_train:])
    _check_unique(train + val, f"corpus {name!r}")
    return PretrainCorpus(name=name, train_ids=train, val_ids=val, image_size=image_size)


def bus_only_corpus(bus_split: SplitSpec, image_size: int = 32, name: str = "bus") -> PretrainCorpus:
    """Pre-training corpus drawn from the breast ultrasound partitions alone."""
    return PretrainCorpus(
        name=name,
        train_ids=tuple(bus_split.train_ids),
        val_ids=tuple(bus_split.val_ids),
        image_size=image_size,
    )


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------

def resize_pixels(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an [H, W, C] array to size x size, clamped to [0, 1]."""
    if size <= 0:
        raise ValidationError(f"size must be positive, got {size}")
    if pixels.shape[0] == size and pixels.shape[1] == size:
        return pixels.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
    t = t.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).clamp_(0.0, 1.0).numpy()


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a binary [H, W] mask, re-binarized at 0.5."""
    if size <= 0:
        raise ValidationError(f"size must be positive, got {size}")
    if mask.shape[0] == size and mask.shape[1] == size:
        return mask.astype(np.uint8, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))
    t = t.unsqueeze(0).unsqueeze(0)
    out = F.interpolate(t, size=(size, size), mode="nearest")
    return (out.squeeze(0).squeeze(0).numpy() >= 0.5).astype(np.uint8)


def resize(sample: ImageSample, size: int) -> ImageSample:
    """Resize a sample's pixels (bilinear) and mask (nearest-neighbour)."""
    pixels = resize_pixels(sample.pixels, size)
    mask = resize_mask(sample.mask, size) if sample.mask is not None else None
    return ImageSample(id=sample.id, source=sample.source, pixels=pixels, mask=mask)


# ---------------------------------------------------------------------------
# Split export / import (audit trail)
# ---------------------------------------------------------------------------

def write_split(split: SplitSpec, path: Path | str) -> Path:
    """Serialize a split as a flat key/value + list text document."""
    lines = [f"name = {split.name}", f"seed = {split.seed}"]
    sections: list[tuple[str, Sequence[str]]] = [
        ("train_ids", split.train_ids),
        ("val_ids", split.val_ids),
        ("test_ids", split.test_ids),
    ]
    for fraction in sorted(split.fraction_subsets, reverse=True):
        sections.append((f"fraction {fraction}", split.fraction_subsets[fraction]))
    for header, ids in sections:
        lines.append(f"[{header}]")
        lines.extend(ids)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_split(path: Path | str) -> SplitSpec:
    """Parse a split document written by :func:`write_split`."""
    meta: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], [])
        elif current is None:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
        else:
            current.append(line)
    subsets = {
        float(header.split()[1]): tuple(ids)
        for header, ids in sections.items()
        if header.startswith("fraction ")
    }
    return SplitSpec(
        name=meta["name"],
        seed=int(meta["seed"]),
        train_ids=tuple(sections.get("train_ids", ())),
        val_ids=tuple(sections.get("val_ids", ())),
        test_ids=tuple(sections.get("test_ids", ())),
        fraction_subsets=subsets,
    )
