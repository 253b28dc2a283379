"""Aggregation of run results into mean/std tables, per-corpus mean tables,
and qualitative mask panels."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .data import CANONICAL_FRACTIONS, ImageSample, resize
from .errors import ValidationError
from .finetune import RunResult
from .models import SegmentationNetwork, stack_images

SSL_METHOD_ORDER = ("moco", "simclr", "simsiam")
SUPERVISED = "supervised"


@dataclass(frozen=True)
class TableCell:
    mean: float
    std: float
    n: int


@dataclass
class ResultsTable:
    """(method, corpus) rows by label-fraction columns of Dice aggregates."""

    fractions: tuple[float, ...]
    cells: dict[tuple[str, str], dict[float, TableCell]] = field(default_factory=dict)

    def row_keys(self) -> list[tuple[str, str]]:
        """Deterministic row order: the supervised baseline first, then SSL
        methods grouped by corpus."""

        def method_rank(method: str) -> tuple:
            if method in SSL_METHOD_ORDER:
                return (0, SSL_METHOD_ORDER.index(method))
            return (1, method)

        supervised = sorted(k for k in self.cells if k[0] == SUPERVISED)
        others = sorted(
            (k for k in self.cells if k[0] != SUPERVISED),
            key=lambda k: (k[1], method_rank(k[0])),
        )
        return supervised + others

    def corpora(self) -> list[str]:
        return sorted({corpus for method, corpus in self.cells if method != SUPERVISED})


@dataclass
class MeanTable:
    """Per-corpus unweighted mean over the three SSL methods' mean Dice."""

    fractions: tuple[float, ...]
    cells: dict[str, dict[float, float]] = field(default_factory=dict)


def _sample_std(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def aggregate(results: Iterable[RunResult], fractions: Sequence[float] = CANONICAL_FRACTIONS) -> ResultsTable:
    """Group runs by (method, corpus) and reduce each fraction to mean/std/n.

    Permutation-invariant in the input order; groups with no runs simply have
    no cell (absent, never zero).
    """
    grouped: dict[tuple[str, str], dict[float, list[float]]] = {}
    for result in results:
        row = grouped.setdefault((result.method, result.corpus), {})
        row.setdefault(result.fraction, []).append(result.test_dice)
    table = ResultsTable(fractions=tuple(fractions))
    for key, row in grouped.items():
        table.cells[key] = {
            # sorted values fix the reduction order, making the cell exactly
            # permutation-invariant in the input run list
            fraction: TableCell(
                mean=float(np.mean(sorted(values))), std=_sample_std(sorted(values)), n=len(values)
            )
            for fraction, values in row.items()
        }
    return table


def dataset_mean_table(table: ResultsTable) -> MeanTable:
    """Unweighted mean of the three SSL methods' means per corpus and fraction,
    rounded to three decimals."""
    mean_table = MeanTable(fractions=table.fractions)
    for corpus in table.corpora():
        missing = [m for m in SSL_METHOD_ORDER if (m, corpus) not in table.cells]
        if missing:
            raise ValidationError(f"corpus {corpus!r} is missing methods: {', '.join(missing)}")
        row: dict[float, float] = {}
        for fraction in table.fractions:
            cells = [table.cells[(m, corpus)].get(fraction) for m in SSL_METHOD_ORDER]
            if any(cell is None for cell in cells):
                continue  # absent in the source table stays absent here
            row[fraction] = round(sum(cell.mean for cell in cells) / len(cells), 3)
        mean_table.cells[corpus] = row
    return mean_table


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _fraction_header(fraction: float) -> str:
    return f"DC ({fraction:.0%})"


def render_results_table(table: ResultsTable) -> str:
    headers = ["method", "corpus"] + [_fraction_header(f) for f in table.fractions]
    rows = []
    for method, corpus in table.row_keys():
        row = [method, corpus]
        for fraction in table.fractions:
            cell = table.cells[(method, corpus)].get(fraction)
            row.append("-" if cell is None else f"{cell.mean:.3f}±{cell.std:.3f} (n={cell.n})")
        rows.append(row)
    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows)
    lines.append("std: sample standard deviation (n-1)")
    return "\n".join(lines) + "\n"


def results_table_csv(table: ResultsTable) -> str:
    lines = ["method,corpus," + ",".join(f"mean_{f},std_{f},n_{f}" for f in table.fractions)]
    for method, corpus in table.row_keys():
        parts = [method, corpus]
        for fraction in table.fractions:
            cell = table.cells[(method, corpus)].get(fraction)
            if cell is None:
                parts.extend(["", "", ""])
            else:
                parts.extend([f"{cell.mean:.3f}", f"{cell.std:.3f}", str(cell.n)])
        lines.append(",".join(parts))
    return "\n".join(lines) + "\n"


def render_mean_table(table: MeanTable) -> str:
    headers = ["corpus"] + [f"Mean {_fraction_header(f)}" for f in table.fractions]
    rows = []
    for corpus in sorted(table.cells):
        row = [corpus]
        for fraction in table.fractions:
            value = table.cells[corpus].get(fraction)
            row.append("-" if value is None else f"{value:.3f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows)
    return "\n".join(lines) + "\n"


def mean_table_csv(table: MeanTable) -> str:
    lines = ["corpus," + ",".join(str(f) for f in table.fractions)]
    for corpus in sorted(table.cells):
        values = [
            "" if table.cells[corpus].get(f) is None else f"{table.cells[corpus][f]:.3f}"
            for f in table.fractions
        ]
        lines.append(",".join([corpus] + values))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Qualitative mask panels
# ---------------------------------------------------------------------------

def lesion_class(sample_id: str) -> str | None:
    """Benign/malignant tag when the id carries it, as the clinical ids do."""
    lowered = sample_id.lower()
    if "benign" in lowered:
        return "benign"
    if "malignant" in lowered:
        return "malignant"
    return None


def _to_tile(array: np.ndarray) -> np.ndarray:
    if array.ndim == 2:
        array = np.repeat(array[:, :, None], 3, axis=2)
    return (np.clip(array, 0.0, 1.0) * 255).astype(np.uint8)


def _panel(pixels: np.ndarray, gt: np.ndarray, pred: np.ndarray, gap: int = 2) -> np.ndarray:
    tiles = [_to_tile(pixels), _to_tile(gt.astype(np.float32)), _to_tile(pred.astype(np.float32))]
    height = tiles[0].shape[0]
    spacer = np.full((height, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, tile in enumerate(tiles):
        if i:
            parts.append(spacer)
        parts.append(tile)
    return np.concatenate(parts, axis=1)


def export_mask_panels(
    model: SegmentationNetwork,
    samples: Sequence[ImageSample],
    out_dir: Path | str,
    image_size: int | None = None,
) -> list[Path]:
    """Write one (input | ground truth | prediction) panel per masked sample.

    Samples without a mask are skipped with a warning.  When lesion classes
    are known, a combined ``panel_grid.png`` places benign examples in the
    first column and malignant ones in the second.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = image_size if image_size is not None else model.spec.input_size

    written: list[Path] = []
    by_class: dict[str, list[np.ndarray]] = {"benign": [], "malignant": []}
    for sample in samples:
        if sample.mask is None:
            warnings.warn(f"sample {sample.id!r} has no mask; skipped", RuntimeWarning, stacklevel=2)
            continue
        prepared = resize(sample, size)
        batch = stack_images([prepared.pixels])
        pred = model.predict_mask(batch)[0].numpy()
        if not np.isfinite(pred).all():
            raise ValidationError(f"sample {sample.id!r}: prediction contains non-finite values")
        panel = _panel(prepared.pixels, prepared.mask, pred)
        cls = lesion_class(sample.id)
        stem = f"{cls}_{sample.id}" if cls else sample.id
        path = out / f"{stem}.png"
        Image.fromarray(panel).save(path)
        written.append(path)
        if cls:
            by_class[cls].append(panel)

    if by_class["benign"] and by_class["malignant"]:
        written.append(_write_grid(by_class, out / "panel_grid.png"))
    return written


def _write_grid(by_class: dict[str, list[np.ndarray]], path: Path) -> Path:
    columns = [by_class["benign"], by_class["malignant"]]
    rows = max(len(c) for c in columns)
    panel_h, panel_w = columns[0][0].shape[:2]
    gap = 4
    grid = np.full((rows * (panel_h + gap) - gap, 2 * (panel_w + gap) - gap, 3), 255, np.uint8)
    for col, panels in enumerate(columns):
        for row, panel in enumerate(panels):
            y = row * (panel_h + gap)
            x = col * (panel_w + gap)
            grid[y : y + panel.shape[0], x : x + panel.shape[1]] = panel
    Image.fromarray(grid).save(path)
    return path
