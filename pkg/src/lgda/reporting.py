"""Comparison tables (CSV + aligned text) and error-map images."""
from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .trainer import COLUMNS, MetricsTable

BLUE = (0, 0, 255, 255)  # truth not predicted
RED = (255, 0, 0, 255)  # predicted outside truth


def _fmt(mean, std) -> str:
    if mean is None or not np.isfinite(mean):
        return "n/a"
    if std is None:
        return f"{mean:.2f}"
    if not np.isfinite(std):
        return f"{mean:.2f} ± n/a"
    return f"{mean:.2f} ± {std:.2f}"


def write_table(rows: Sequence[tuple[str, MetricsTable]], stem: str | os.PathLike, label: str = "method") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.txt``; Dice in percent, ASD in pixels."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = stem.with_suffix(".csv"), stem.with_suffix(".txt")

    header = [label]
    for col in COLUMNS:
        header.append(col)
        if not col.startswith("avg"):
            header.append(f"{col}_std")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for name, table in rows:
            row = table.row()
            line = [name]
            for col in COLUMNS:
                mean, std = row[col]
                line.append(f"{mean:.4f}")
                if not col.startswith("avg"):
                    line.append(f"{std:.4f}")
            w.writerow(line)

    cells = [[label, *COLUMNS]]
    for name, table in rows:
        row = table.row()
        cells.append([name, *(_fmt(*row[c]) for c in COLUMNS)])
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path


def error_map_rgba(pred, truth) -> np.ndarray:
    pred, truth = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    out = np.zeros(pred.shape + (4,), dtype=np.uint8)
    out[truth & ~pred] = BLUE
    out[pred & ~truth] = RED
    return out


def render_error_map(pred, truth, out: str | os.PathLike) -> Path:
    """PNG with blue under-segmentation, red over-segmentation, transparent elsewhere."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(error_map_rgba(pred, truth), mode="RGBA").save(out)
    return out
