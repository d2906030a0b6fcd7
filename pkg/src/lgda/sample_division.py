"""Entropy scoring of target images and easy/hard division."""
from __future__ import annotations

import csv
import json
import math
import os
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ImageSample

STRATEGIES = ("threshold", "topk_fraction", "below_mean")
# row labels used in strategy comparison tables
STRATEGY_LABELS = {"topk_fraction": "TopK", "below_mean": "AVG", "threshold": "H>η"}


@dataclass(frozen=True)
class EntropyRecord:
    image_id: str
    entropy: float

    def __post_init__(self):
        if not self.entropy >= 0:
            raise ValueError(f"entropy must be non-negative, got {self.entropy}")


@dataclass(frozen=True)
class DivisionConfig:
    strategy: str = "threshold"
    eta: float = 0.044
    fraction: float = 0.3
    log_base: float = 10.0
    entropy: str = "elementwise"  # or "binary"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown division strategy {self.strategy!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if not self.log_base > 1:
            raise ValueError("log_base must be > 1")
        if self.entropy not in ("elementwise", "binary"):
            raise ValueError(f"unknown entropy kind {self.entropy!r}")

    def params(self) -> dict:
        if self.strategy == "threshold":
            return {"eta": self.eta}
        if self.strategy == "topk_fraction":
            return {"fraction": self.fraction}
        return {}


@dataclass
class DivisionResult:
    easy_ids: list[str]
    hard_ids: list[str]
    records: list[EntropyRecord] = field(default_factory=list)
    strategy: str = "threshold"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self._easy = set(self.easy_ids)

    def is_easy(self, image_id: str) -> bool:
        return image_id in self._easy

    @property
    def easy_count(self) -> int:
        return len(self.easy_ids)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "params": self.params,
            "records": [{"id": r.image_id, "entropy": r.entropy} for r in self.records],
            "easy_ids": list(self.easy_ids),
            "hard_ids": list(self.hard_ids),
        }


def _xlogx(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def image_entropy(probs: np.ndarray, log_base: float = 10.0, kind: str = "elementwise") -> float:
    """Mean per-element entropy of a probability map.

    ``elementwise`` averages ``-p log_b p`` over every pixel and channel;
    ``binary`` averages the full Bernoulli entropy
    ``-(p log_b p + (1 - p) log_b (1 - p))``. ``0 log 0`` is taken as 0.
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), 0.0, 1.0)
    h = -_xlogx(p)
    if kind == "binary":
        h = h - _xlogx(1.0 - p)
    elif kind != "elementwise":
        raise ValueError(f"unknown entropy kind {kind!r}")
    return float(max(h.mean() / math.log(log_base), 0.0))


def rank_by_entropy(records: Sequence[EntropyRecord]) -> list[EntropyRecord]:
    return sorted(records, key=lambda r: (r.entropy, r.image_id))


def divide(records: Sequence[EntropyRecord], config: DivisionConfig = DivisionConfig()) -> DivisionResult:
    """Split images into easy and hard sets.

    threshold: easy iff entropy <= eta. below_mean: easy iff entropy is
    strictly below the mean. topk_fraction: the ``max(1, floor(fraction * n))``
    lowest-entropy images.
    """
    if not records:
        raise ValueError("cannot divide an empty record list")
    ranked = rank_by_entropy(records)
    if config.strategy == "threshold":
        easy = [r.image_id for r in ranked if r.entropy <= config.eta]
    elif config.strategy == "below_mean":
        # exact rational comparison: e < sum/n without rounding the mean
        total = sum(Fraction(r.entropy) for r in records)
        easy = [r.image_id for r in ranked if Fraction(r.entropy) * len(records) < total]
    else:
        n_easy = max(1, math.floor(config.fraction * len(ranked)))
        easy = [r.image_id for r in ranked[:n_easy]]
    easy_set = set(easy)
    hard = [r.image_id for r in ranked if r.image_id not in easy_set]
    return DivisionResult(easy, hard, list(ranked), config.strategy, config.params())


def score_images(ids: Sequence[str], probs: Sequence[np.ndarray], config: DivisionConfig = DivisionConfig()):
    return [EntropyRecord(i, image_entropy(p, config.log_base, config.entropy)) for i, p in zip(ids, probs)]


def luminance(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def grayscale_distribution(samples: Sequence[ImageSample], bins: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Pooled luma histogram over [0, 1], normalised to sum 1.

    Returns ``(bin_centers, mass)``.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if not samples:
        raise ValueError("empty sample list")
    counts = np.zeros(bins, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    for s in samples:
        img = s.image if isinstance(s, ImageSample) else np.asarray(s)
        counts += np.histogram(np.clip(luminance(img.astype(np.float64)), 0, 1), bins=edges)[0]
    centers = (edges[:-1] + edges[1:]) / 2
    return centers, counts / counts.sum()


def write_division_report(result: DivisionResult, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.to_dict(), indent=2))
    return path


def write_histogram_csv(path: str | os.PathLike, centers, source, easy, hard) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "source", "easy", "hard"])
        for row in zip(centers, source, easy, hard):
            w.writerow([f"{v:.6g}" for v in row])
    return path
