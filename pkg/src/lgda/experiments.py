"""Ablation runs (baseline / +L / +LG, the three division strategies) and
the end-to-end synthetic benchmark built on top of them."""
from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SHIFT_PRESETS, ImageSample, SynthConfig, SynthShift, generate_synthetic
from .local_denoise import PseudoLabelCache, build_pseudolabel_cache
from .sample_division import STRATEGIES, STRATEGY_LABELS
from .segmodel import pretrained_reference_backbone
from .trainer import MetricsTable, TrainConfig, adapt, evaluate, pretrain_source, predict_probs

logger = logging.getLogger(__name__)

VARIANTS = ("Baseline", "Baseline+L", "Baseline+LG")


@dataclass
class AblationResult:
    tables: dict[str, MetricsTable]
    strategy_tables: dict[str, MetricsTable] = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)

    def avg_dice(self) -> dict[str, float]:
        """Seed-level score per variant, in Dice points (percent)."""
        return {name: t.row()["avg-Dice"][0] for name, t in self.tables.items()}


def run_ablation(source_model, target_train: Sequence[ImageSample], target_test: Sequence[ImageSample],
                 cache, config: TrainConfig, strategies: bool = True,
                 run_dir: str | os.PathLike | None = None, threshold: float = 0.5) -> AblationResult:
    """Evaluate every variant on ``target_test``; all variants share ``config.seed``.

    ``Baseline+L`` self-trains on the binarised local labels alone (the
    prototype mask forced to pass everything). The strategy table repeats
    the full variant once per division strategy.
    """
    if not isinstance(cache, PseudoLabelCache):
        cache = PseudoLabelCache(cache)
    run_dir = Path(run_dir) if run_dir is not None else None
    sub = (lambda name: run_dir / name) if run_dir is not None else (lambda name: None)

    res = AblationResult(tables={"Baseline": evaluate(source_model, target_test, threshold)})
    res.models["Baseline"] = source_model
    plan = [("Baseline+L", dataclasses.replace(config, global_correction=False)),
            ("Baseline+LG", dataclasses.replace(config, global_correction=True))]
    for name, cfg in plan:
        t0 = time.perf_counter()
        model, hist = adapt(source_model, target_train, cache, cfg, run_dir=sub(name))
        res.tables[name] = evaluate(model, target_test, threshold)
        res.models[name], res.histories[name] = model, hist
        logger.info("%s: avg-Dice %.2f (%.0fs)", name, res.tables[name].row()["avg-Dice"][0],
                    time.perf_counter() - t0)

    if strategies:
        for strategy in STRATEGIES:
            label = STRATEGY_LABELS[strategy]
            division = dataclasses.replace(config.division, strategy=strategy)
            if division == config.division:
                res.strategy_tables[label] = res.tables["Baseline+LG"]
                continue
            cfg = dataclasses.replace(config, global_correction=True, division=division)
            model, _ = adapt(source_model, target_train, cache, cfg, run_dir=sub(f"strategy_{strategy}"))
            res.strategy_tables[label] = evaluate(model, target_test, threshold)
        # TopK, AVG, H>eta row order
        res.strategy_tables = {STRATEGY_LABELS[s]: res.strategy_tables[STRATEGY_LABELS[s]]
                               for s in ("topk_fraction", "below_mean", "threshold")}
    return res


def split_target(target: Sequence[ImageSample], n_train: int):
    """First ``n_train`` targets adapt (masks dropped), the rest are held out."""
    train = [s.without_mask() for s in target[:n_train]]
    return train, list(target[n_train:])


@dataclass
class BenchmarkRun:
    seed: int
    avg_dice: dict[str, float]
    seconds: float


def benchmark_seed(seed: int, workdir: str | os.PathLike, shift: SynthShift | str = "strong",
                   image_size: int = 128, n_source: int = 80, n_target_train: int = 60,
                   n_target_test: int = 40, config: TrainConfig | None = None) -> BenchmarkRun:
    """Synthesize, pretrain, cache and ablate for one seed."""
    t0 = time.perf_counter()
    if isinstance(shift, str):
        shift = SHIFT_PRESETS[shift]
    config = config or TrainConfig()
    config = dataclasses.replace(config, seed=seed)
    source, target = generate_synthetic(SynthConfig(image_size, n_source, n_target_train + n_target_test,
                                                    shift, seed=seed))
    train, test = split_target(target, n_target_train)

    model = pretrained_reference_backbone(seed=seed)
    model, _ = pretrain_source(model, source, config)
    cache_dir = Path(workdir) / f"cache_seed{seed}"
    build_pseudolabel_cache(model, train, config.num_passes, config.local, cache_dir, seed=seed)
    res = run_ablation(model, train, test, cache_dir, config, strategies=False)
    return BenchmarkRun(seed, res.avg_dice(), time.perf_counter() - t0)


def ordering_holds(mean_b: float, mean_l: float, mean_lg: float, slack_l: float = 0.5,
                   slack_lg: float = 1.0) -> bool:
    """``B <= L + slack_l <= LG + slack_lg`` on seed-averaged scores."""
    return mean_b <= mean_l + slack_l <= mean_lg + slack_lg


def summarize(runs: Sequence[BenchmarkRun]) -> dict[str, float]:
    return {v: float(np.mean([r.avg_dice[v] for r in runs])) for v in VARIANTS}


def predictions_for(model, samples: Sequence[ImageSample], threshold: float = 0.5) -> np.ndarray:
    return (predict_probs(model, samples) >= threshold).astype(np.uint8)
