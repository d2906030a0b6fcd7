"""``lgda`` command line: synth, pretrain, pseudolabel, adapt, eval, ablate, histogram.

Every command resolves defaults < ``--config`` file < ``--section.key=value``
flags, writes the frozen result as ``config.<command>.toml`` into the run
directory, and exits nonzero on any error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, default_run_dir, parse_overrides
from .dataset import DatasetError, generate_synthetic, load_dataset, save_dataset
from .experiments import predictions_for, run_ablation
from .local_denoise import CacheError, PseudoLabelCache, build_pseudolabel_cache
from .reporting import render_error_map, write_table
from .sample_division import (STRATEGIES, divide, grayscale_distribution, score_images,
                              write_division_report, write_histogram_csv)
from .segmodel import ModelError, load_checkpoint, pretrained_reference_backbone
from .trainer import TrainingDivergedError, adapt, evaluate, predict_probs, pretrain_source

logger = logging.getLogger("lgda")

SPLITS = ("source", "target_train", "target_test")
STRUCT_CHANNELS = (("disc", 1), ("cup", 0))


class MissingPrerequisite(RuntimeError):
    pass


class Run:
    """Resolved config plus the run directory layout."""

    def __init__(self, config: RunConfig, run_dir: Path, force: bool):
        self.config = config
        self.dir = run_dir
        self.force = force

    @property
    def seed(self) -> int:
        return self.config["run.seed"]

    @property
    def data_dir(self) -> Path:
        return Path(self.config["paths.data_dir"]) if self.config["paths.data_dir"] else self.dir / "data"

    @property
    def cache_dir(self) -> Path:
        return Path(self.config["paths.cache_dir"]) if self.config["paths.cache_dir"] else self.dir / "cache"

    @property
    def source_ckpt(self) -> Path:
        return self.dir / "ckpt_source.pt"

    @property
    def adapted_ckpt(self) -> Path:
        return self.dir / "ckpt_adapted.pt"

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingPrerequisite(f"missing {path} (run `lgda {hint}` first)")
        return path

    def split(self, name: str, masks: bool):
        root = self.require(self.data_dir / name / "images", "synth").parent
        if masks:
            return load_dataset(root, labeled=True, domain_tag="source" if name == "source" else "target")
        return load_dataset(root, domain_tag="target", read_masks=False)

    def checkpoint(self, which: str):
        if which == "source":
            return load_checkpoint(self.require(self.source_ckpt, "pretrain"))
        if which == "adapted":
            return load_checkpoint(self.require(self.adapted_ckpt, "adapt"))
        return load_checkpoint(self.require(Path(which), "pretrain"))


# ---------------------------------------------------------------- commands

def cmd_synth(run: Run):
    existing = [run.data_dir / s for s in SPLITS if (run.data_dir / s).exists()]
    if existing and not run.force:
        raise FileExistsError(f"{existing[0]} already exists; pass --force to overwrite")
    for path in existing:
        shutil.rmtree(path)
    synth = run.config.synth_config()
    source, target = generate_synthetic(synth)
    n_train = run.config["synth.n_target_train"]
    save_dataset(source, run.data_dir / "source", synth_config=synth)
    save_dataset(target[:n_train], run.data_dir / "target_train", synth_config=synth)
    save_dataset(target[n_train:], run.data_dir / "target_test", synth_config=synth)
    print(f"wrote {len(source)} source / {n_train} target_train / {len(target) - n_train} "
          f"target_test images under {run.data_dir}")


def cmd_pretrain(run: Run):
    source = run.split("source", masks=True)
    model = pretrained_reference_backbone(run.config["train.feature_channels"],
                                          run.config["train.dropout_rate"], seed=run.seed)
    _, history = pretrain_source(model, source, run.config.train_config(), run_dir=run.dir)
    last = history[-1] if len(history) else {}
    print(f"saved {run.source_ckpt} after {len(history)} epochs (last loss {last.get('loss', float('nan')):.4f})")


def _build_cache(run: Run, model, targets):
    if run.force and (run.cache_dir / "manifest.json").exists():
        (run.cache_dir / "manifest.json").unlink()
    cfg = run.config.train_config()
    return build_pseudolabel_cache(model, targets, cfg.num_passes, cfg.local, run.cache_dir, seed=run.seed)


def cmd_pseudolabel(run: Run):
    model = run.checkpoint("source")
    targets = run.split("target_train", masks=False)
    manifest = _build_cache(run, model, targets)
    print(f"pseudo-label cache with {len(manifest['entries'])} entries in {run.cache_dir}")


def cmd_adapt(run: Run):
    model = run.checkpoint("source")
    targets = run.split("target_train", masks=False)
    run.require(run.cache_dir / "manifest.json", "pseudolabel")
    _, history = adapt(model, targets, PseudoLabelCache(run.cache_dir), run.config.train_config(),
                       run_dir=run.dir)
    print(f"saved {run.adapted_ckpt} after {len(history)} adaptation epochs")


def _error_maps(model, samples, out_dir: Path, limit: int, threshold: float):
    if limit <= 0:
        return
    samples = samples[:limit]
    preds = predictions_for(model, samples, threshold)
    for sample, pred in zip(samples, preds):
        for name, ch in STRUCT_CHANNELS:
            render_error_map(pred[..., ch], sample.mask[..., ch], out_dir / f"{sample.id}_{name}.png")


def cmd_eval(run: Run):
    which = run.config["eval.checkpoint"]
    model = run.checkpoint(which)
    label = which if which in ("source", "adapted") else Path(which).stem
    samples = run.split(run.config["eval.split"], masks=True)
    thr = run.config["eval.threshold"]
    table = evaluate(model, samples, thr)
    _, txt = write_table([(label, table)], run.dir / f"eval_{label}")
    _error_maps(model, samples, run.dir / "error_maps" / label, run.config["eval.error_maps"], thr)
    print(txt.read_text(), end="")


def cmd_ablate(run: Run):
    missing = [str(run.data_dir / s) for s in SPLITS[1:] if not (run.data_dir / s / "images").is_dir()]
    if missing:
        raise MissingPrerequisite(f"missing dataset(s) {', '.join(missing)} (run `lgda synth` first)")
    model = run.checkpoint("source")
    train = run.split("target_train", masks=False)
    test = run.split("target_test", masks=True)
    _build_cache(run, model, train)
    thr = run.config["eval.threshold"]
    res = run_ablation(model, train, test, run.cache_dir, run.config.train_config(),
                       run_dir=run.dir / "ablation", threshold=thr)
    _, txt = write_table(list(res.tables.items()), run.dir / "ablation")
    _, stxt = write_table(list(res.strategy_tables.items()), run.dir / "strategies", label="strategy")
    for name, variant_model in res.models.items():
        _error_maps(variant_model, test, run.dir / "error_maps" / name, run.config["eval.error_maps"], thr)
    print(txt.read_text() + "\n" + stxt.read_text(), end="")


def cmd_histogram(run: Run):
    model = run.checkpoint("source")
    source = run.split("source", masks=False)
    targets = run.split("target_train", masks=False)
    probs = predict_probs(model, targets)
    ids = [s.id for s in targets]
    centers, src_mass = grayscale_distribution(source)
    base = run.config.division_config()

    def mass(subset):
        return grayscale_distribution(subset)[1] if subset else np.zeros_like(src_mass)

    for strategy in STRATEGIES:
        cfg = dataclasses.replace(base, strategy=strategy)
        result = divide(score_images(ids, probs, cfg), cfg)
        easy = [s for s in targets if result.is_easy(s.id)]
        hard = [s for s in targets if not result.is_easy(s.id)]
        write_histogram_csv(run.dir / f"histogram_{strategy}.csv", centers, src_mass, mass(easy), mass(hard))
        if strategy == base.strategy:
            write_division_report(result, run.dir / "division_report.json")
            print(f"{strategy}: {len(easy)} easy / {len(hard)} hard")


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic source/target datasets"),
    "pretrain": (cmd_pretrain, "supervised training on the source split"),
    "pseudolabel": (cmd_pseudolabel, "MC-dropout + local correction cache for target_train"),
    "adapt": (cmd_adapt, "self-train the source model on target_train"),
    "eval": (cmd_eval, "Dice/ASD table and error maps for a checkpoint"),
    "ablate": (cmd_ablate, "baseline / +L / +LG and division-strategy tables"),
    "histogram": (cmd_histogram, "grayscale histograms of source, easy and hard images"),
}

ERRORS = (ConfigError, DatasetError, CacheError, ModelError, MissingPrerequisite, TrainingDivergedError,
          FileExistsError, FileNotFoundError, ValueError, OSError)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML config file")
    common.add_argument("--run-dir", metavar="PATH", help="output directory (default $LGDA_OUTPUT_ROOT/<run.name>)")
    common.add_argument("--seed", type=int, help="shorthand for --run.seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="lgda", description=__doc__.split("\n")[0],
        epilog="Any config field can be set with --section.key=value, e.g. --train.epochs_adapt=5")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest)
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        config = RunConfig.resolve(args.config, overrides)
        run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(config["run.name"])
        run = Run(config, run_dir, args.force)
        run_dir.mkdir(parents=True, exist_ok=True)
        config.freeze(run_dir / f"config.{args.command}.toml")
        COMMANDS[args.command][0](run)
    except ERRORS as exc:
        print(f"lgda {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
