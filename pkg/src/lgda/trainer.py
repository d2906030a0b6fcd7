"""Source pretraining, target self-training on corrected pseudo-labels, and
evaluation producing disc/cup Dice and ASD tables."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import CUP, DISC, ImageSample, augment, split_samples, stack_images
from .global_denoise import (PrototypeTrace, build_mask, compute_prototypes, fuse_pseudolabel,
                             update_prototypes_online)
from .local_denoise import LocalCorrectionConfig, PseudoLabel, PseudoLabelCache
from .metrics import UndefinedMetricError, asd, binarize, dice
from .sample_division import DivisionConfig, divide, score_images
from .segmodel import make_generator, save_checkpoint, to_tensor, upsample_nchw

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs_source: int = 30
    epochs_adapt: int = 1  # picked on held-out benchmark seeds; longer runs drift
    num_passes: int = 10
    seed: int = 0
    division: DivisionConfig = field(default_factory=DivisionConfig)
    local: LocalCorrectionConfig = field(default_factory=LocalCorrectionConfig)
    prototype_momentum: float = 0.0
    metric: str = "cosine"
    binarize_threshold: float = 0.5
    global_correction: bool = True
    val_fraction: float = 0.1
    augment_source: bool = True
    adapt_dropout: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.num_passes < 1:
            raise ValueError("num_passes must be >= 1")
        if not 0.0 <= self.prototype_momentum < 1.0:
            raise ValueError("prototype_momentum must lie in [0, 1)")
        if self.metric not in ("cosine", "neg_l2"):
            raise ValueError(f"unknown prototype metric {self.metric!r}")


class TrainHistory:
    def __init__(self):
        self.records: list[dict] = []

    def append(self, record: dict):
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("history epochs must increase")
        self.records.append(record)
        logger.info("epoch %s: %s", record["epoch"],
                    ", ".join(f"{k}={v:.4g}" for k, v in record.items()
                              if k != "epoch" and isinstance(v, float)))

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def write_jsonl(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text("".join(json.dumps(r) + "\n" for r in self.records))
        return path


# ---------------------------------------------------------------- losses

def _to_nchw(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    arr = np.asarray(a)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def adaptation_loss(pred_probs, pseudo) -> torch.Tensor:
    """Mean binary cross-entropy of predictions against fused pseudo-labels.

    Accepts NCHW tensors or channel-last arrays; logs are clamped at 1e-7.
    """
    q = _to_nchw(pred_probs)
    p = pseudo.values if isinstance(pseudo, PseudoLabel) else pseudo
    p = _to_nchw(p).to(q.dtype)
    if p.shape != q.shape:
        raise ValueError(f"prediction {tuple(q.shape)} and pseudo-label {tuple(p.shape)} differ")
    q = q.clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    return -(p * torch.log(q) + (1 - p) * torch.log(1 - q)).mean()


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    inter = (probs * target).sum(dim=(2, 3))
    denom = probs.sum(dim=(2, 3)) + target.sum(dim=(2, 3))
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def supervised_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, target) + soft_dice_loss(torch.sigmoid(logits), target)


# ---------------------------------------------------------------- inference

def predict_probs(model, samples: Sequence[ImageSample], batch_size: int = 16) -> np.ndarray:
    """Deterministic (dropout off) probabilities, N x H x W x C2."""
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            _, logits = model(to_tensor(list(samples[i:i + batch_size])), dropout=False)
            out.append(torch.sigmoid(logits).permute(0, 2, 3, 1).numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def _masks_tensor(samples: Sequence[ImageSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)


# ---------------------------------------------------------------- pretraining

def pretrain_source(model, source_set: Sequence[ImageSample], config: TrainConfig = TrainConfig(),
                    run_dir: str | os.PathLike | None = None):
    """Supervised BCE + soft-Dice training on the labeled source set.

    Keeps the parameters with the best held-out loss (training loss when the
    held-out split is empty). Returns ``(model, history)``; the input model
    is trained in place.
    """
    if not source_set:
        raise ValueError("empty source set")
    unlabeled = [s.id for s in source_set if s.mask is None]
    if unlabeled:
        raise ValueError(f"source samples without masks: {unlabeled[:5]}")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = make_generator(config.seed)
    train, val = split_samples(source_set, config.val_fraction, config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps)
    history = TrainHistory()
    best_loss, best_state = math.inf, copy.deepcopy(model.state_dict())
    step = 0

    for epoch in range(1, config.epochs_source + 1):
        model.train()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            if config.augment_source:
                batch = [augment(s, rng) for s in batch]
            _, logits = model(to_tensor(batch), dropout=True, generator=gen)
            loss = supervised_loss(logits, _masks_tensor(batch))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite source loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break

        model.eval()
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val:
            with torch.no_grad():
                _, logits = model(to_tensor(list(val)), dropout=False)
                record["val_loss"] = float(supervised_loss(logits, _masks_tensor(val)))
            table = evaluate(model, val)
            record["eval_dice"] = table.summary["avg-Dice"][0]
            record["eval_asd"] = table.summary["avg-ASD"][0]
        score = record.get("val_loss", record["loss"])
        if score < best_loss:
            best_loss, best_state = score, copy.deepcopy(model.state_dict())
        history.append(record)
        if config.max_steps is not None and step >= config.max_steps:
            break

    model.load_state_dict(best_state)
    model.eval()
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(model, run_dir / "ckpt_source.pt")
        history.write_jsonl(run_dir / "history_source.jsonl")
    return model, history


# ---------------------------------------------------------------- adaptation

def adapt(model, target_set: Sequence[ImageSample], cache, config: TrainConfig = TrainConfig(),
          eval_set: Sequence[ImageSample] | None = None, run_dir: str | os.PathLike | None = None,
          callback: Callable[[dict], None] | None = None):
    """Self-train a copy of ``model`` on the unlabeled ``target_set``.

    Per epoch the easy/hard division is recomputed from the current model.
    Per batch the easy samples' features and cached local labels update the
    class prototypes, which mask the cached labels of the whole batch before
    the optimizer step. Target masks are never read; ``eval_set`` (optional,
    labeled) only feeds the history.
    """
    if not isinstance(cache, PseudoLabelCache):
        cache = PseudoLabelCache(cache)
    cache.check_matches(target_set)
    model = copy.deepcopy(model)
    history = TrainHistory()
    run_dir = Path(run_dir) if run_dir is not None else None
    if config.epochs_adapt <= 0 or not target_set:
        model.eval()
        if run_dir is not None:
            save_checkpoint(model, run_dir / "ckpt_adapted.pt")
            history.write_jsonl(run_dir / "history.jsonl")
        return model, history

    ids = [s.id for s in target_set]
    images = to_tensor(stack_images(target_set))
    local = np.stack([cache.labels(i) for i in ids])
    n, h, w = images.shape[0], images.shape[2], images.shape[3]

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = make_generator(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps)
    trace = PrototypeTrace(run_dir / "prototypes.jsonl" if run_dir is not None else None)
    protos = None
    step = 0

    for epoch in range(1, config.epochs_adapt + 1):
        model.eval()
        probs = predict_probs(model, target_set)
        division = divide(score_images(ids, probs, config.division), config.division)

        model.train()
        losses = []
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            feats, logits = model(images[idx], dropout=config.adapt_dropout, generator=gen)
            batch_local = local[idx]
            info = {"step": step, "epoch": epoch, "batch_ids": [ids[i] for i in idx], "model": model}

            if config.global_correction:
                up = upsample_nchw(feats.detach(), h, w).permute(0, 2, 3, 1).numpy()
                easy = [k for k, i in enumerate(idx) if division.is_easy(ids[i])]
                if easy:
                    batch_protos = compute_prototypes([up[k] for k in easy], [batch_local[k] for k in easy],
                                                      config.binarize_threshold)
                    protos = update_prototypes_online(protos, batch_protos, config.prototype_momentum)
                    trace.log(step, protos)
                    info.update(easy_features=[up[k] for k in easy], easy_labels=[batch_local[k] for k in easy],
                                batch_prototypes=batch_protos)
                if protos is not None:
                    fused = np.stack([fuse_pseudolabel(batch_local[k], build_mask(up[k], protos, config.metric),
                                                       config.binarize_threshold).values
                                      for k in range(len(idx))])
                else:
                    fused = (batch_local >= config.binarize_threshold).astype(np.float32)
                info["prototypes"] = protos
            else:
                fused = (batch_local >= config.binarize_threshold).astype(np.float32)
            info["fused"] = fused
            if callback is not None:
                callback(info)

            loss = adaptation_loss(torch.sigmoid(logits), _to_nchw(fused))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite adaptation loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1

        model.eval()
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "easy_count": division.easy_count}
        if eval_set:
            table = evaluate(model, eval_set)
            record["eval_dice"] = table.summary["avg-Dice"][0]
            record["eval_asd"] = table.summary["avg-ASD"][0]
        history.append(record)

    model.eval()
    if run_dir is not None:
        save_checkpoint(model, run_dir / "ckpt_adapted.pt")
        history.write_jsonl(run_dir / "history.jsonl")
    return model, history


# ---------------------------------------------------------------- evaluation

COLUMNS = ("disc-Dice", "disc-ASD", "cup-Dice", "cup-ASD", "avg-Dice", "avg-ASD")
_STRUCTS = (("disc", DISC), ("cup", CUP))


@dataclass
class MetricsTable:
    """Per-image Dice/ASD and the summary row (mean, std) per column.

    Std uses the n-1 denominator over per-image values; the avg columns
    average the disc and cup means and carry no std. ASD entries that are
    undefined (an empty mask) are skipped and counted in ``skipped``.
    """

    per_image: list[dict]
    summary: dict
    skipped: dict

    def row(self, percent: bool = True) -> dict:
        out = {}
        for col in COLUMNS:
            mean, std = self.summary[col]
            scale = 100.0 if percent and col.endswith("Dice") else 1.0
            out[col] = (mean * scale, std * scale if std is not None else None)
        return out


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else float("nan")
    return float(arr.mean()), std


def evaluate_predictions(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                         ids: Sequence[str] | None = None) -> MetricsTable:
    """Score binary H x W x C2 predictions against ground-truth masks."""
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty set")
    if len(preds) != len(truths):
        raise ValueError("predictions and truths must pair up")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    per_image = []
    skipped = {"disc": 0, "cup": 0}
    for sid, pred, truth in zip(ids, preds, truths):
        rec = {"id": sid}
        for name, ch in _STRUCTS:
            rec[f"{name}-Dice"] = dice(pred[..., ch], truth[..., ch])
            try:
                rec[f"{name}-ASD"] = asd(pred[..., ch], truth[..., ch])
            except UndefinedMetricError:
                rec[f"{name}-ASD"] = None
                skipped[name] += 1
        per_image.append(rec)
    if any(skipped.values()):
        warnings.warn(f"ASD undefined (empty mask) and skipped for {skipped['disc']} disc / "
                      f"{skipped['cup']} cup entries", stacklevel=2)

    summary = {}
    for name, _ in _STRUCTS:
        for metric in ("Dice", "ASD"):
            col = f"{name}-{metric}"
            summary[col] = _mean_std([r[col] for r in per_image if r[col] is not None])
    summary["avg-Dice"] = ((summary["disc-Dice"][0] + summary["cup-Dice"][0]) / 2, None)
    summary["avg-ASD"] = ((summary["disc-ASD"][0] + summary["cup-ASD"][0]) / 2, None)
    return MetricsTable(per_image, summary, skipped)


def evaluate(model, labeled_set: Sequence[ImageSample], threshold: float = 0.5) -> MetricsTable:
    if not labeled_set:
        raise ValueError("cannot evaluate an empty set")
    missing = [s.id for s in labeled_set if s.mask is None]
    if missing:
        raise ValueError(f"evaluation needs masks; missing for {missing[:5]}")
    preds = binarize(predict_probs(model, labeled_set), threshold)
    return evaluate_predictions(list(preds), [s.mask for s in labeled_set], [s.id for s in labeled_set])
