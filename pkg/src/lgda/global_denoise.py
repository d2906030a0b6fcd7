"""Online global pseudo-label correction with easy-sample class prototypes.

Per class ``c`` a foreground and a background prototype are averaged from
the features of easy samples. A pixel keeps a foreground pseudo-label only
if its feature is at least as close to the foreground prototype as to the
background one.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .local_denoise import NORM_EPS, PseudoLabel

METRICS = ("cosine", "neg_l2")


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    f_obj: np.ndarray  # C2 x C1
    f_bck: np.ndarray  # C2 x C1
    valid: np.ndarray  # C2 bool
    n_fg: np.ndarray  # C2 int
    n_bg: np.ndarray  # C2 int

    @property
    def num_classes(self) -> int:
        return self.f_obj.shape[0]

    @classmethod
    def empty(cls, num_classes: int, channels: int) -> "PrototypeSet":
        z = np.zeros((num_classes, channels))
        n = np.zeros(num_classes, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(num_classes, dtype=bool), n, n.copy())

    def trace_records(self, step: int) -> list[dict]:
        out = []
        for c in range(self.num_classes):
            fo, fb = self.f_obj[c], self.f_bck[c]
            no, nb = float(np.linalg.norm(fo)), float(np.linalg.norm(fb))
            cos = float(fo @ fb / (no * nb)) if no >= NORM_EPS and nb >= NORM_EPS else 0.0
            out.append({"step": step, "class": c, "valid": bool(self.valid[c]),
                        "n_fg": int(self.n_fg[c]), "n_bg": int(self.n_bg[c]),
                        "norm_f_obj": no, "norm_f_bck": nb, "cos": cos})
        return out


@dataclass(frozen=True, eq=False)
class PrototypeMask:
    mask: np.ndarray  # H x W x C2, uint8
    affinity_fg: np.ndarray
    affinity_bg: np.ndarray


def _label_values(label) -> np.ndarray:
    return label.values if isinstance(label, PseudoLabel) else np.asarray(label)


def compute_prototypes(features: Sequence[np.ndarray], labels: Sequence, binarize_threshold: float = 0.5) -> PrototypeSet:
    """Masked feature means over all given (easy) images.

    ``features[i]`` is H x W x C1 at label resolution, ``labels[i]`` is
    H x W x C2 and is binarised at ``binarize_threshold``. Sums run in
    float64 over pixels in image order, then row-major.
    """
    if len(features) != len(labels):
        raise ValueError("features and labels must pair up")
    if not features:
        raise ValueError("compute_prototypes needs at least one image")
    c1 = features[0].shape[-1]
    c2 = _label_values(labels[0]).shape[-1]
    flat_f = np.concatenate([np.asarray(f).reshape(-1, c1) for f in features])
    flat_l = np.concatenate([_label_values(l).reshape(-1, c2) for l in labels]) >= binarize_threshold
    if flat_f.shape[0] != flat_l.shape[0]:
        raise ValueError("feature and label maps differ in size")

    f_obj = np.zeros((c2, c1))
    f_bck = np.zeros((c2, c1))
    n_fg = np.zeros(c2, dtype=np.int64)
    n_bg = np.zeros(c2, dtype=np.int64)
    for c in range(c2):
        fg = flat_l[:, c]
        n_fg[c] = int(fg.sum())
        n_bg[c] = int(fg.size - n_fg[c])
        if n_fg[c]:
            f_obj[c] = np.add.reduce(flat_f[fg].astype(np.float64), axis=0) / n_fg[c]
        if n_bg[c]:
            f_bck[c] = np.add.reduce(flat_f[~fg].astype(np.float64), axis=0) / n_bg[c]
    return PrototypeSet(f_obj, f_bck, (n_fg > 0) & (n_bg > 0), n_fg, n_bg)


def prototype_affinity(feature, prototype, metric: str = "cosine") -> float:
    f = np.asarray(feature, dtype=np.float64)
    p = np.asarray(prototype, dtype=np.float64)
    if metric == "cosine":
        nf, np_ = np.linalg.norm(f), np.linalg.norm(p)
        if nf < NORM_EPS or np_ < NORM_EPS:
            return 0.0
        return float(f @ p / (nf * np_))
    if metric == "neg_l2":
        return -float(np.linalg.norm(f - p))
    raise ValueError(f"unknown metric {metric!r}")


def _affinity_map(flat: np.ndarray, proto: np.ndarray, metric: str, norms: np.ndarray) -> np.ndarray:
    if metric == "cosine":
        pn = np.linalg.norm(proto)
        if pn < NORM_EPS:
            return np.zeros(flat.shape[0])
        ok = norms >= NORM_EPS
        return np.where(ok, (flat @ proto) / np.where(ok, norms * pn, 1.0), 0.0)
    if metric == "neg_l2":
        return -np.linalg.norm(flat - proto, axis=1)
    raise ValueError(f"unknown metric {metric!r}")


def build_mask(features: np.ndarray, protos: PrototypeSet, metric: str = "cosine") -> PrototypeMask:
    """Foreground where affinity to ``f_obj[c]`` >= affinity to ``f_bck[c]``.

    Classes whose prototypes are invalid get an all-ones mask, which turns
    global correction off for them.
    """
    h, w, c1 = features.shape
    if protos.f_obj.shape[1] != c1:
        raise ValueError(f"features have {c1} channels, prototypes {protos.f_obj.shape[1]}")
    flat = features.reshape(-1, c1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    c2 = protos.num_classes
    aff_fg = np.zeros((h * w, c2))
    aff_bg = np.zeros((h * w, c2))
    for c in range(c2):
        if protos.valid[c]:
            aff_fg[:, c] = _affinity_map(flat, protos.f_obj[c], metric, norms)
            aff_bg[:, c] = _affinity_map(flat, protos.f_bck[c], metric, norms)
    mask = (aff_fg >= aff_bg).astype(np.uint8)
    return PrototypeMask(mask.reshape(h, w, c2), aff_fg.reshape(h, w, c2), aff_bg.reshape(h, w, c2))


def fuse_pseudolabel(local_label, mask: PrototypeMask | np.ndarray, binarize_threshold: float = 0.5) -> PseudoLabel:
    """Trusted foreground: 1 where the binarised local label and the mask are both 1."""
    local = _label_values(local_label) >= binarize_threshold
    m = mask.mask if isinstance(mask, PrototypeMask) else np.asarray(mask)
    if local.shape != m.shape:
        raise ValueError(f"label {local.shape} and mask {m.shape} differ in shape")
    return PseudoLabel((local & (m == 1)).astype(np.float32), soft=False)


def update_prototypes_online(previous: PrototypeSet | None, batch: PrototypeSet, momentum: float = 0.0) -> PrototypeSet:
    """Blend per valid class; invalid batch classes carry ``previous`` forward."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if previous is None:
        previous = PrototypeSet.empty(batch.num_classes, batch.f_obj.shape[1])
    f_obj, f_bck = previous.f_obj.copy(), previous.f_bck.copy()
    valid = previous.valid.copy()
    for c in range(batch.num_classes):
        if not batch.valid[c]:
            continue
        if previous.valid[c]:
            f_obj[c] = momentum * previous.f_obj[c] + (1 - momentum) * batch.f_obj[c]
            f_bck[c] = momentum * previous.f_bck[c] + (1 - momentum) * batch.f_bck[c]
        else:
            f_obj[c], f_bck[c] = batch.f_obj[c], batch.f_bck[c]
        valid[c] = True
    return PrototypeSet(f_obj, f_bck, valid, previous.n_fg + batch.n_fg, previous.n_bg + batch.n_bg)


class PrototypeTrace:
    """Appends prototype drift diagnostics to ``prototypes.jsonl``."""

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, step: int, protos: PrototypeSet):
        recs = protos.trace_records(step)
        self.records.extend(recs)
        if self.path is not None:
            with self.path.open("a") as fh:
                for r in recs:
                    fh.write(json.dumps(r) + "\n")
