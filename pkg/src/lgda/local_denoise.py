"""Offline local pseudo-label correction.

Each pixel's label is replaced by the mean label of the ``top_k`` pixels in
its ``neighborhood x neighborhood`` window whose (mean MC-dropout) features
are most cosine-similar to its own. Windows are truncated at image borders.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ImageSample
from .segmodel import mc_dropout_predict, parameter_hash, upsample_features

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


class CacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class LocalCorrectionConfig:
    neighborhood: int = 3
    top_k: int = 5
    include_center: bool = True

    def __post_init__(self):
        n = self.neighborhood
        if n < 1 or n % 2 == 0:
            raise ValueError("neighborhood must be an odd integer >= 1")
        limit = n * n if self.include_center else n * n - 1
        if not 1 <= self.top_k <= limit:
            raise ValueError(f"top_k must be in [1, {limit}] for this window")


@dataclass
class PseudoLabel:
    values: np.ndarray  # H x W x C2
    soft: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("pseudo-label values must lie in [0, 1]")
        if not self.soft and not np.isin(v, (0.0, 1.0)).all():
            raise ValueError("hard pseudo-labels must be binary")
        self.values = v

    def binarize(self, threshold: float = 0.5) -> np.ndarray:
        return (self.values >= threshold).astype(np.uint8)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def window_offsets(neighborhood: int, include_center: bool = True) -> list[tuple[int, int]]:
    """Window offsets in tie-break order: the center first, then row-major."""
    r = neighborhood // 2
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    return [(0, 0)] + offsets if include_center else offsets


def neighborhood_similarities(features: np.ndarray, pixel: tuple[int, int],
                              config: LocalCorrectionConfig) -> list[tuple[tuple[int, int], float]]:
    h, w = features.shape[:2]
    row, col = pixel
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel {pixel} outside {h}x{w} map")
    out = []
    for dy, dx in window_offsets(config.neighborhood, config.include_center):
        r, c = row + dy, col + dx
        if 0 <= r < h and 0 <= c < w:
            if (dy, dx) == (0, 0):
                s = 1.0 if np.linalg.norm(features[row, col].astype(np.float64)) >= NORM_EPS else 0.0
            else:
                s = cosine_similarity(features[row, col], features[r, c])
            out.append(((dy, dx), s))
    return out


def topk_correct_pixel(labels: np.ndarray, sims, pixel: tuple[int, int], top_k: int) -> np.ndarray:
    """Mean label over the ``top_k`` most similar window entries.

    ``sims`` comes from :func:`neighborhood_similarities`; its order is the
    tie-break order, so a stable sort keeps the center ahead of equal
    neighbours.
    """
    if not sims:
        raise ValueError("empty similarity list")
    order = sorted(range(len(sims)), key=lambda i: -sims[i][1])[:top_k]
    row, col = pixel
    acc = np.zeros(labels.shape[-1], dtype=np.float64)
    for i in order:
        dy, dx = sims[i][0]
        acc += labels[row + dy, col + dx].astype(np.float64)
    return (acc / len(order)).astype(np.float32)


def _similarity_stack(features: np.ndarray, offsets) -> np.ndarray:
    """(n_offsets, H, W) cosine similarities, -inf where the offset leaves the image."""
    f = np.asarray(features, dtype=np.float64)
    h, w = f.shape[:2]
    norms = np.linalg.norm(f, axis=-1)
    valid_norm = norms >= NORM_EPS
    sims = np.full((len(offsets), h, w), -np.inf)
    for k, (dy, dx) in enumerate(offsets):
        if (dy, dx) == (0, 0):
            sims[k] = np.where(valid_norm, 1.0, 0.0)
            continue
        r0, r1 = max(0, -dy), min(h, h - dy)
        c0, c1 = max(0, -dx), min(w, w - dx)
        if r0 >= r1 or c0 >= c1:
            continue
        a = f[r0:r1, c0:c1]
        b = f[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
        dot = np.einsum("ijk,ijk->ij", a, b)
        denom = norms[r0:r1, c0:c1] * norms[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
        ok = valid_norm[r0:r1, c0:c1] & valid_norm[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
        s = np.where(ok, dot / np.where(ok, denom, 1.0), 0.0)
        sims[k, r0:r1, c0:c1] = np.clip(s, -1.0, 1.0)
    return sims


def topk_neighbor_indices(features: np.ndarray, config: LocalCorrectionConfig) -> np.ndarray:
    """Per pixel, indices into ``window_offsets`` of the selected neighbours.

    Shape (H, W, K'); K' is ``top_k`` clipped to the window size. Entries
    that fall outside the image (small windows at corners) are -1.
    """
    offsets = window_offsets(config.neighborhood, config.include_center)
    sims = _similarity_stack(features, offsets)
    k = min(config.top_k, len(offsets))
    order = np.argsort(-sims, axis=0, kind="stable")[:k]
    picked = np.take_along_axis(sims, order, axis=0)
    order = np.where(np.isneginf(picked), -1, order)
    return np.moveaxis(order, 0, -1)


def local_correct_image(features: np.ndarray, labels, config: LocalCorrectionConfig = LocalCorrectionConfig()) -> PseudoLabel:
    """Correct every pixel from the original labels (no sequential propagation)."""
    values = labels.values if isinstance(labels, PseudoLabel) else np.asarray(labels, dtype=np.float32)
    if features.shape[:2] != values.shape[:2]:
        raise ValueError(f"feature map {features.shape[:2]} and labels {values.shape[:2]} differ in size")
    h, w, c = values.shape
    offsets = window_offsets(config.neighborhood, config.include_center)
    idx = topk_neighbor_indices(features, config)

    lab = values.astype(np.float64)
    acc = np.zeros((h, w, c))
    count = np.zeros((h, w))
    rows, cols = np.mgrid[0:h, 0:w]
    off = np.asarray(offsets)
    for slot in range(idx.shape[-1]):
        sel = idx[..., slot]
        used = sel >= 0
        safe = np.where(used, sel, 0)
        rr = np.clip(rows + off[safe, 0], 0, h - 1)
        cc = np.clip(cols + off[safe, 1], 0, w - 1)
        acc += np.where(used[..., None], lab[rr, cc], 0.0)
        count += used
    return PseudoLabel((acc / count[..., None]).astype(np.float32), soft=True)


# ---------------------------------------------------------------- cache

MAGIC = b"LGPL"
VERSION = 1
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<4sHHIII")


def encode_lgpl(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 3:
        raise ValueError("LGPL payloads are H x W x C")
    h, w, c = a.shape
    return _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, h, w, c) + np.ascontiguousarray(a).tobytes()


def decode_lgpl(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise CacheError("truncated LGPL header")
    magic, version, dtype, h, w, c = _HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION or dtype != DTYPE_FLOAT32:
        raise CacheError(f"bad LGPL header ({magic!r}, v{version}, dtype {dtype})")
    payload = blob[_HEADER.size:]
    if len(payload) != h * w * c * 4:
        raise CacheError("LGPL payload size does not match header")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


def write_lgpl(array: np.ndarray, path: str | os.PathLike) -> str:
    """Atomically write an LGPL file; returns the sha256 of its bytes."""
    blob = encode_lgpl(array)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def read_lgpl(path: str | os.PathLike, sha256: str | None = None) -> np.ndarray:
    blob = Path(path).read_bytes()
    if sha256 is not None and hashlib.sha256(blob).hexdigest() != sha256:
        raise CacheError(f"{path}: checksum mismatch")
    return decode_lgpl(blob)


def image_digest(sample: ImageSample) -> str:
    return hashlib.sha256(np.ascontiguousarray(sample.image, dtype="<f4").tobytes()).hexdigest()


def pass_seed(seed: int, sample_id: str) -> int:
    return (int(seed) * 0x9E3779B1 + zlib.crc32(sample_id.encode())) % (2 ** 63)


class PseudoLabelCache:
    """Read side of a cache directory written by :func:`build_pseudolabel_cache`."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        path = self.directory / "manifest.json"
        if not path.exists():
            raise CacheError(f"no manifest in {self.directory}")
        self.manifest = json.loads(path.read_text())
        self._entries = {e["id"]: e for e in self.manifest["entries"]}

    @property
    def ids(self) -> list[str]:
        return [e["id"] for e in self.manifest["entries"]]

    def __len__(self):
        return len(self._entries)

    def labels(self, sample_id: str) -> np.ndarray:
        e = self._entries[sample_id]
        return read_lgpl(self.directory / e["file"], e["sha256"])

    def features(self, sample_id: str) -> np.ndarray:
        e = self._entries[sample_id]
        if "feature_file" not in e:
            raise CacheError("cache was built without features")
        return read_lgpl(self.directory / e["feature_file"], e["feature_sha256"])

    def check_matches(self, samples: Sequence[ImageSample]):
        """Raise unless the cache was built from exactly these images."""
        if [s.id for s in samples] != self.ids and sorted(s.id for s in samples) != sorted(self.ids):
            raise CacheError("cache ids do not match the target set")
        for s in samples:
            if self._entries[s.id].get("image_sha256") != image_digest(s):
                raise CacheError(f"cache entry {s.id} was built from a different image")

    def verify(self) -> bool:
        try:
            for e in self.manifest["entries"]:
                read_lgpl(self.directory / e["file"], e["sha256"])
                if "feature_file" in e:
                    read_lgpl(self.directory / e["feature_file"], e["feature_sha256"])
        except (OSError, CacheError):
            return False
        return True


def correct_sample(model, sample: ImageSample, num_passes: int, config: LocalCorrectionConfig, seed: int):
    """MC-dropout prediction followed by local correction for one image."""
    feats, probs = mc_dropout_predict(model, sample, num_passes, rng=pass_seed(seed, sample.id))
    h, w = sample.shape
    corrected = local_correct_image(upsample_features(feats, h, w), probs, config)
    return feats, probs, corrected


def build_pseudolabel_cache(model, target_set: Sequence[ImageSample], num_passes: int,
                            config: LocalCorrectionConfig, out_dir: str | os.PathLike,
                            seed: int = 0, save_features: bool = False) -> dict:
    """Write locally corrected soft labels for every target image.

    An existing cache with the same settings, ids and intact files is reused;
    anything else (including a partial cache from an interrupted run) is
    rebuilt from scratch.
    """
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    settings = {"local": asdict(config), "seed": int(seed), "save_features": bool(save_features),
                "model_hash": parameter_hash(model)}
    digests = {s.id: image_digest(s) for s in target_set}

    if manifest_path.exists():
        try:
            cache = PseudoLabelCache(out)
            m = cache.manifest
            if (m.get("config") == settings and m.get("num_passes") == num_passes
                    and {e["id"]: e.get("image_sha256") for e in m["entries"]} == digests
                    and cache.verify()):
                logger.info("reusing pseudo-label cache in %s", out)
                return m
        except (CacheError, KeyError, json.JSONDecodeError):
            pass
        logger.warning("pseudo-label cache in %s is stale or partial; rebuilding", out)
        manifest_path.unlink()

    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    entries = []
    for sample in target_set:
        feats, _, corrected = correct_sample(model, sample, num_passes, config, seed)
        entry = {"id": sample.id, "file": f"{sample.id}.lgpl", "image_sha256": digests[sample.id]}
        entry["sha256"] = write_lgpl(corrected.values, out / entry["file"])
        if save_features:
            entry["feature_file"] = f"{sample.id}.feat.lgpl"
            entry["feature_sha256"] = write_lgpl(feats, out / entry["feature_file"])
        entries.append(entry)

    manifest = {"config": settings, "num_passes": int(num_passes), "entries": entries}
    tmp = manifest_path.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, manifest_path)
    return manifest
