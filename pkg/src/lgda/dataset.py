"""Fundus-like disc/cup data: synthetic two-domain generator, PNG ingestion,
ROI cropping and training augmentations.

Masks are stored channel-last with two binary channels, ``CUP`` (0) and
``DISC`` (1). The cup always lies inside the disc.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

CUP, DISC = 0, 1
NUM_CLASSES = 2
STRUCTURES = {DISC: "disc", CUP: "cup"}

# single-channel mask palette
MASK_BACKGROUND, MASK_DISC, MASK_CUP = 0, 128, 255


class DatasetError(ValueError):
    """Raised for malformed dataset directories or invalid generator settings."""


class NestingRepairWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ImageSample:
    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    domain_tag: str = "source"

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be HxWx3, got {image.shape}")
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise DatasetError(f"{self.id}: image values outside [0, 1]")
        object.__setattr__(self, "image", image)
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != image.shape[:2] + (NUM_CLASSES,):
                raise DatasetError(f"{self.id}: mask shape {mask.shape} does not match image")
            if not np.isin(mask, (0, 1)).all():
                raise DatasetError(f"{self.id}: mask values must be 0/1")
            mask = mask.astype(np.uint8)
            if (mask[..., CUP] > mask[..., DISC]).any():
                raise DatasetError(f"{self.id}: cup pixels outside the disc")
            object.__setattr__(self, "mask", mask)
        if self.domain_tag not in ("source", "target"):
            raise DatasetError(f"unknown domain tag {self.domain_tag!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    @property
    def labeled(self) -> bool:
        return self.mask is not None

    def without_mask(self) -> "ImageSample":
        return dataclasses.replace(self, mask=None)


@dataclass(frozen=True)
class SynthShift:
    """Photometric shift applied to target renders. Defaults are the identity."""

    intensity_scale: float = 1.0
    contrast_gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    texture_amp: float = 1.0

    def is_identity(self) -> bool:
        return self == SynthShift()


SHIFT_PRESETS = {
    "none": SynthShift(),
    # brighter, washed-out targets: the source model over-segments them
    "mild": SynthShift(intensity_scale=1.05, contrast_gamma=0.8, noise_sigma=0.015,
                       blur_radius=0.25, texture_amp=1.25),
    "strong": SynthShift(intensity_scale=1.1, contrast_gamma=0.6, noise_sigma=0.03,
                         blur_radius=0.5, texture_amp=1.5),
}


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    n_source: int = 80
    n_target: int = 100
    shift: SynthShift = field(default_factory=SynthShift)
    seed: int = 0

    def __post_init__(self):
        if int(self.image_size) != self.image_size or self.image_size < 32:
            raise DatasetError("image_size must be an integer >= 32")
        if self.n_source < 0 or self.n_target < 0:
            raise DatasetError("sample counts must be non-negative")
        if self.shift.noise_sigma < 0 or self.shift.blur_radius < 0:
            raise DatasetError("noise_sigma and blur_radius must be >= 0")
        if self.shift.intensity_scale <= 0 or self.shift.contrast_gamma <= 0:
            raise DatasetError("intensity_scale and contrast_gamma must be > 0")
        if self.shift.texture_amp < 0:
            raise DatasetError("texture_amp must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- synthesis

def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _vessel_map(rng: np.random.Generator, size: int, cy: float, cx: float) -> np.ndarray:
    """Soft map of a few dark curvilinear vessels radiating from (cy, cx)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(int(rng.integers(4, 7))):
        angle = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-2.5, 2.5) / size
        width = rng.uniform(0.8, 1.6) * size / 128
        t = np.linspace(0, size * 0.75, 96)
        heading = angle + bend * t
        py = cy + np.cumsum(np.sin(heading)) * (t[1] - t[0])
        px = cx + np.cumsum(np.cos(heading)) * (t[1] - t[0])
        d2 = np.full((size, size), np.inf)
        for y0, x0 in zip(py, px):
            np.minimum(d2, (yy - y0) ** 2 + (xx - x0) ** 2, out=d2)
        out = np.maximum(out, np.exp(-d2 / (2 * width ** 2)))
    return out


def _render_scene(rng: np.random.Generator, size: int, texture_amp: float):
    """Draw one source-style scene; returns (image, mask)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = (0.5 + rng.uniform(-0.08, 0.08, 2)) * size
    disc_r = rng.uniform(0.17, 0.24) * size
    aspect = rng.uniform(0.85, 1.15)
    theta = rng.uniform(0, np.pi)
    cup_ratio = rng.uniform(0.4, 0.65)
    slack = (1 - cup_ratio) * disc_r * 0.4
    ccy, ccx = cy + rng.uniform(-slack, slack), cx + rng.uniform(-slack, slack)

    def rho(y0, x0, ra, rb):
        u = (xx - x0) * np.cos(theta) + (yy - y0) * np.sin(theta)
        v = -(xx - x0) * np.sin(theta) + (yy - y0) * np.cos(theta)
        return np.sqrt((u / ra) ** 2 + (v / rb) ** 2)

    rho_disc = rho(cy, cx, disc_r * aspect, disc_r / aspect)
    cup_r = disc_r * cup_ratio
    rho_cup = rho(ccy, ccx, cup_r * aspect, cup_r / aspect)
    disc = rho_disc <= 1.0
    cup = (rho_cup <= 1.0) & disc

    # soft edges, roughly 1.5 px wide
    w_disc = 1.0 / (1.0 + np.exp(-(1.0 - rho_disc) * disc_r / 1.5))
    w_cup = 1.0 / (1.0 + np.exp(-(1.0 - rho_cup) * cup_r / 2.0))

    bg = np.array([0.62, 0.30, 0.14]) * rng.uniform(0.9, 1.1, 3)
    disc_rgb = np.array([0.90, 0.64, 0.38]) * rng.uniform(0.95, 1.05, 3)
    cup_rgb = np.array([0.98, 0.84, 0.62]) * rng.uniform(0.97, 1.03, 3)
    cup_rgb = np.minimum(cup_rgb, 1.0)

    img = bg * (1 - w_disc[..., None]) + disc_rgb * w_disc[..., None]
    img = img * (1 - w_cup[..., None]) + cup_rgb * w_cup[..., None]

    vessels = _vessel_map(rng, size, cy, cx)
    img = img * (1 - 0.45 * vessels[..., None])

    r2 = ((yy - size / 2) ** 2 + (xx - size / 2) ** 2) / (size / 2) ** 2
    img = img * np.clip(1 - 0.35 * r2, 0.3, 1)[..., None]

    texture = 0.05 * _smooth_noise(rng, size, size / 16) + 0.025 * _smooth_noise(rng, size, size / 48)
    img = img * (1 + texture_amp * texture[..., None])
    img = img + rng.normal(0, 0.01, img.shape)

    mask = np.stack([cup, disc], axis=-1).astype(np.uint8)
    return np.clip(img, 0, 1), mask


def apply_shift(image: np.ndarray, shift: SynthShift, rng: np.random.Generator) -> np.ndarray:
    x = np.clip(shift.intensity_scale * image, 0, 1) ** shift.contrast_gamma
    if shift.blur_radius > 0:
        x = ndimage.gaussian_filter(x, sigma=(shift.blur_radius, shift.blur_radius, 0))
    if shift.noise_sigma > 0:
        x = x + rng.normal(0, shift.noise_sigma, x.shape)
    return np.clip(x, 0, 1)


def generate_synthetic(config: SynthConfig) -> tuple[list[ImageSample], list[ImageSample]]:
    """Render the source and target sets for ``config``.

    Both domains share the scene family; targets get ``config.shift``
    (including a texture amplitude multiplier) on top of the source style.
    The result is a pure function of the config.
    """
    source_seq, target_seq = np.random.SeedSequence(config.seed).spawn(2)
    size = config.image_size

    source = []
    for i, seq in enumerate(source_seq.spawn(config.n_source)):
        rng = np.random.default_rng(seq)
        img, mask = _render_scene(rng, size, 1.0)
        source.append(ImageSample(f"src_{i:04d}", img.astype(np.float32), mask, "source"))

    target = []
    for i, seq in enumerate(target_seq.spawn(config.n_target)):
        rng = np.random.default_rng(seq)
        img, mask = _render_scene(rng, size, config.shift.texture_amp)
        img = apply_shift(img, config.shift, rng)
        target.append(ImageSample(f"tgt_{i:04d}", img.astype(np.float32), mask, "target"))
    return source, target


# ---------------------------------------------------------------- file I/O

def encode_mask(mask: np.ndarray) -> np.ndarray:
    out = np.zeros(mask.shape[:2], dtype=np.uint8)
    out[mask[..., DISC] == 1] = MASK_DISC
    out[mask[..., CUP] == 1] = MASK_CUP
    return out


def decode_mask(encoded: np.ndarray, name: str = "mask") -> np.ndarray:
    """Decode a mask array into (cup, disc) channels.

    Gray masks use the 0/128/255 palette. RGB masks carry the cup in the red
    channel and the disc in the green channel (0 or 255 each); a cup pixel
    outside the disc is repaired with ``disc |= cup`` and a warning.
    """
    if encoded.ndim == 2:
        bad = ~np.isin(encoded, (MASK_BACKGROUND, MASK_DISC, MASK_CUP))
        if bad.any():
            raise DatasetError(f"{name}: unknown mask value(s) {np.unique(encoded[bad]).tolist()}")
        cup = encoded == MASK_CUP
        disc = encoded >= MASK_DISC
    elif encoded.ndim == 3 and encoded.shape[2] >= 2:
        planes = encoded[..., :2]
        bad = ~np.isin(planes, (0, 255))
        if bad.any():
            raise DatasetError(f"{name}: unknown mask value(s) {np.unique(planes[bad]).tolist()}")
        cup = planes[..., 0] == 255
        disc = planes[..., 1] == 255
        violations = int((cup & ~disc).sum())
        if violations:
            warnings.warn(f"{name}: {violations} cup pixel(s) outside the disc; disc extended to cover them",
                          NestingRepairWarning, stacklevel=2)
            disc = disc | cup
    else:
        raise DatasetError(f"{name}: unsupported mask shape {encoded.shape}")
    return np.stack([cup, disc], axis=-1).astype(np.uint8)


def _atomic_write_png(array: np.ndarray, path: Path):
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(array).save(tmp, format="PNG")
    os.replace(tmp, path)


def save_dataset(samples: Iterable[ImageSample], directory: str | os.PathLike,
                 synth_config: SynthConfig | None = None, with_masks: bool = True) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img8 = np.round(s.image * 255).astype(np.uint8)
        _atomic_write_png(img8, root / "images" / f"{s.id}.png")
        if with_masks and s.mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            _atomic_write_png(encode_mask(s.mask), root / "masks" / f"{s.id}.png")
    if synth_config is not None:
        (root / "synth_config.json").write_text(json.dumps(synth_config.to_dict(), indent=2, sort_keys=True))
    return root


def load_dataset(directory: str | os.PathLike, labeled: bool | None = None,
                 domain_tag: str = "target", read_masks: bool = True) -> list[ImageSample]:
    """Read ``<root>/images/*.png`` and, when present, ``<root>/masks/*.png``.

    ``labeled=None`` treats the set as labeled iff a ``masks`` directory
    exists. ``read_masks=False`` never opens mask files (adaptation inputs).
    """
    root = Path(directory)
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    if not read_masks:
        labeled = False
    elif labeled is None:
        labeled = mask_dir.is_dir()

    samples = []
    for path in sorted(image_dir.glob("*.png")):
        sid = path.stem
        try:
            with Image.open(path) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DatasetError(f"{path}: unreadable image ({exc})") from exc
        mask = None
        mask_path = mask_dir / f"{sid}.png"
        if read_masks and mask_path.exists():
            with Image.open(mask_path) as im:
                raw = np.asarray(im.convert("L") if im.mode in ("L", "P", "I", "1") else im.convert("RGB"))
            mask = decode_mask(raw, name=str(mask_path))
            if mask.shape[:2] != rgb.shape[:2]:
                raise DatasetError(f"{mask_path}: size does not match its image")
        elif labeled:
            raise DatasetError(f"{sid}: declared labeled but {mask_path} is missing")
        samples.append(ImageSample(sid, rgb, mask, domain_tag))
    logger.info("loaded %d samples from %s", len(samples), root)
    return samples


# ---------------------------------------------------------------- transforms

def crop_roi(sample: ImageSample, center: tuple[int, int], size: int) -> ImageSample:
    """Square ``size`` crop around ``center``, shifted inward to stay in bounds."""
    h, w = sample.shape
    if size < 1 or size > min(h, w):
        raise DatasetError(f"crop size {size} exceeds image extent {h}x{w}")
    top = int(np.clip(int(center[0]) - size // 2, 0, h - size))
    left = int(np.clip(int(center[1]) - size // 2, 0, w - size))
    sl = (slice(top, top + size), slice(left, left + size))
    mask = None if sample.mask is None else sample.mask[sl].copy()
    return dataclasses.replace(sample, image=sample.image[sl].copy(), mask=mask)


@dataclass(frozen=True)
class AugmentConfig:
    p_rot90: float = 0.5
    p_rotate: float = 0.3
    max_angle: float = 15.0
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_contrast: float = 0.5
    contrast_range: tuple[float, float] = (0.7, 1.3)
    p_noise: float = 0.5
    max_noise: float = 0.05
    p_erase: float = 0.3
    max_erase_frac: float = 0.25


def hflip(sample: ImageSample) -> ImageSample:
    mask = None if sample.mask is None else sample.mask[:, ::-1].copy()
    return dataclasses.replace(sample, image=sample.image[:, ::-1].copy(), mask=mask)


def vflip(sample: ImageSample) -> ImageSample:
    mask = None if sample.mask is None else sample.mask[::-1].copy()
    return dataclasses.replace(sample, image=sample.image[::-1].copy(), mask=mask)


def rot90(sample: ImageSample, k: int = 1) -> ImageSample:
    mask = None if sample.mask is None else np.rot90(sample.mask, k).copy()
    return dataclasses.replace(sample, image=np.rot90(sample.image, k).copy(), mask=mask)


def rotate(sample: ImageSample, angle: float) -> ImageSample:
    # bilinear for the image, nearest for the mask, same coordinate map
    img = ndimage.rotate(sample.image, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    mask = None
    if sample.mask is not None:
        mask = ndimage.rotate(sample.mask, angle, axes=(1, 0), reshape=False, order=0,
                              mode="constant", cval=0)
    return dataclasses.replace(sample, image=np.clip(img, 0, 1), mask=mask)


def augment(sample: ImageSample, rng: np.random.Generator | int | None,
            config: AugmentConfig = AugmentConfig()) -> ImageSample:
    """Random geometric + photometric augmentation; ``rng=None`` is the identity."""
    if rng is None:
        return sample
    rng = np.random.default_rng(rng)
    out = sample
    if rng.random() < config.p_rot90:
        out = rot90(out, int(rng.integers(1, 4)))
    if rng.random() < config.p_rotate:
        out = rotate(out, rng.uniform(-config.max_angle, config.max_angle))
    if rng.random() < config.p_hflip:
        out = hflip(out)
    if rng.random() < config.p_vflip:
        out = vflip(out)

    img = out.image
    if rng.random() < config.p_contrast:
        factor = rng.uniform(*config.contrast_range)
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = (img - mean) * factor + mean
    if rng.random() < config.p_noise:
        img = img + rng.normal(0, rng.uniform(0, config.max_noise), img.shape)
    if rng.random() < config.p_erase:
        h, w = img.shape[:2]
        eh = int(rng.integers(1, max(2, int(h * config.max_erase_frac))))
        ew = int(rng.integers(1, max(2, int(w * config.max_erase_frac))))
        top, left = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
        img = img.copy()
        img[top:top + eh, left:left + ew] = rng.uniform(0, 1, 3)
    if img is not out.image:
        out = dataclasses.replace(out, image=np.clip(img, 0, 1).astype(np.float32))
    return out


def split_samples(samples: Sequence[ImageSample], fraction: float, seed: int):
    """Seeded split into (kept, held_out) with ``round(fraction * n)`` held out."""
    n = len(samples)
    n_held = int(round(fraction * n))
    order = np.random.default_rng(seed).permutation(n)
    held = {int(i) for i in order[:n_held]}
    return ([s for i, s in enumerate(samples) if i not in held],
            [s for i, s in enumerate(samples) if i in held])


def stack_images(samples: Sequence[ImageSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])
