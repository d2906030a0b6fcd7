"""Segmentation network contract, MC-dropout ensembling and feature upsampling.

Any backbone can be plugged in as long as it is an ``nn.Module`` exposing
``feature_channels``, ``num_classes``, ``stride`` and ``dropout_rate`` and a
``forward(x, dropout=False, generator=None)`` that returns
``(features, logits)`` with features at ``1/stride`` resolution (NCHW).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import ImageSample, NUM_CLASSES


class ModelError(ValueError):
    pass


@dataclass
class ModelOutput:
    features: np.ndarray  # h1 x w1 x C1
    probs: np.ndarray  # H x W x C2


def _conv_block(cin, cout, stride=1, groups=4):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class ReferenceSegNet(nn.Module):
    """Desk-scale encoder/decoder with channel dropout between the two.

    Encoder: three conv stages (strides 1, 2, 2). Decoder: a stride-4 stage
    producing the ``feature_channels`` features, then a full-resolution stage
    fed by an encoder skip, a 1x1 head and per-channel sigmoid.
    """

    stride = 4

    def __init__(self, feature_channels: int = 64, num_classes: int = NUM_CLASSES,
                 dropout_rate: float = 0.3, widths: tuple[int, int, int] = (16, 32, 64),
                 decoder_width: int = 16):
        super().__init__()
        if not 0.0 <= dropout_rate < 1.0:
            raise ModelError("dropout_rate must be in [0, 1)")
        self.feature_channels = feature_channels
        self.num_classes = num_classes
        self.dropout_rate = dropout_rate
        self.widths = tuple(widths)
        self.decoder_width = decoder_width
        w1, w2, w3 = widths
        self.enc1 = _conv_block(3, w1)
        self.enc2 = _conv_block(w1, w2, stride=2)
        self.enc3 = _conv_block(w2, w3, stride=2)
        self.dec1 = _conv_block(w3, feature_channels)
        self.reduce = nn.Conv2d(feature_channels, decoder_width, 1)
        self.dec2 = nn.Sequential(
            nn.Conv2d(decoder_width + w1, decoder_width, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(decoder_width, num_classes, 1)

    def arch(self) -> dict:
        return {"arch": "reference", "feature_channels": self.feature_channels,
                "num_classes": self.num_classes, "dropout_rate": self.dropout_rate,
                "widths": list(self.widths), "decoder_width": self.decoder_width}

    def _dropout(self, x, generator):
        keep = 1.0 - self.dropout_rate
        noise = torch.rand(x.shape[:2] + (1, 1), generator=generator, dtype=x.dtype)
        return x * (noise < keep).to(x.dtype) / keep

    def forward(self, x, dropout: bool = False, generator: torch.Generator | None = None):
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ModelError(f"image size {tuple(x.shape[-2:])} not divisible by stride {self.stride}")
        skip = self.enc1(x)
        z = self.enc3(self.enc2(skip))
        if dropout and self.dropout_rate > 0:
            z = self._dropout(z, generator)
        features = self.dec1(z)
        up = F.interpolate(self.reduce(features), size=x.shape[-2:], mode="bilinear", align_corners=True)
        logits = self.head(self.dec2(torch.cat([up, skip], dim=1)))
        return features, logits


def pretrained_reference_backbone(feature_channels: int = 64, dropout_rate: float = 0.3,
                                  num_classes: int = NUM_CLASSES, seed: int | None = 0,
                                  **kwargs) -> ReferenceSegNet:
    """Build (not train) the reference network with seeded initialisation."""
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return ReferenceSegNet(feature_channels, num_classes, dropout_rate, **kwargs)
    return ReferenceSegNet(feature_channels, num_classes, dropout_rate, **kwargs)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def make_generator(rng) -> torch.Generator | None:
    if rng is None or isinstance(rng, torch.Generator):
        return rng
    g = torch.Generator()
    g.manual_seed(int(rng))
    return g


def to_tensor(images) -> torch.Tensor:
    """HxWx3 (or NxHxWx3) float array, or ImageSample(s), to NCHW float32."""
    if isinstance(images, ImageSample):
        images = images.image[None]
    elif isinstance(images, (list, tuple)):
        images = np.stack([s.image if isinstance(s, ImageSample) else s for s in images])
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def forward(model: nn.Module, image, dropout_enabled: bool = False, rng=None) -> ModelOutput:
    """Single-image inference returning channel-last numpy arrays."""
    x = to_tensor(image)
    with torch.no_grad():
        feats, logits = model(x, dropout=dropout_enabled, generator=make_generator(rng))
    return ModelOutput(
        features=feats[0].permute(1, 2, 0).numpy(),
        probs=torch.sigmoid(logits)[0].permute(1, 2, 0).numpy(),
    )


def mc_dropout_predict(model: nn.Module, image, num_passes: int = 10, rng=None,
                       return_passes: bool = False):
    """Mean features and mean probabilities over ``num_passes`` dropout passes.

    All passes run as one batch; each batch element draws its own dropout
    mask from ``rng``, so features and probabilities average over the same
    passes.
    """
    if num_passes < 1:
        raise ModelError("num_passes must be >= 1")
    x = to_tensor(image)
    if x.shape[0] != 1:
        raise ModelError("mc_dropout_predict takes a single image")
    with torch.no_grad():
        feats, logits = model(x.expand(num_passes, -1, -1, -1), dropout=True,
                              generator=make_generator(rng))
        probs = torch.sigmoid(logits)
    feats = feats.permute(0, 2, 3, 1).double()
    probs = probs.permute(0, 2, 3, 1).double()
    mean_features = feats.mean(0).float().numpy()
    mean_probs = probs.mean(0).float().numpy()
    if return_passes:
        return mean_features, mean_probs, (feats.float().numpy(), probs.float().numpy())
    return mean_features, mean_probs


def upsample_nchw(features: torch.Tensor, height: int, width: int) -> torch.Tensor:
    if features.shape[-2:] == (height, width):
        return features
    return F.interpolate(features, size=(height, width), mode="bilinear", align_corners=True)


def upsample_features(features: np.ndarray, height: int, width: int) -> np.ndarray:
    """Channelwise bilinear upsampling of an h1 x w1 x C map, corners aligned."""
    feats = np.asarray(features)
    h, w = feats.shape[:2]
    if height < h or width < w:
        raise ModelError("upsample_features only enlarges")
    if (h, w) == (height, width):
        return feats.copy()
    t = torch.from_numpy(np.ascontiguousarray(feats.transpose(2, 0, 1)))[None]
    return upsample_nchw(t, height, width)[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------- checkpoints

def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def meta_path(checkpoint: str | os.PathLike) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + ".model_meta.json")


def save_checkpoint(model: nn.Module, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(model.state_dict(), tmp)
    os.replace(tmp, path)
    meta = dict(model.arch()) if hasattr(model, "arch") else {}
    meta.update({
        "C1": model.feature_channels, "C2": model.num_classes, "stride": model.stride,
        "dropout_rate": model.dropout_rate, "parameter_hash": parameter_hash(model),
    })
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | os.PathLike) -> ReferenceSegNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    meta = json.loads(meta_path(path).read_text())
    if meta.get("arch", "reference") != "reference":
        raise ModelError(f"unsupported architecture {meta['arch']!r}")
    model = ReferenceSegNet(meta["C1"], meta["C2"], meta["dropout_rate"],
                            widths=tuple(meta.get("widths", (16, 32, 64))),
                            decoder_width=meta.get("decoder_width", 16))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    if parameter_hash(model) != meta["parameter_hash"]:
        raise ModelError(f"{path}: parameter hash does not match its metadata")
    return model.eval()
