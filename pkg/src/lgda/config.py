"""Run configuration: defaults, then a TOML file, then ``--section.key=value``
flags. The resolved values are frozen together with their provenance."""
from __future__ import annotations

import copy
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .dataset import SHIFT_PRESETS, SynthConfig, SynthShift
from .local_denoise import LocalCorrectionConfig
from .sample_division import DivisionConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "LGDA_OUTPUT_ROOT"
SHIFT_KEYS = ("intensity_scale", "contrast_gamma", "noise_sigma", "blur_radius", "texture_amp")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict] = {
    "run": {"name": "default", "seed": 0},
    "synth": {
        "image_size": 128, "n_source": 80, "n_target_train": 60, "n_target_test": 40,
        "shift": "strong",
        # numeric shift parameters default to the chosen preset
        **{k: None for k in SHIFT_KEYS},
    },
    "train": {
        "batch_size": 8, "learning_rate": 1e-3, "epochs_source": 30, "epochs_adapt": 1,
        "num_passes": 10, "prototype_momentum": 0.0, "metric": "cosine",
        "binarize_threshold": 0.5, "global_correction": True, "val_fraction": 0.1,
        "augment_source": True, "adapt_dropout": True,
        "feature_channels": 64, "dropout_rate": 0.3,
    },
    "division": {"strategy": "threshold", "eta": 0.044, "fraction": 0.3, "log_base": 10.0,
                 "entropy": "elementwise"},
    "local": {"neighborhood": 3, "top_k": 5, "include_center": True},
    "paths": {"data_dir": "", "cache_dir": ""},
    "eval": {"checkpoint": "adapted", "split": "target_test", "threshold": 0.5, "error_maps": 4},
}

_FLOAT_KEYS = {("synth", k) for k in SHIFT_KEYS}


def _coerce(section: str, key: str, raw, source: str):
    default = DEFAULTS[section][key]
    if (section, key) in _FLOAT_KEYS:
        kind = float
    elif default is None:
        return raw
    else:
        kind = type(default)
    if isinstance(raw, str) and kind is not str:
        text = raw.strip()
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r} ({source})")
        try:
            return kind(float(text)) if kind is int and "e" in text.lower() else kind(text)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__} ({source})") from exc
    if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
        return float(raw)
    if kind is int and isinstance(raw, float) and raw.is_integer():
        return int(raw)
    if not isinstance(raw, kind) or (kind is int and isinstance(raw, bool)):
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {raw!r} ({source})")
    return raw


class RunConfig:
    """Resolved configuration with per-field provenance (default | file | flag)."""

    def __init__(self, values: dict, provenance: dict):
        self.values = values
        self.provenance = provenance

    @classmethod
    def resolve(cls, path: str | os.PathLike | None = None, overrides: dict[str, object] | None = None) -> "RunConfig":
        values = copy.deepcopy(DEFAULTS)
        provenance = {f"{s}.{k}": "default" for s, sec in DEFAULTS.items() for k in sec}
        if path is not None:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
            for section, table in data.items():
                if section == "provenance":
                    continue
                if section not in DEFAULTS or not isinstance(table, dict):
                    raise ConfigError(f"unknown config section [{section}] in {path}")
                for key, raw in table.items():
                    cls._set(values, provenance, section, key, raw, "file")
        for dotted, raw in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            cls._set(values, provenance, section, key, raw, "flag")
        cfg = cls(values, provenance)
        cfg.synth_config()  # validate eagerly
        cfg.train_config()
        return cfg

    @staticmethod
    def _set(values, provenance, section, key, raw, source):
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key} ({source})")
        values[section][key] = _coerce(section, key, raw, source)
        provenance[f"{section}.{key}"] = source

    def __getitem__(self, dotted: str):
        section, _, key = dotted.partition(".")
        return self.values[section][key]

    # ---- typed views

    def shift(self) -> SynthShift:
        s = self.values["synth"]
        if s["shift"] not in SHIFT_PRESETS:
            raise ConfigError(f"unknown shift preset {s['shift']!r}; choose from {sorted(SHIFT_PRESETS)}")
        base = SHIFT_PRESETS[s["shift"]]
        return SynthShift(**{k: (getattr(base, k) if s[k] is None else s[k]) for k in SHIFT_KEYS})

    def synth_config(self) -> SynthConfig:
        s = self.values["synth"]
        return SynthConfig(image_size=s["image_size"], n_source=s["n_source"],
                           n_target=s["n_target_train"] + s["n_target_test"],
                           shift=self.shift(), seed=self["run.seed"])

    def division_config(self) -> DivisionConfig:
        return DivisionConfig(**self.values["division"])

    def local_config(self) -> LocalCorrectionConfig:
        return LocalCorrectionConfig(**self.values["local"])

    def train_config(self) -> TrainConfig:
        t = dict(self.values["train"])
        t.pop("feature_channels")
        t.pop("dropout_rate")
        return TrainConfig(seed=self["run.seed"], division=self.division_config(),
                           local=self.local_config(), **t)

    # ---- freezing

    def frozen_dict(self) -> dict:
        out = {}
        for section, table in self.values.items():
            out[section] = {k: v for k, v in table.items() if v is not None}
        shift = self.shift()
        for k in SHIFT_KEYS:
            out["synth"][k] = getattr(shift, k)
        out["provenance"] = dict(sorted(self.provenance.items()))
        return out

    def freeze(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(tomli_w.dumps(self.frozen_dict()))
        return path


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--section.key=value`` (or ``--section.key value``) tokens to a dict."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognised argument {tok!r}")
        name = tok[2:]
        if "=" in name:
            name, value = name.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            i += 1
            value = tokens[i]
        out[name] = value
        i += 1
    return out


def default_run_dir(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name
