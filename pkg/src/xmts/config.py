"""Experiment configuration: defaults, INI-file parsing, dotted-path
overrides, and a canonical serialized form whose hash fingerprints a run.

Every hyperparameter used by the stage chain is addressable as
``section.key``.  Unknown sections or keys are rejected, and values are
coerced to the type of the corresponding default (int, float, bool, str, or
comma-separated list of numbers).
"""

from __future__ import annotations

import configparser
import hashlib
import io
from typing import Any

from .autodiff import XmtsError


class ConfigError(XmtsError):
    """Bad configuration file, key, or value."""


DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {
        "seed": 2024,
    },
    "data": {
        "num_classes": 4,
        "train_size": 200,
        "valid_size": 50,
        "test_size": 100,
        "content_tokens": 12,
        "frame_dim": 8,
        "frames_per_token_min": 4,
        "frames_per_token_max": 8,
        "noise_sigma": 0.05,
        "min_tokens": 5,
        "max_tokens": 9,
        "rich_markers": False,
    },
    "asr": {
        "dim": 16,
        "heads": 2,
        "ffn_dim": 32,
        "enc_layers": 4,
        "dec_layers": 2,
        "ctc_weight": 0.3,
        "label_smoothing": 0.0,
        "epochs": 24,
        "batch_size": 8,
        "average_best": 7,
        "warmup_steps": 150,
        "lr_coefficient": 0.2,
        "specaug_time_masks": 1,
        "specaug_time_width": 6,
        "specaug_freq_masks": 1,
        "specaug_freq_width": 2,
    },
    "nlu": {
        "dim": 24,
        "heads": 3,
        "ffn_dim": 48,
        "layers": 4,
        "mask_prob": 0.15,
        "mlm_steps": 1500,
        "mlm_batch": 8,
        "mlm_warmup": 300,
        "mlm_lr_coefficient": 0.35,
        "classify_pairs": 600,
        "similarity_pairs": 400,
        "pair_steps": 600,
        "pair_batch": 8,
        "pair_warmup": 150,
        "pair_lr_coefficient": 0.3,
    },
    "slu": {
        "objective": "L1",
        "asr_layers": 2,
        "nlu_layers": 0,
        "epochs": 30,
        "batch_size": 8,
        "warmup_steps": 250,
        "lr_coefficient": 0.5,
        "ablate_asr_layers": [0, 1, 2],
        "ablate_nlu_layers": [0, 1],
        "ablate_epochs": 10,
    },
    "eval": {
        "clf_lrs": [0.001, 0.01],
        "clf_steps": [500, 2000],
        "fewshot_n": [0, 1, 2, 3, 4, 10],
        "fewshot_steps": 150,
        "fewshot_lr": 0.002,
        "fewshot_batch": 20,
        "fewshot_encoder_layers": 2,
        "bucket_width": 10.0,
        "noisy_wer_target": 0.25,
        "noisy_sigma_ladder": [0.2, 0.35, 0.5, 0.7, 1.0, 1.4],
    },
}


def _coerce(section: str, key: str, raw: Any, default: Any):
    path = f"{section}.{key}"
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            if isinstance(raw, float) and raw != int(raw):
                raise ValueError(raw)
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            elem = default[0]
            if isinstance(raw, (list, tuple)):
                items = list(raw)
            else:
                items = [p for p in str(raw).replace("[", "").replace("]", "").split(",")
                         if p.strip() != ""]
            return [int(p) if isinstance(elem, int) else float(p) for p in items]
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"type mismatch for key {path}: {raw!r}") from None


class ExperimentConfig:
    """A fully resolved configuration (defaults + file + overrides)."""

    def __init__(self, values: dict[str, dict[str, Any]]):
        self._values = values

    def get(self, path: str):
        section, _, key = path.partition(".")
        try:
            return self._values[section][key]
        except KeyError:
            raise ConfigError(f"unknown configuration key {path}") from None

    def section(self, name: str) -> dict[str, Any]:
        if name not in self._values:
            raise ConfigError(f"unknown configuration section {name}")
        return dict(self._values[name])

    def with_overrides(self, overrides: list[str]) -> "ExperimentConfig":
        values = {s: dict(kv) for s, kv in self._values.items()}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like section.key=value: {item!r}")
            path, _, raw = item.partition("=")
            section, _, key = path.strip().partition(".")
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"unknown configuration key {path.strip()}")
            values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
        return ExperimentConfig(values)

    def to_text(self) -> str:
        """Canonical INI form: DEFAULTS ordering regardless of input order."""
        out = io.StringIO()
        for section in DEFAULTS:
            out.write(f"[{section}]\n")
            for key in DEFAULTS[section]:
                value = self._values[section][key]
                if isinstance(value, bool):
                    text = "true" if value else "false"
                elif isinstance(value, list):
                    text = ", ".join(repr(v) if isinstance(v, float) else str(v)
                                     for v in value)
                else:
                    text = str(value)
                out.write(f"{key} = {text}\n")
            out.write("\n")
        return out.getvalue()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def resolve_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """defaults + file + overrides, later wins; the result is fully
    materialized so it can be persisted next to the run outputs."""
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err}") from None
        except configparser.Error as err:
            raise ConfigError(f"cannot parse config file {path}: {err}") from None
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown configuration section {section}")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown configuration key {section}.{key}")
                values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
    cfg = ExperimentConfig(values)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
