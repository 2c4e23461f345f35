"""YAML run configuration with strict schema validation.

Every section is optional; unknown keys anywhere are an error. Example::

    model:
      width: 1.0          # family width factor k (n_model=192k, n_ssm=256k)
      depth: 3
      activation: gelu
      relufied: false
    stft: {sample_rate: 16000, window_len: 512, hop: 128, fft_size: 512, mask_max: 2.0}
    prune: {target: 0.9, epochs: 10, steps: 3000}
    quant: {weight_bits: 8, lambda_bits: 16, act_bits: 16, headroom: 1.25}
    family: {widths: [0.25, 0.5, 1.0], sparse_widths: [0.5, 1.0, 2.0], target: 0.9}
    suite: {mixtures: 4, seconds: 1.0, snr_db: 5.0, seed: 0}
    workers: 1
    seed: 0
    paths: {out_dir: .}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .audio import StftConfig
from .quantizer import QuantRecipe
from .s5 import ModelSpec

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "model": {"width": float, "depth": int, "n_input": int, "n_output": int, "n_model": int, "n_ssm": int,
              "activation": str, "relufied": bool},
    "stft": {"sample_rate": int, "window_len": int, "hop": int, "fft_size": int, "window": str, "mask_max": float},
    "prune": {"target": float, "epochs": int, "steps": int, "initial": float, "start": int, "end": int},
    "quant": {"weight_bits": int, "lambda_bits": int, "act_bits": int, "headroom": float},
    "family": {"widths": list, "sparse_widths": list, "target": float},
    "suite": {"mixtures": int, "seconds": float, "snr_db": float, "seed": int},
    "paths": {"out_dir": str},
    "workers": int,
    "seed": int,
}


def _check(section: str, value, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{section}: expected {kind.__name__}, got {type(value).__name__}")
    return value


@dataclass(frozen=True)
class RunConfig:
    model: dict = field(default_factory=dict)
    stft: dict = field(default_factory=dict)
    prune: dict = field(default_factory=dict)
    quant: dict = field(default_factory=dict)
    family: dict = field(default_factory=dict)
    suite: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    workers: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, raw) -> "RunConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(raw) - set(_SCHEMA)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
        out = {}
        for key, value in raw.items():
            schema = _SCHEMA[key]
            if isinstance(schema, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"{key}: expected a mapping")
                bad = set(value) - set(schema)
                if bad:
                    raise ConfigError(f"{key}: unknown keys: {', '.join(sorted(bad))}")
                out[key] = {k: _check(f"{key}.{k}", v, schema[k]) for k, v in value.items()}
            else:
                out[key] = _check(key, value, schema)
        cfg = cls(**out)
        cfg.model_spec()
        cfg.stft_config()
        cfg.recipe()
        if cfg.workers < 1:
            raise ConfigError("workers must be >= 1")
        for k in ("widths", "sparse_widths"):
            for w in cfg.family.get(k, []):
                if not isinstance(w, (int, float)) or isinstance(w, bool) or w <= 0:
                    raise ConfigError(f"family.{k}: widths must be positive numbers")
        return cfg

    def model_spec(self) -> ModelSpec:
        m = dict(self.model)
        k = m.pop("width", 1.0)
        try:
            return ModelSpec.scaled(k, **m)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc

    def stft_config(self) -> StftConfig:
        try:
            return StftConfig(**self.stft)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"stft: {exc}") from exc

    def recipe(self) -> QuantRecipe:
        q = {k: v for k, v in self.quant.items() if k != "headroom"}
        for k, v in q.items():
            if v not in (8, 16):
                raise ConfigError(f"quant.{k}: bit width must be 8 or 16")
        return QuantRecipe(**q)

    @property
    def headroom(self) -> float:
        return float(self.quant.get("headroom", 1.25))


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}".replace("\n", " ")) from exc
    return RunConfig.from_dict(raw)
