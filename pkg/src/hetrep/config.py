"""Flat ``key = value`` configuration files and the namespaced run config."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .errors import ValidationError


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValidationError(f"line {lineno}: empty key")
        if key in out:
            raise ValidationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


# Every tunable, with its default. Values are kept as strings in files and
# coerced to the type of the default here.
DEFAULTS: dict[str, Any] = {
    "graph.alpha": 0.86,
    "graph.d_min": 10,
    "graph.d_max": 10000,
    "graph.seed": 0,
    "sampler.subsets": "PB:Pin=25,Board=75;PP:Pin=50",
    "sampler.budget": 10000,
    "sampler.restart_prob": 0.5,
    "loss.lambda": 20.0,
    "loss.chunk_size": 64,
    "loss.pair_weight": 1.0,
    "loss.feat_weight": 1.0,
    "loss.seq_weight": 1.0,
    "loss.source_weights": "",
    "model.dim": 64,
    "model.layers": 1,
    "model.heads": 4,
    "model.mlp_dim": 256,
    "model.feat_hidden": 128,
    "model.feat_layers": 2,
    "model.text_dim": 32,
    "model.seq_dim": 64,
    "model.seq_layers": 1,
    "model.seq_heads": 4,
    "model.seq_mlp_dim": 128,
    "model.dtype": "float32",
    "train.steps": 1000,
    "train.batch_size": 64,
    "train.seq_batch_size": 16,
    "train.random_negatives": 256,
    "train.lr": 0.005,
    "train.warmup_frac": 0.05,
    "train.weight_decay": 0.01,
    "train.t_max": 8,
    "train.future_window": 4,
    "train.eval_every": 0,
    "train.eval_negatives": 10000,
    "train.seed": 0,
    "train.in_batch": True,
    "train.pair_types": "Pin:Pin,Board:Pin",
    "train.eval_pairs": 500,
    "train.eval_user_frac": 0.2,
    "train.prefetch": False,
    "world.clusters": 8,
    "world.pins_per_cluster": 250,
    "world.boards_per_cluster": 60,
    "world.p_intra": 0.05,
    "world.p_inter": 0.0005,
    "world.users": 800,
    "world.seq_len": 12,
    "world.drift": 0.1,
    "world.seed": 0,
    "world.visual_dim": 16,
    "world.feature_noise": 4.5,
    "world.pin_link": 0.3,
    "world.words_per_cluster": 20,
    "world.title_cluster_words": 2,
    "world.vocab": 4096,
}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(value, type(default)) and not (isinstance(default, float) and isinstance(value, bool)):
        return value
    try:
        if isinstance(default, bool):
            flag = str(value).strip().lower()
            if flag not in ("1", "true", "yes", "0", "false", "no"):
                raise ValueError(value)
            return flag in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ValidationError(f"config key {key!r}: cannot parse {value!r}") from None


class RunConfig:
    """Effective configuration: defaults < config file < explicit overrides."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: dict[str, Any]) -> None:
        for key, value in values.items():
            if key not in DEFAULTS:
                raise ValidationError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg.update(parse_kv_text(Path(path).read_text()))
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))
