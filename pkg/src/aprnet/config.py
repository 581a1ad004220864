"""Flat ``key = value`` run configuration with typed defaults and ``--set`` overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .dataset import SynthConfig
from .model import ModelConfig
from .seeding import sub_seed
from .trainer import TrainConfig

# key -> default; the default's type decides how strings are parsed
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.schema": "",
    "data.annotations": "",
    "data.manifest": "",
    "data.embeddings": "",
    "synth.num_identities": 100,
    "synth.num_val_identities": 200,
    "synth.num_test_identities": 100,
    "synth.num_cameras": 4,
    "synth.samples_per_camera": 4,
    "synth.dim": 64,
    "synth.class_counts": [2, 2, 2, 2, 2, 2, 2, 2, 2, 4, 8, 9],
    "synth.noise": 1.0,
    "synth.coupling": 1.5,
    "synth.camera_scale": 1.0,
    "synth.num_distractors": 0,
    "synth.num_junk": 0,
    "model.hidden_dims": [64],
    "model.dropout": 0.0,
    "model.lambda": 8.0,
    "model.attribute_heads": True,
    "train.epochs": 100,
    "train.batch_size": 64,
    "train.lr_initial": 0.005,
    "train.lr_final": 0.0005,
    "train.lr_switch_epoch": 90,
    "train.momentum": 0.9,
    "train.weight_decay": 0.0,
    "train.checkpoint_every": 0,
    "train.record_time": False,
    "eval.checkpoint": "",
    "eval.query_split": "query",
    "eval.gallery_split": "gallery",
    "eval.ranks": [1, 5, 10, 20],
    "eval.max_rank": 50,
    "eval.camera_pairs": True,
    "eval.attributes": True,
    "eval.tile": 256,
    "sweep.lambdas": [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
    "scale.sizes": [0, 1000, 5000, 20000],
    "ablate.attributes": [],
}

PATH_KEYS = ("data.schema", "data.annotations", "data.manifest", "data.embeddings")


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [t for t in raw.replace(" ", "").split(",") if t]
            if key == "ablate.attributes":
                return items
            kind = float if key in ("sweep.lambdas",) else int
            return [kind(t) for t in items]
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_assignments(lines, source: str = "config") -> dict:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} does not exist")
            values.update(parse_assignments(p.read_text().splitlines(), str(p)))
        values.update(parse_assignments(overrides, "--set"))
        if seed is not None:
            values["seed"] = int(seed)
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def require_paths(self, *keys: str) -> None:
        for key in keys:
            if not self.values[key]:
                raise ConfigError(f"{key} is not set")
            if not Path(self.values[key]).exists():
                raise ConfigError(f"{key}: {self.values[key]} does not exist")

    def sub_seed(self, name: str) -> int:
        return int(sub_seed(self.values["seed"], name).generate_state(1)[0])

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**{k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("synth.")})

    def model_config(self, num_identities: int, class_counts, input_dim: int) -> ModelConfig:
        counts = tuple(class_counts) if self.values["model.attribute_heads"] else ()
        return ModelConfig(
            input_dim=input_dim,
            num_identities=num_identities,
            attribute_class_counts=counts,
            hidden_dims=tuple(self.values["model.hidden_dims"]),
            dropout_rate=self.values["model.dropout"],
            lam=self.values["model.lambda"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"], lr_initial=v["train.lr_initial"],
            lr_final=v["train.lr_final"], lr_switch_epoch=v["train.lr_switch_epoch"], momentum=v["train.momentum"],
            seed=self.sub_seed("train"), weight_decay=v["train.weight_decay"],
        )

    def to_json(self, command: str) -> str:
        return json.dumps({"command": command, "config": self.values}, indent=2, sort_keys=True) + "\n"
