"""Effective run settings merged from defaults, presets, file, and flags.

Precedence, lowest to highest: built-in defaults, the desk preset
(--desk), a JSON config file, explicit command-line flags. Every field
remembers which layer set it, so print-config can show exactly where a
value came from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .errors import DataError, UsageError
from .train import TrainConfig

# model geometry and topology
_MODEL_DEFAULTS = {
    "img_size": 64,
    "in_channels": 3,
    "base_channels": 16,
    "depths": (1, 1, 2, 1),
    "channel_multipliers": (1, 2, 4, 8),
    "embed_dim": 128,
    "topology": "parallel",
    "pooling": "both",
    "expand_ratio": 2,
}

# optimization; epochs sized for the full-scale schedule
_TRAIN_DEFAULTS = {
    "lr0": 5e-4,
    "weight_decay": 5e-2,
    "batch_size": 16,
    "epochs": 300,
    "lr_min": 0.0,
    "margin": 0.2,
    "p_identities": 4,
    "k_samples": 4,
}

DEFAULTS = {**_MODEL_DEFAULTS, **_TRAIN_DEFAULTS, "seed": 0}

# minutes-scale CPU settings: short hot schedule, identity-rich batches
DESK_PRESET = {
    "epochs": 100,
    "lr0": 2e-3,
    "batch_size": 32,
    "p_identities": 8,
    "k_samples": 4,
}

_POOLING_ALIASES = {"gap": "gap_only", "gmp": "gmp_only", "both": "both",
                    "gap_only": "gap_only", "gmp_only": "gmp_only"}


def _coerce(name: str, value):
    """Bring a file/flag value to the field's canonical type."""
    default = DEFAULTS[name]
    if isinstance(default, tuple):
        if isinstance(value, str):
            try:
                value = [int(v) for v in value.split(",") if v.strip()]
            except ValueError:
                raise UsageError(f"{name} expects comma-separated integers, got {value!r}")
        if not isinstance(value, (list, tuple)) or not value:
            raise UsageError(f"{name} expects a non-empty integer sequence, got {value!r}")
        out = []
        for v in value:
            if not isinstance(v, int) or isinstance(v, bool):
                raise UsageError(f"{name} entries must be integers, got {v!r}")
            out.append(v)
        return tuple(out)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{name} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{name} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{name} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise UsageError(f"{name} expects a string, got {value!r}")
        if name == "pooling":
            if value not in _POOLING_ALIASES:
                raise UsageError(f"pooling must be one of both/gap/gmp, got {value!r}")
            return _POOLING_ALIASES[value]
        return value
    raise UsageError(f"unsupported config field {name!r}")


@dataclass
class RunConfig:
    img_size: int = 64
    in_channels: int = 3
    base_channels: int = 16
    depths: tuple[int, ...] = (1, 1, 2, 1)
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    embed_dim: int = 128
    topology: str = "parallel"
    pooling: str = "both"
    expand_ratio: int = 2
    lr0: float = 5e-4
    weight_decay: float = 5e-2
    batch_size: int = 16
    epochs: int = 300
    lr_min: float = 0.0
    margin: float = 0.2
    p_identities: int = 4
    k_samples: int = 4
    seed: int = 0
    sources: dict = field(default_factory=dict, compare=False)

    @classmethod
    def resolve(cls, config_file=None, desk: bool = False, flags: dict | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        sources = {k: "default" for k in values}

        def apply(layer: dict, origin: str):
            for k, v in layer.items():
                if k not in DEFAULTS:
                    exc = DataError if origin == "file" else UsageError
                    raise exc(f"unknown config key {k!r} (from {origin})")
                values[k] = _coerce(k, v)
                sources[k] = origin

        if desk:
            apply(DESK_PRESET, "desk")
        if config_file is not None:
            path = Path(config_file)
            try:
                raw = json.loads(path.read_text())
            except OSError as e:
                raise DataError(f"cannot read config file {path}: {e}") from None
            except json.JSONDecodeError as e:
                raise DataError(f"config file {path} is not valid JSON: {e}") from None
            if not isinstance(raw, dict):
                raise DataError(f"config file {path} must hold a JSON object")
            apply(raw, "file")
        if flags:
            apply({k: v for k, v in flags.items() if v is not None}, "flag")

        rc = cls(**values, sources=sources)
        rc.backbone_config()  # validates geometry
        rc.train_config()  # validates optimization settings
        return rc

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            in_channels=self.in_channels,
            img_size=self.img_size,
            base_channels=self.base_channels,
            depths=self.depths,
            channel_multipliers=self.channel_multipliers,
            embed_dim=self.embed_dim,
            mode=self.topology,
            pooling=self.pooling,
            expand_ratio=self.expand_ratio,
        ).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_min=self.lr_min,
            margin=self.margin,
            seed=self.seed,
            p_identities=self.p_identities,
            k_samples=self.k_samples,
        ).validate()

    def to_json(self) -> str:
        body = {}
        for f in fields(self):
            if f.name == "sources":
                continue
            v = getattr(self, f.name)
            body[f.name] = list(v) if isinstance(v, tuple) else v
        return json.dumps({"config": body, "sources": self.sources},
                          indent=2, sort_keys=True)
