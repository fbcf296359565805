"""Run configuration: dataclasses, JSON schema, loading with flag overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import jsonschema


class ConfigError(ValueError):
    """A configuration value is missing, mistyped or out of range."""


@dataclass
class ModelConfig:
    d: int = 64
    patch_size: int = 8
    img_layers: int = 1
    heads: int = 4
    adapter_hidden: int = 64
    decoder_blocks: int = 2
    head_hidden: int = 64
    use_bank: bool = True
    use_cpa: bool = True
    bias_mode: str = "cls"
    windows: list[int] = field(default_factory=lambda: [3, 6, 12])


@dataclass
class StageConfig:
    epochs: int
    warmup_epochs: int
    lr: float
    beta1: float
    beta2: float
    weight_decay: float = 0.05
    eps: float = 1e-8
    batch_size: int = 16
    clip_norm: float | None = 1.0


def _pretrain_defaults() -> StageConfig:
    return StageConfig(epochs=5, warmup_epochs=1, lr=1e-4, beta1=0.9, beta2=0.95)


def _finetune_defaults() -> StageConfig:
    return StageConfig(epochs=40, warmup_epochs=2, lr=1e-3, beta1=0.9, beta2=0.999)


@dataclass
class RunConfig:
    data: str = "data"
    out: str = "runs/default"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: StageConfig = field(default_factory=_pretrain_defaults)
    finetune: StageConfig = field(default_factory=_finetune_defaults)
    mask_ratio: float = 0.3
    tau: float = 0.07
    patience: int = 15
    val_fraction: float = 0.15
    crops: list[str] | None = None
    single_crop: str | None = None
    calendar: dict[str, list[int]] | None = None
    volatility_quantile: float = 0.7
    probe_variable: int = 0
    probe_delta: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


_STAGE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 1},
        "warmup_epochs": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 2},
        "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
    },
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "phenoyield run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {"type": "string"},
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d": {"type": "integer", "minimum": 2},
                "patch_size": {"type": "integer", "minimum": 1},
                "img_layers": {"type": "integer", "minimum": 0},
                "heads": {"type": "integer", "minimum": 1},
                "adapter_hidden": {"type": "integer", "minimum": 1},
                "decoder_blocks": {"type": "integer", "minimum": 1},
                "head_hidden": {"type": "integer", "minimum": 1},
                "use_bank": {"type": "boolean"},
                "use_cpa": {"type": "boolean"},
                "bias_mode": {"enum": ["cls", "mean"]},
                "windows": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
            },
        },
        "pretrain": _STAGE_SCHEMA,
        "finetune": _STAGE_SCHEMA,
        "mask_ratio": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "patience": {"type": "integer", "minimum": 1},
        "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "crops": {"type": ["array", "null"], "items": {"type": "string"}},
        "single_crop": {"type": ["string", "null"]},
        "calendar": {
            "type": ["object", "null"],
            "additionalProperties": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                     "minItems": 2, "maxItems": 2},
        },
        "volatility_quantile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "probe_variable": {"type": "integer", "minimum": 0},
        "probe_delta": {"type": "number"},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "calendar":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where!r}: {exc.message}") from None
    for stage in ("pretrain", "finetune"):
        st = raw.get(stage, {})
        if st.get("warmup_epochs", 0) >= st.get("epochs", 10**9):
            raise ConfigError(f"config field '{stage}.warmup_epochs': must be smaller than epochs")
    m = raw.get("model", {})
    if m.get("d", 64) % m.get("heads", 4):
        raise ConfigError("config field 'model.heads': must divide model.d")


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- JSON file <- overrides, validated against :data:`SCHEMA` once merged."""
    raw = asdict(RunConfig())
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        jsonschema_errors = list(jsonschema.Draft202012Validator(SCHEMA).iter_errors(user))
        if jsonschema_errors:
            err = jsonschema_errors[0]
            where = ".".join(str(p) for p in err.absolute_path) or "<root>"
            raise ConfigError(f"config field {where!r}: {err.message}")
        raw = _merge(raw, user)
    if overrides:
        raw = _merge(raw, overrides)
    validate(raw)
    return RunConfig(
        **{k: v for k, v in raw.items() if k not in ("model", "pretrain", "finetune")},
        model=ModelConfig(**raw["model"]),
        pretrain=StageConfig(**raw["pretrain"]),
        finetune=StageConfig(**raw["finetune"]),
    )


def config_from_dict(raw: dict) -> RunConfig:
    return load_config(None, raw)


def write_schema(path: str | Path) -> None:
    Path(path).write_text(json.dumps(SCHEMA, indent=2) + "\n", encoding="utf-8")
