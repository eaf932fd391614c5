"""Experiment configuration: named presets overlaid with ``section.field=value`` lines.

Example file::

    # toy run with a longer schedule
    train.total_steps = 3000
    train.warmup_steps = 187
    xc.dropout_p = 0.1
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .decoder import DecoderConfig
from .encoders import BidirEncoderConfig, EncoderKind
from .synth_data import GenConfig
from .trainer import TrainConfig
from .xc_model import XCConfig


class ConfigKeyError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True)
class PretrainConfig:
    """Base-decoder pretraining; only used when no base checkpoint is supplied."""

    enabled: bool = False
    n_records: int = 5000
    context_len: int = 64
    base_lr: float = 3e-3
    warmup_steps: int = 100
    total_steps: int = 1600
    batch_size: int = 32
    seed: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.base_lr, warmup_steps=self.warmup_steps, total_steps=self.total_steps,
                           batch_size=self.batch_size, weight_decay=0.0, seed=self.seed)

    def gen_config(self, layout=None) -> GenConfig:
        kw = {} if layout is None else {"layout": layout}
        return GenConfig(n_records=self.n_records, context_len=self.context_len, seed=self.seed + 1000, **kw)


@dataclass(frozen=True)
class ExperimentConfig:
    decoder: DecoderConfig
    xc: XCConfig
    train: TrainConfig
    data: GenConfig
    encoder: BidirEncoderConfig | None = None
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.xc.encoder_kind is EncoderKind.BIDIRECTIONAL and self.encoder is None:
            raise ValueError("bidirectional encoder kind needs an [encoder] section")
        if self.data.layout.size != self.decoder.vocab_size:
            raise ValueError(f"data vocabulary ({self.data.layout.size}) != decoder vocab_size "
                             f"({self.decoder.vocab_size})")


def _toy() -> ExperimentConfig:
    data = GenConfig(n_records=5000, context_len=64, seed=0)
    V = data.layout.size
    dec = DecoderConfig(n_layers=4, d_model=64, n_heads=4, head_dim=16, vocab_size=V, max_seq=160)
    xc = XCConfig(n_cross_layers=1, skip=3, final_layer=True, cross_hidden=64, cross_n_heads=4,
                  cross_n_kv_heads=4, dropout_p=0.1, encoder_kind=EncoderKind.BIDIRECTIONAL)
    enc = BidirEncoderConfig(n_layers=2, d_enc=64, n_heads=4, vocab_size=V, base_max_positions=data.context_len)
    return ExperimentConfig(decoder=dec, xc=xc, train=TrainConfig.toy(total_steps=3000, warmup_steps=187),
                            data=data, encoder=enc, pretrain=PretrainConfig(enabled=True, total_steps=400,
                                                                            warmup_steps=40))


def _reference() -> ExperimentConfig:
    data = GenConfig()
    dec = DecoderConfig(n_layers=32, d_model=4096, n_heads=32, head_dim=128, vocab_size=data.layout.size,
                        max_seq=4096, mlp_hidden=11008)
    return ExperimentConfig(decoder=dec, xc=XCConfig(), train=TrainConfig.reference(), data=data)


PRESETS = {"toy": _toy, "reference": _reference}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigKeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


# ---------------------------------------------------------------------------
# key=value overlay


def _coerce(raw: str, current: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, enum.Enum):
            return type(current)(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ValueError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from e


def parse_lines(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _default_encoder(config: ExperimentConfig) -> BidirEncoderConfig:
    return BidirEncoderConfig(n_layers=2, d_enc=config.decoder.d_model, n_heads=config.decoder.n_heads,
                              vocab_size=config.decoder.vocab_size, base_max_positions=config.data.context_len)


def apply_overrides(config: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for key, raw in overrides.items():
        if "." not in key:
            if key not in {f.name for f in fields(config)} or dataclasses.is_dataclass(getattr(config, key)):
                raise ConfigKeyError(f"unknown config key {key!r}")
            top[key] = _coerce(raw, getattr(config, key), key)
            continue
        sec, name = key.split(".", 1)
        obj = getattr(config, sec, None) if sec in {f.name for f in fields(config)} else None
        if sec == "encoder" and obj is None:
            obj = _default_encoder(config)
        if obj is None or not dataclasses.is_dataclass(obj):
            raise ConfigKeyError(f"unknown config key {key!r}")
        if name not in {f.name for f in fields(obj)} or name == "layout":
            raise ConfigKeyError(f"unknown config key {key!r}")
        sections.setdefault(sec, {})[name] = _coerce(raw, getattr(obj, name), key)
    updates = dict(top)
    for sec, kv in sections.items():
        base = getattr(config, sec)
        if base is None:
            base = _default_encoder(config)
        updates[sec] = replace(base, **kv)
    return replace(config, **updates)


def load_config(path=None, preset_name: str = "toy", overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = preset(preset_name)
    if path is not None:
        cfg = apply_overrides(cfg, parse_lines(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def to_flat(config: ExperimentConfig) -> dict[str, Any]:
    """Snapshot as ``section.field -> value`` (JSON friendly)."""
    out: dict[str, Any] = {"seed": config.seed}
    for f in fields(config):
        obj = getattr(config, f.name)
        if not dataclasses.is_dataclass(obj):
            continue
        for g in fields(obj):
            v = getattr(obj, g.name)
            if dataclasses.is_dataclass(v):
                continue
            out[f"{f.name}.{g.name}"] = v.value if isinstance(v, enum.Enum) else v
    return out
