"""Flat `section.key = value` run configuration.

A RunConfig groups the per-module dataclass configs.  Config files are
plain text, one assignment per line, with `#` comments; overrides arrive
as repeated `--set section.key=value` flags.  The canonical resolved
snapshot (sorted lines) is what gets hashed into the run id and embedded
in checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import VOCAB, DatasetConfig
from .distillation import ProjectionHeadConfig
from .encoders import ImageEncoderConfig, TextEncoderConfig
from .multicrop import CropSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64  # full-scale reference: 16384
    total_examples_seen: int = 2_000_000
    base_lr: float = 1e-3
    warmup_steps: int = 500  # full-scale reference: 50000
    cooldown_steps: int = 500  # full-scale reference: 50000
    w_dist: float = 1.0  # 0 recovers the contrastive-only baseline
    lam: float = 0.966  # teacher EMA factor
    m_center: float = 0.9
    tau_t: float = 0.04
    tau_s: float = 0.1
    proj_dim: int = 256  # K; full-scale reference: 65536
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    contrastive_global_views: bool = True  # include global crops in the pair loss
    ema_enabled: bool = True
    distill_global_global: bool = False
    checkpoint_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.w_dist < 0:
            raise ConfigError(f"w_dist must be >= 0, got {self.w_dist}")
        total = self.total_steps
        if self.warmup_steps + self.cooldown_steps > total:
            raise ConfigError(
                f"warmup ({self.warmup_steps}) + cooldown ({self.cooldown_steps}) "
                f"exceed total steps ({total})"
            )

    @property
    def total_steps(self) -> int:
        return -(-self.total_examples_seen // self.batch_size)


@dataclass(frozen=True)
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    text: TextEncoderConfig = field(default_factory=lambda: TextEncoderConfig(vocab_size=len(VOCAB)))
    crops: CropSpec = field(default_factory=CropSpec)
    trainer: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.text.embed_dim != self.image.embed_dim:
            raise ConfigError(
                f"towers must share the embedding space: text J={self.text.embed_dim} "
                f"vs image J={self.image.embed_dim}"
            )
        if not self.trainer.proj_dim > self.image.embed_dim:
            raise ConfigError(
                f"projection dim K={self.trainer.proj_dim} must exceed J={self.image.embed_dim}"
            )


_SECTIONS = ("data", "image", "text", "crops", "trainer")


def default_config() -> RunConfig:
    return RunConfig()


def _parse_value(ftype, text: str, key: str):
    text = text.strip()
    try:
        if ftype is bool or ftype == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if ftype is int or ftype == "int":
            return int(text)
        if ftype is float or ftype == "float":
            return float(text)
        if ftype is str or ftype == "str":
            return text
        # tuple fields like area ranges: "0.4, 1.0"
        if str(ftype).startswith("tuple") or getattr(ftype, "__origin__", None) is tuple:
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(float(p) for p in parts)
    except ValueError:
        pass
    raise ConfigError(f"cannot parse value {text!r} for key {key!r} (expected {ftype})")


def valid_keys() -> list[str]:
    cfg = default_config()
    keys = []
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        keys += [f"{section}.{f.name}" for f in dataclasses.fields(sub)]
    return keys


def apply_assignments(cfg: RunConfig, assignments: dict[str, str]) -> RunConfig:
    """Return a new RunConfig with `section.key -> raw value` applied."""
    staged: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, raw in assignments.items():
        if "." not in key:
            raise ConfigError(f"invalid key {key!r}; valid keys: {', '.join(valid_keys())}")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r}; valid keys: {', '.join(valid_keys())}")
        sub = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(sub)}
        if name not in fields:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
        staged[section][name] = _parse_value(fields[name].type, raw, key)
    updates = {}
    for section, kv in staged.items():
        if kv:
            updates[section] = dataclasses.replace(getattr(cfg, section), **kv)
    return dataclasses.replace(cfg, **updates)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    assignments = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        assignments[key.strip()] = raw.strip()
    return apply_assignments(base or default_config(), assignments)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    assignments = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        assignments[key.strip()] = raw.strip()
    return apply_assignments(cfg, assignments)


def resolve_text(cfg: RunConfig) -> str:
    """Canonical snapshot: every key, sorted, one per line."""
    lines = []
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            v = getattr(sub, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(resolve_text(cfg).encode()).hexdigest()[:12]
