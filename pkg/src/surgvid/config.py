"""Run configuration.

All knobs live in small dataclasses so a whole run can be described by one
TOML/JSON file and hashed for provenance. Defaults reproduce the reference
training setup; tests shrink them aggressively.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import pathlib
from dataclasses import dataclass, field
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class DataConfig:
    frames: int = 81          # clip length after standardization
    fps: int = 25
    width: int = 1024
    height: int = 576


@dataclass
class CodecConfig:
    backend: str = "patchify"     # "patchify" | "conv"
    temporal_factor: int = 2
    spatial_factor: int = 4
    latent_channels: int = 0      # 0 -> derived (3 * t_f * s_f^2) for patchify
    hidden_channels: int = 128    # conv backend only

    def resolved_latent_channels(self) -> int:
        if self.backend == "patchify" or self.latent_channels <= 0:
            return 3 * self.temporal_factor * self.spatial_factor ** 2
        return self.latent_channels


@dataclass
class LoraConfig:
    rank: int = 64
    alpha: float = 128.0
    dropout: float = 0.0
    # Module name fragments that receive adapters.
    targets: tuple = (
        "attn_q", "attn_k", "attn_v", "attn_out", "ff_in", "ff_out",
    )


@dataclass
class DenoiserConfig:
    token_dim: int = 512
    depth: int = 8
    heads: int = 8
    ff_mult: int = 4
    text_dim: int = 256
    text_cross_attention: bool = True
    seed: int = 0             # backbone init seed (weights are frozen)


@dataclass
class TrainerConfig:
    steps: int = 7500
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 1
    condition_drop_prob: float = 0.2
    depth_loss_weight: float = 0.1
    depth_mask_ratio: float = 0.5
    smooth_l1_beta: float = 1.0
    # >1 concentrates timestep draws near the noisy end via
    # t <- 1-(1-t)^bias; 1.0 keeps them uniform. Content that occupies few
    # tokens is only learnable from conditioning at high noise, and uniform
    # draws starve that regime.
    timestep_bias: float = 1.0
    mixed_precision: bool = False   # bfloat16 autocast when hardware allows
    seed: int = 0
    log_every: int = 50


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 3.5
    seed: int = 0


@dataclass
class RecognizerConfig:
    segment_frames: int = 16
    channels: int = 32
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    use_augmented: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    recognizer: RecognizerConfig = field(default_factory=RecognizerConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Stable short hash of the full configuration."""
        blob = json.dumps(_jsonable(self.to_dict()), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


_SECTIONS = {
    "data": DataConfig,
    "codec": CodecConfig,
    "lora": LoraConfig,
    "denoiser": DenoiserConfig,
    "trainer": TrainerConfig,
    "sampler": SamplerConfig,
    "recognizer": RecognizerConfig,
}


def _build_section(cls, raw: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(raw)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(f.default, tuple):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


def load_config(path: str | pathlib.Path) -> RunConfig:
    """Load a RunConfig from a .toml or .json file.

    Sections are merged over defaults; unknown keys are rejected so typos
    fail loudly instead of silently training with defaults.
    """
    path = pathlib.Path(path)
    if path.suffix == ".toml":
        raw = tomllib.loads(path.read_text())
    elif path.suffix == ".json":
        raw = json.loads(path.read_text())
    else:
        raise ValueError(f"config must be .toml or .json, got {path.suffix!r}")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {
        name: _build_section(cls, raw.get(name, {}))
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**kwargs)


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply `section.key=value` overrides (CLI convenience)."""
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value: {pair!r}")
        dotted, value = pair.split("=", 1)
        section_name, key = dotted.split(".", 1)
        if section_name not in _SECTIONS:
            raise ValueError(f"unknown config section {section_name!r}")
        section = getattr(cfg, section_name)
        if not hasattr(section, key):
            raise ValueError(f"unknown key {key!r} in [{section_name}]")
        current = getattr(section, key)
        setattr(section, key, _coerce(value, current))
    return cfg


def _coerce(text: str, like: Any) -> Any:
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(json.loads(text))
    return text
