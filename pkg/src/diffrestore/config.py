"""Run configuration: typed sections, JSON documents, flag overrides.

A run is described by one JSON document whose top-level keys name sections
(model, schedule, optimizer, train, guidance, degrade, prompts, curate,
paths).  Command-line flags override individual keys after the document is
read.  Desk-scale defaults run on a CPU in minutes; the paper-scale preset
records the reference settings (batch 128, 1024x1024 images, T=1000) and is
not expected to run locally.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig


class ConfigError(ValueError):
    """Invalid, inconsistent, or missing run configuration."""


@dataclass
class ModelSection:
    latent_hw: int = 16
    latent_channels: int = 3
    patch_size: int = 4
    hidden_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    text_dim: int = 16
    text_max_tokens: int = 32
    num_experts: int = 3
    remover_width: int = 16
    scale: int = 4
    prompt: str = "a clean high quality photo"
    negative_prompt: str = ""

    def backbone_config(self) -> BackboneConfig:
        try:
            return BackboneConfig(latent_hw=self.latent_hw,
                                  latent_channels=self.latent_channels,
                                  patch_size=self.patch_size,
                                  hidden_dim=self.hidden_dim,
                                  num_blocks=self.num_blocks,
                                  num_heads=self.num_heads,
                                  text_dim=self.text_dim,
                                  max_text_tokens=self.text_max_tokens)
        except ValueError as exc:
            raise ConfigError(f"model section: {exc}") from exc

    def validate(self) -> None:
        self.backbone_config()
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")
        if self.latent_hw % self.scale != 0:
            raise ConfigError("latent_hw must be divisible by scale")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if self.remover_width < 1:
            raise ConfigError("remover_width must be >= 1")


@dataclass
class ScheduleSection:
    kind: str = "cosine"
    num_steps: int = 50

    def validate(self) -> None:
        if self.kind not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.num_steps < 1:
            raise ConfigError("schedule num_steps must be >= 1")


@dataclass
class OptimizerSection:
    kind: str = "adamw"
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self) -> None:
        if self.kind != "adamw":
            raise ConfigError(f"unsupported optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), "
                              f"got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def build(self, params):
        import torch
        return torch.optim.AdamW(params, lr=self.lr, betas=self.betas,
                                 weight_decay=self.weight_decay)


@dataclass
class TrainSection:
    steps: int = 5000
    batch_size: int = 8
    checkpoint_every: int = 500
    log_every: int = 50
    seed: int = 0
    text_dropout: float = 0.1
    remover_steps: int = 0
    remover_lr: float = 5e-3

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("train steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ConfigError("bad checkpoint_every/log_every")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if not (0.0 <= self.text_dropout <= 1.0):
            raise ConfigError("text_dropout must be in [0, 1]")
        if self.remover_steps < 0 or self.remover_lr <= 0:
            raise ConfigError("bad remover settings")


@dataclass
class GuidanceSection:
    omega: float = 4.5
    steps: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("guidance steps must be >= 1")
        if self.seed < 0:
            raise ConfigError("guidance seed must be >= 0")


@dataclass
class PromptsSection:
    num_pos: int = 8
    num_neg: int = 8
    pos_init_text: str = "clean sharp detailed photo"
    neg_init_text: str = "blurry noisy compressed dirty"

    def validate(self) -> None:
        if self.num_pos < 0 or self.num_neg < 0:
            raise ConfigError("token counts must be >= 0")


@dataclass
class CurateSection:
    scene_texts: tuple[str, ...] = ()
    threshold: float = 0.5

    def __post_init__(self):
        self.scene_texts = tuple(self.scene_texts)

    def validate(self) -> None:
        if not (0.0 <= self.threshold <= 1.0):
            raise ConfigError("threshold must be in [0, 1]")


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    train: TrainSection = field(default_factory=TrainSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    prompts: PromptsSection = field(default_factory=PromptsSection)
    curate: CurateSection = field(default_factory=CurateSection)
    degrade: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def validate(self) -> None:
        for section in (self.model, self.schedule, self.optimizer,
                        self.train, self.guidance, self.prompts, self.curate):
            section.validate()


_SECTIONS = {"model": ModelSection, "schedule": ScheduleSection,
             "optimizer": OptimizerSection, "train": TrainSection,
             "guidance": GuidanceSection, "prompts": PromptsSection,
             "curate": CurateSection}


def _build_section(cls, data: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(extra)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    extra = set(data) - set(_SECTIONS) - {"degrade", "paths"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    kwargs = {name: _build_section(cls, data.get(name, {}), name)
              for name, cls in _SECTIONS.items()}
    config = RunConfig(degrade=dict(data.get("degrade", {})),
                       paths=dict(data.get("paths", {})), **kwargs)
    config.validate()
    return config


def config_to_dict(config: RunConfig) -> dict:
    out = {name: dataclasses.asdict(getattr(config, name))
           for name in _SECTIONS}
    out["degrade"] = dict(config.degrade)
    out["paths"] = dict(config.paths)
    return out


def load_config(path: str | None) -> RunConfig:
    """Read a run document; a missing path means all defaults."""
    if path is None:
        return config_from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config_from_dict(data)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """New config with dotted keys replaced, e.g. {"optimizer.lr": 1e-4}.

    None values are ignored so optional CLI flags can be passed straight
    through.
    """
    data = config_to_dict(config)
    for key, value in overrides.items():
        if value is None:
            continue
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node and parts[0] != "paths":
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def require_path(path: str | None, what: str) -> Path:
    """Existence check shared by all commands that read inputs."""
    if not path:
        raise ConfigError(f"missing required path for {what}")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} path does not exist: {path}")
    return p


PAPER_SCALE_PRESET = {
    "model": {"latent_hw": 128, "latent_channels": 4, "patch_size": 2,
              "hidden_dim": 1152, "num_blocks": 28, "num_heads": 16,
              "text_dim": 4096, "scale": 4},
    "schedule": {"kind": "cosine", "num_steps": 1000},
    "optimizer": {"kind": "adamw", "lr": 5e-5},
    "train": {"steps": 100000, "batch_size": 128},
    "guidance": {"omega": 4.5, "steps": 50},
}
