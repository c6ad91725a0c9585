"""Model and run configuration with strict schema validation.

Config files are JSON or TOML with two sections, `model` and `train`,
mirroring ModelConfig and the optimizer/run fields of RunConfig. Unknown
keys are rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

FUSION_KINDS = ("mhsca", "mhca", "mhlca")
RADAR_CHANNELS = "RVP"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 640
    base_channels: int = 64       # 64 reproduces the published stage widths
    reg_max: int = 16
    agent_length: int = 49
    nms_iou: float = 0.65
    conf_threshold: float = 0.25
    radar_channels: str = "RVP"   # subset of R/V/P kept in the radar raster
    use_radar: bool = True        # False = vision-only model, radar never read
    use_arw: bool = True          # False = plain element-wise addition fusion
    fusion: str = "mhsca"
    stage_heads: tuple = (4, 4, 8)
    text_dim: int = 64
    text_heads: int = 2
    max_tokens: int = 50
    text_trainable: bool = True
    sppm_position: str = "res"    # "res" (default) or "pan"

    def validate(self) -> "ModelConfig":
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be a multiple of 32")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion {self.fusion!r} not one of {FUSION_KINDS}")
        subset = self.radar_channels.upper()
        if not subset or any(c not in RADAR_CHANNELS for c in subset):
            raise ConfigError(f"radar_channels {self.radar_channels!r} must be a subset of RVP")
        if self.reg_max < 2:
            raise ConfigError("reg_max must be at least 2")
        if not 0 < self.nms_iou < 1:
            raise ConfigError("nms_iou must lie in (0, 1)")
        if self.sppm_position not in ("res", "pan"):
            raise ConfigError("sppm_position must be 'res' or 'pan'")
        for i, heads in zip((2, 3, 4), self.stage_heads):
            ch = self.base_channels * 2 ** (i - 1)
            if ch % heads:
                raise ConfigError(f"stage {i} channels {ch} not divisible by {heads} heads")
        return self

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2 ** (i - 1) for i in (2, 3, 4)]

    def stage_spatial(self, stage: int) -> int:
        return self.input_size // 2 ** (stage + 1)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    momentum: float = 0.937
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    epochs: int = 30
    batch_size: int = 8
    dataset: str = ""
    seed: int = 0
    out_dir: str = "runs/default"
    freeze_bn_after: int = 0  # steps; 0 = never freeze
    # keep sigma at 1 for this many steps: the adaptive weights otherwise
    # chase the large early box loss and starve its gradient
    uncertainty_freeze_steps: int = 0
    clip_grad_norm: float = 10.0  # global-norm clip; 0 disables

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule {self.schedule!r} not one of cosine/constant")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["stage_heads"] = list(self.model.stage_heads)
        return {"model": d.pop("model"), "train": d}


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(RunConfig)} - {"model"}


def _build(data: dict) -> RunConfig:
    unknown_sections = set(data) - {"model", "train"}
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    model_raw = dict(data.get("model", {}))
    train_raw = dict(data.get("train", {}))
    bad = set(model_raw) - _MODEL_FIELDS
    if bad:
        raise ConfigError(f"unknown model keys: {sorted(bad)}")
    bad = set(train_raw) - _TRAIN_FIELDS
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    if "stage_heads" in model_raw:
        model_raw["stage_heads"] = tuple(model_raw["stage_heads"])
    cfg = RunConfig(model=ModelConfig(**model_raw), **train_raw)
    return cfg.validate()


def load_run_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(text)
    elif path.suffix == ".json":
        data = json.loads(text)
    else:
        raise ConfigError(f"config must be .json or .toml, got {path.suffix!r}")
    return _build(data)


def dump_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
