"""
Configuration management for condition-aware fusion experiments.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .condition import PromptDetail
from .exceptions import ConfigurationError
from .fusion import CTTarget, FusionKind, Modality
from .nnblocks import BackboneConfig

logger = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    """Architecture of the fusion network."""

    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(default=32, gt=0, description="Scene height and width in pixels")
    num_classes: int = Field(default=6, gt=1, description="Number of semantic classes")
    backbone: BackboneConfig = Field(default_factory=BackboneConfig, description="Backbone widths and depth")
    ct_dim: int = Field(default=64, gt=0, description="Condition Token dimension")
    transformer_heads: int = Field(default=2, gt=0, description="Heads in the text encoder and CT transformer")
    ct_encoder_layers: int = Field(default=2, ge=0, description="Encoder layers of the CT generator")
    ct_decoder_layers: int = Field(default=2, ge=1, description="Decoder layers of the CT generator")
    text_layers: int = Field(default=6, ge=0, description="Text encoder depth")
    context_tokens: int = Field(default=4, ge=0, description="Learnable context tokens appended to text")
    max_prompt_tokens: int = Field(default=32, gt=0, description="Longest prompt in tokens")
    fusion_kind: FusionKind = Field(default=FusionKind.CAA, description="Fusion strategy")
    ct_target: CTTarget = Field(default=CTTarget.Q, description="Where CA2 appends the Condition Token")
    ca2_heads: int = Field(default=1, gt=0, description="Heads in the CA2 window attention")
    window: int = Field(default=7, gt=0, description="CA2 window side")
    decoder_channels: int = Field(default=32, gt=0, description="Hidden channels of the segmentation head")
    shared_backbone: bool = Field(default=True, description="One backbone for every modality")
    use_adapters: bool = Field(default=True, description="Per-modality, per-level feature adapters")
    caa_per_level: bool = Field(default=False, description="Predict CAA weights per pyramid level")

    @model_validator(mode="after")
    def _consistent(self) -> "ModelConfig":
        if self.image_size % 32:
            raise ValueError(f"image_size {self.image_size} is not divisible by 32")
        if self.ct_dim % self.transformer_heads:
            raise ValueError(f"ct_dim {self.ct_dim} is not divisible by transformer_heads {self.transformer_heads}")
        bad = [c for c in self.backbone.level_channels if c % self.ca2_heads]
        if bad:
            raise ValueError(f"level channels {bad} are not divisible by ca2_heads {self.ca2_heads}")
        return self

    @property
    def grid_tokens(self) -> int:
        return (self.image_size // 32) ** 2


class TrainConfig(BaseModel):
    """Optimization and data handling of one training run."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=40, gt=0, description="Passes over the training split")
    batch_size: int = Field(default=8, gt=0, description="Scenes per step")
    learning_rate: float = Field(default=3e-4, gt=0, description="AdamW learning rate")
    weight_decay: float = Field(default=0.01, ge=0, description="Decoupled weight decay")
    beta1: float = Field(default=0.9, gt=0, lt=1, description="AdamW first-moment decay")
    beta2: float = Field(default=0.999, gt=0, lt=1, description="AdamW second-moment decay")
    seed: int = Field(default=1, description="Seed for initialization, shuffling and dropout")
    lambda_cond: float = Field(default=0.5, ge=0, description="Weight of the condition loss")
    modalities: List[Modality] = Field(default_factory=lambda: list(Modality), description="Modalities in use")
    dropout_p: float = Field(default=0.2, ge=0, le=1, description="Per-modality drop rate in training")
    prompt_detail: PromptDetail = Field(default=PromptDetail.FULL, description="Prompt text used for the condition loss")
    attribute_loss_weight: float = Field(default=0.25, ge=0, description="Weight of each per-attribute contrastive term")
    freeze_backbone: bool = Field(default=False, description="Keep backbone weights fixed")
    max_steps: Optional[int] = Field(default=None, gt=0, description="Stop after this many optimizer steps")
    eval_batch_size: int = Field(default=32, gt=0, description="Scenes per evaluation forward pass")

    @field_validator("modalities")
    @classmethod
    def _rgb_present(cls, value: List[Modality]) -> List[Modality]:
        if Modality.RGB not in value:
            raise ValueError("the modality mask must include rgb")
        if len(set(value)) != len(value):
            raise ValueError("duplicate modalities")
        return [m for m in Modality if m in value]


class DataConfig(BaseModel):
    """Synthetic benchmark sizes."""

    model_config = ConfigDict(extra="forbid")

    train_size: int = Field(default=800, gt=0, description="Training scenes")
    val_size: int = Field(default=160, gt=0, description="Validation scenes, stratified by condition cell")
    test_size: int = Field(default=160, gt=0, description="Test scenes, stratified by condition cell")
    seed: int = Field(default=0, description="Generator seed")
    image_size: int = Field(default=32, gt=0, description="Scene size in pixels")
    workers: int = Field(default=1, gt=0, description="Processes rendering scenes")


class Settings(BaseSettings):
    """Top-level settings: environment variables prefixed CONDFUSE_, nested with __."""

    model_config = SettingsConfigDict(env_prefix="CONDFUSE_", env_nested_delimiter="__", extra="ignore")

    log_level: str = Field(default="INFO", description="Logging level")
    data_dir: Path = Field(default=Path("data"), description="Directory of the dataset files")
    output_dir: Path = Field(default=Path("runs"), description="Directory for checkpoints and reports")
    model: ModelConfig = Field(default_factory=ModelConfig, description="Network architecture")
    train: TrainConfig = Field(default_factory=TrainConfig, description="Training run")
    data: DataConfig = Field(default_factory=DataConfig, description="Benchmark generation")

    @classmethod
    def from_env(cls) -> "Settings":
        """Create settings from defaults and environment variables."""
        return cls()

    @classmethod
    def load(cls, config_file: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> "Settings":
        """
        Build settings from the environment, then apply a key=value file and --set overrides.

        Later sources win: overrides beat the file, the file beats the environment.

        Raises:
            ConfigurationError: On unreadable files, unknown keys or invalid values
        """
        flat: Dict[str, Any] = {}
        if config_file is not None:
            flat.update(parse_config_file(config_file))
        flat.update(parse_assignments(overrides))
        try:
            settings = cls.from_env()
        except PydanticValidationError as exc:
            raise ConfigurationError(f"invalid environment configuration: {exc}")
        return settings.with_overrides(flat) if flat else settings

    def with_overrides(self, flat: Dict[str, Any]) -> "Settings":
        """Copy of these settings with dotted-key values replaced and revalidated."""
        merged = flatten_config(self.model_dump(mode="json"))
        unknown = [key for key in flat if key not in merged and not any(k.startswith(f"{key}.") for k in merged)]
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {unknown}")
        merged.update(flat)
        try:
            return type(self).model_validate(unflatten(merged))
        except PydanticValidationError as exc:
            raise ConfigurationError(f"invalid configuration: {exc}", details={"overrides": flat})


def flatten_config(config: Dict[str, Any], parent_key: str = "", sep: str = ".") -> Dict[str, Any]:
    """Recursively flatten a nested mapping into dotted keys."""
    flat: Dict[str, Any] = {}
    for key, value in config.items():
        new_key = f"{parent_key}{sep}{key}" if parent_key else key
        if isinstance(value, dict):
            flat.update(flatten_config(value, new_key, sep))
        else:
            flat[new_key] = value
    return flat


def unflatten(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"key {key} nests below a scalar")
        node[leaf] = value
    return nested


def parse_value(text: str) -> Any:
    """JSON when it parses, the raw string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(lines: Iterable[str], source: str = "--set") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip() if source != "--set" else line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{number}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{number}: empty key")
        values[key] = parse_value(value)
    return values


def parse_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read `key = value` lines with dotted keys and # comments."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}")
    return parse_assignments(text.splitlines(), source=str(path))
