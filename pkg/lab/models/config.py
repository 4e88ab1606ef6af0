"""
Experiment, model and training configuration models
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from lab.core.exceptions import ConfigError, NoiseSpecError

EXPERIMENT_KINDS = (
    "train",
    "tdnv",
    "grid_tdnv",
    "probes",
    "bias_variance",
    "noise_sweep",
    "position_sweep",
    "k_sweep",
    "size_sweep",
    "repeat_distinct",
    "theorem",
    "contrastive_compare",
)

ExperimentKind = Literal[
    "train",
    "tdnv",
    "grid_tdnv",
    "probes",
    "bias_variance",
    "noise_sweep",
    "position_sweep",
    "k_sweep",
    "size_sweep",
    "repeat_distinct",
    "theorem",
    "contrastive_compare",
]

DEFAULT_TASKS = ["copy", "next", "upper", "prev", "next2"]
CONTRASTIVE_TASKS = ["next", "next2", "prev", "upper", "next_upper"]


def default_contrast_layer(n_layers: int) -> int:
    """Proportional placement of layer 7 of 12"""
    return max(1, math.ceil(n_layers * 7 / 12))


class ModelConfig(BaseModel):
    """Toy decoder-only transformer shape"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_layers: int = Field(8, ge=1, description="Layer count L")
    d_model: int = Field(64, ge=1, description="Hidden width d")
    n_heads: int = Field(4, ge=1, description="Attention heads")
    d_ff: int = Field(256, ge=1, description="Feed-forward width")
    vocab_size: int = Field(..., ge=1, description="Vocabulary size V")
    p_max: int = Field(260, ge=1, description="Maximum sequence length")
    attention_kind: Literal["softmax", "linear_normalized"] = "softmax"
    feature_map: Literal["identity", "elu_plus_one"] = "identity"
    seed: int = 0

    @model_validator(mode="after")
    def validate_heads(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class TrainConfig(BaseModel):
    """Optimizer, batch and loss settings"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(3e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    steps: int = Field(20000, ge=0)
    warmup_steps: int = Field(200, ge=0)
    batch_size: int = Field(100, ge=1)
    k_train: int = Field(20, ge=0, description="Largest K drawn for a training batch")
    k_train_min: int = Field(1, ge=0, description="Smallest K drawn for a training batch")
    contrastive_beta: float = Field(0.1, ge=0, description="Contrastive weight beta")
    tau: float = Field(0.07, gt=0, description="Contrastive temperature")
    contrast_layer: int = Field(..., ge=1)
    loss_mode: Literal["ce_only", "ce_plus_contrastive"] = "ce_only"
    grad_clip: Optional[float] = Field(1.0, gt=0)
    eval_every: int = Field(500, ge=1)
    eval_instances: int = Field(20, ge=1, description="Instances per task at eval steps")
    eval_k: int = Field(10, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_k_range(self):
        if self.k_train_min > self.k_train:
            raise ValueError(f"k_train_min={self.k_train_min} exceeds k_train={self.k_train}")
        return self

    @property
    def uses_contrastive(self) -> bool:
        return self.loss_mode == "ce_plus_contrastive" and self.contrastive_beta > 0


class NoiseSpec(BaseModel):
    """Label corruption of demonstrations (ratio mode or position mode)"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["ratio", "position"] = "ratio"
    ratio: float = 0.0
    positions: List[int] = Field(default_factory=list)

    @field_validator("ratio")
    @classmethod
    def validate_ratio(cls, v):
        if not 0.0 <= v <= 1.0:
            raise NoiseSpecError(f"noise ratio {v} outside [0, 1]")
        return v

    @field_validator("positions")
    @classmethod
    def validate_positions(cls, v):
        if any(p < 0 for p in v):
            raise NoiseSpecError("noise positions must be non-negative")
        return sorted(set(v))


class ExperimentConfig(BaseModel):
    """Flat experiment definition; unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind
    seed: int = 0
    output_dir: Optional[str] = Field(None, description="Defaults to <output root>/<kind>")
    checkpoint: Optional[str] = Field(None, description="Trained model to load instead of training")

    # Data
    tasks: List[str] = Field(default_factory=lambda: list(DEFAULT_TASKS))
    n_instances: int = Field(100, ge=1, description="N instances per task")
    k: int = Field(15, ge=0, description="Demonstrations per instance")
    dummy_query: Optional[str] = Field(None, description="Fixed dummy query token for task vectors")

    # Model shape
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    p_max: int = 260
    attention_kind: Literal["softmax", "linear_normalized"] = "softmax"
    feature_map: Literal["identity", "elu_plus_one"] = "identity"

    # Training
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 20000
    warmup_steps: int = 200
    batch_size: int = 100
    k_train: int = 20
    k_train_min: int = 1
    contrastive_beta: float = 0.1
    tau: float = 0.07
    contrast_layer: Optional[int] = None
    loss_mode: Literal["ce_only", "ce_plus_contrastive"] = "ce_only"
    grad_clip: Optional[float] = 1.0
    eval_every: int = 500
    eval_instances: int = 20
    eval_k: int = 10
    contrastive_tasks: List[str] = Field(default_factory=lambda: list(CONTRASTIVE_TASKS))
    finetune_steps: int = Field(2000, ge=1)

    # Geometry
    representation: Literal["last_sep", "mean_all_tokens", "mean_sep_tokens"] = "last_sep"
    tdnv_literal_sum: bool = False
    k_grid: List[int] = Field(default_factory=lambda: [0, 1, 2, 4, 8, 16, 32, 64])
    k_inf_instances: int = Field(500, ge=1)
    k_sweep_values: List[int] = Field(default_factory=lambda: [2, 5, 10, 20])
    pca_tasks: List[str] = Field(default_factory=lambda: ["copy", "upper"])

    # Noise studies
    noise_mode: Literal["ratio", "position"] = "ratio"
    noise_ratio: float = 0.0
    noise_positions: List[int] = Field(default_factory=list)
    noise_ratios: List[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    perturb_positions: List[int] = Field(default_factory=lambda: [0, 2, 4, 6, 8])
    perturb_count: int = Field(3, ge=1)

    # Size sweep: (n_layers, d_model) pairs
    size_grid: List[Tuple[int, int]] = Field(default_factory=lambda: [(2, 32), (4, 64), (8, 64)])

    # Repeat vs distinct
    k_base: int = Field(5, ge=1)
    k_extended: int = Field(20, ge=1)

    # Probes
    saliency_instances: int = Field(4, ge=0)
    saliency_preset: Literal["proportional", "fixed"] = "proportional"

    # Theorem harness
    theorem_d: int = Field(8, ge=1)
    theorem_k_grid: List[int] = Field(default_factory=lambda: [0, 1, 2, 4, 8, 16, 32, 64, 128, 256])
    theorem_samples: int = Field(100000, ge=2)
    theorem_distribution: Literal["gaussian", "uniform_sphere", "mixture", "point"] = "gaussian"
    theorem_weights: Literal["identity", "random"] = "identity"
    theorem_query: Literal["fixed", "unit", "resampled"] = "fixed"
    theorem_tail_k: int = Field(32, ge=1)
    theorem_feature_map: Literal["identity", "elu_plus_one"] = "identity"

    # Trace dumps
    dump_dtype: Optional[Literal["f32", "f64"]] = None

    @field_validator("noise_ratio")
    @classmethod
    def validate_noise_ratio(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("noise_ratio must lie in [0, 1]")
        return v

    @field_validator("noise_ratios")
    @classmethod
    def validate_noise_ratios(cls, v):
        if any(not 0.0 <= r <= 1.0 for r in v):
            raise ValueError("every noise ratio must lie in [0, 1]")
        return v

    @field_validator("tasks", "contrastive_tasks")
    @classmethod
    def validate_tasks(cls, v):
        if not v:
            raise ValueError("at least one task required")
        if len(set(v)) != len(v):
            raise ValueError("task names must be unique")
        return v

    @field_validator("k_grid", "theorem_k_grid", "k_sweep_values")
    @classmethod
    def validate_grid(cls, v):
        if not v or any(k < 0 for k in v):
            raise ValueError("grid must be a non-empty list of non-negative integers")
        return sorted(set(v))

    @model_validator(mode="after")
    def validate_shapes(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.contrast_layer is not None and not 1 <= self.contrast_layer <= self.n_layers:
            raise ValueError(f"contrast_layer must lie in [1, {self.n_layers}]")
        if self.k_extended < self.k_base:
            raise ValueError("k_extended must be >= k_base")
        return self

    @classmethod
    def from_file(cls, path: str, default_kind: Optional[str] = None, **overrides: Any) -> "ExperimentConfig":
        """Load a JSON config file; ``overrides`` with value None are ignored"""
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        # "_comment..." keys document the file and are not settings
        data = {k: v for k, v in data.items() if not k.startswith("_comment")}
        data.update({k: v for k, v in overrides.items() if v is not None})
        if default_kind:
            data.setdefault("kind", default_kind)
        return cls.model_validate(data)

    def model_settings(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            vocab_size=vocab_size,
            p_max=self.p_max,
            attention_kind=self.attention_kind,
            feature_map=self.feature_map,
            seed=self.seed,
        )

    def train_settings(self, n_layers: Optional[int] = None, **overrides: Any) -> TrainConfig:
        layers = n_layers or self.n_layers
        fields: Dict[str, Any] = {
            name: getattr(self, name)
            for name in TrainConfig.model_fields
            if name not in ("contrast_layer", "seed")
        }
        fields["contrast_layer"] = self.contrast_layer or default_contrast_layer(layers)
        fields["seed"] = self.seed
        fields.update(overrides)
        return TrainConfig(**fields)

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(mode=self.noise_mode, ratio=self.noise_ratio, positions=self.noise_positions)
