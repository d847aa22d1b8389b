"""
Run configuration.

A RunConfig is loaded from a JSON file, patched with ``key=value`` overrides (dotted keys reach
into the generation ranges), then with the MADI_OUTPUT_DIR environment variable, and validated
in one place. Unknown keys are rejected.
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from datagen import TEMPLATE_IDS, GenerationRanges
from errors import ConfigurationError

logger = logging.getLogger(__name__)

ABLATION_TAGS = ("full", "no_pa", "no_ddi", "no_cth", "no_nva", "no_nca", "no_md", "no_vq", "no_num")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # model
    embed_dim: int = Field(64, ge=4)
    latent_dim: int = Field(32, ge=1)
    codebook_size: int = Field(16, ge=1)
    levels: int = Field(3, ge=1)
    patch_size: int = Field(8, ge=1)
    pixel_patch: int = Field(16, ge=4)
    highlight_queries: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    blocks: int = Field(2, ge=0)
    decoder_blocks: int = Field(2, ge=1)
    max_patches: int = Field(64, ge=1)
    max_positions: int = Field(512, ge=8)
    dtype: str = "float32"

    # losses
    tau: float = Field(0.07, gt=0)
    alpha: float = Field(5.0, ge=0)
    beta: float = Field(1.0, ge=0)
    lambda1: float = Field(0.02, ge=0)
    lambda2: float = Field(0.2, ge=0)
    ema_decay: float = Field(0.99, ge=0, lt=1)

    # optimization
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    warmup_ratio: float = Field(0.02, ge=0, le=1)
    freeze_ratio: float = Field(0.02, ge=0, le=1)
    steps: int = Field(1200, ge=0)
    batch_size: int = Field(8, ge=1)
    seed: int = 0
    eval_interval: int = Field(50, ge=0)
    eval_samples: int = Field(64, ge=1)
    max_answer_tokens: int = Field(8, ge=0)
    workers: int = Field(4, ge=1)
    ablation: str = "full"

    # data
    train_samples: int = Field(2000, ge=0)
    eval_split_samples: int = Field(200, ge=0)
    templates: Tuple[str, ...] = ("trend_class", "period_value")
    trend_threshold: float = Field(1.0, ge=0)
    noise_threshold: float = Field(0.15, ge=0)
    generation: GenerationRanges = Field(default_factory=GenerationRanges)

    # paths
    output_dir: str = "runs/default"
    train_path: Optional[str] = None
    eval_path: Optional[str] = None
    checkpoint_path: Optional[str] = None

    # ablation sweep
    ablation_tags: Tuple[str, ...] = ("full", "no_pa", "no_ddi")
    ablation_seeds: Tuple[int, ...] = (0, 1, 2)

    @model_validator(mode="after")
    def check_cross_fields(self) -> "RunConfig":
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.pixel_patch < self.patch_size:
            raise ValueError(f"pixel_patch {self.pixel_patch} must be at least patch_size {self.patch_size}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        unknown = [t for t in self.templates if t not in TEMPLATE_IDS]
        if unknown or not self.templates:
            raise ValueError(f"templates must be a non-empty subset of {TEMPLATE_IDS}, got {list(self.templates)}")
        bad_tags = [t for t in (self.ablation, *self.ablation_tags) if t not in ABLATION_TAGS]
        if bad_tags:
            raise ValueError(f"unknown ablation tags {bad_tags}; expected one of {ABLATION_TAGS}")
        longest = self.generation.length[1]
        if -(-longest // self.patch_size) > self.max_patches:
            raise ValueError(f"series of length {longest} need more than max_patches={self.max_patches} patches")
        return self

    @property
    def resolved_train_path(self) -> str:
        return self.train_path or os.path.join(self.output_dir, "train.jsonl")

    @property
    def resolved_eval_path(self) -> str:
        return self.eval_path or os.path.join(self.output_dir, "eval.jsonl")

    @property
    def resolved_checkpoint_path(self) -> str:
        return self.checkpoint_path or os.path.join(self.output_dir, "model.ckpt")

    def to_json(self) -> str:
        return self.model_dump_json()


def parse_override(item: str) -> Tuple[List[str], Any]:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    data = json.loads(json.dumps(data))
    for item in overrides:
        path, value = parse_override(item)
        target = data
        for part in path[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigurationError(f"override {item!r} descends into a non-object value")
        target[path[-1]] = value
    return data


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                output_dir: Optional[str] = None) -> RunConfig:
    """
    Resolve a RunConfig from an optional JSON file, overrides and the environment.

    Raises:
        ConfigurationError: unreadable file, malformed override or failed validation
    """
    load_dotenv()
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")

    data = apply_overrides(data, overrides)
    env_output = os.getenv("MADI_OUTPUT_DIR")
    if env_output:
        data["output_dir"] = env_output
    if output_dir:
        data["output_dir"] = output_dir

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e
