"""Run configuration: one JSON document, validated, with dotted-key overrides."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataSection(_Section):
    n_scenes: int = Field(500, ge=1)
    seed: int = 0
    height: int = Field(32, ge=4)
    width: int = Field(64, ge=4)
    min_layers: int = Field(1, ge=1, le=4)
    max_layers: int = Field(3, ge=1, le=4)
    min_disparity: int = Field(2, ge=1)
    max_disparity: int = Field(8, ge=1)
    texture_amplitude: float = Field(0.1, ge=0.0)


class ModelSection(_Section):
    base_channels: int = Field(32, ge=8)
    channel_mult: list[int] = [1, 2, 2]
    cond_dim: int = Field(64, ge=4)
    emb_dim: int = Field(128, ge=8)
    attn_heads: int = Field(4, ge=1)
    groups: int = Field(8, ge=1)
    seed: int = 0


class ScheduleSection(_Section):
    num_steps: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.02, gt=0.0, lt=1.0)


class SamplerSection(_Section):
    num_sample_steps: int = Field(20, ge=1)
    guidance_scale: float = Field(1.0, ge=0.0)
    clip_x0: bool = True
    seed: int = 0


class LoraSection(_Section):
    rank: int = Field(4, ge=1)
    conv_rank: Optional[int] = Field(None, ge=1)
    scale: float = 1.0
    targets: list[str] = ["*attn.to_q", "*attn.to_k", "*attn.to_v", "*attn.to_out"]
    seed: int = 0


class PretrainSection(_Section):
    iters: int = Field(2000, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(8, ge=1)
    n_images: int = Field(500, ge=1)
    seed: int = 0


class MatcherSection(_Section):
    max_disp: int = Field(8, ge=1)
    min_disp: int = Field(-2, le=0)
    patch: int = Field(5, ge=1)
    temperature: float = Field(0.05, gt=0.0)
    shiftable: bool = True

    @field_validator("patch")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("patch must be odd")
        return v


class MonoSection(_Section):
    channels: int = Field(16, ge=2)
    iters: int = Field(600, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(2e-3, gt=0.0)
    seed: int = 0
    heldout_fraction: float = Field(0.1, ge=0.0, lt=1.0)


class RewardSection(_Section):
    alpha: float = 0.25
    beta: float = 0.75
    gamma: float = 0.25
    scorer: Literal["toy", "subprocess"] = "toy"
    scorer_command: Optional[str] = None

    @model_validator(mode="after")
    def _command(self):
        if self.scorer == "subprocess" and not self.scorer_command:
            raise ValueError("scorer 'subprocess' needs scorer_command")
        return self


class TrainerSection(_Section):
    learning_rate: float = Field(1e-4, ge=0.0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    batch_size: int = Field(8, ge=1)
    grad_accum_steps: int = Field(1, ge=1)
    total_iters: int = Field(2000, ge=1)
    seed: int = 0
    uncond_prob: float = Field(0.1, ge=0.0, le=1.0)
    checkpoint_every: int = Field(0, ge=0)


class AlignPropSection(_Section):
    n_train_prompts: int = Field(64, ge=1)
    iters: int = Field(200, ge=0)
    prompts_per_iter: int = Field(16, ge=1)
    truncation_max: int = Field(10, ge=1)
    learning_rate: float = Field(1e-3, ge=0.0)
    grad_clip: float = Field(1.0, ge=0.0)
    seed: int = 0
    eval_every: int = Field(20, ge=0)
    n_train_eval_prompts: int = Field(16, ge=0)
    checkpoint_every: int = Field(0, ge=0)


class EvalSection(_Section):
    n_prompts: int = Field(32, ge=1)
    seed: int = 1234
    source: Literal["model", "dataset"] = "model"
    prompt_split_seed: int = 0


class AblationSection(_Section):
    prompt_set_sizes: list[int] = [8, 64]
    include_stereo_only: bool = True


class PathsSection(_Section):
    dataset: Optional[str] = None
    mono: Optional[str] = None
    base: Optional[str] = None
    stage1: Optional[str] = None
    stage2: Optional[str] = None


class RunSection(_Section):
    root: str = "runs"
    name: Optional[str] = None


class RunConfig(_Section):
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    schedule: ScheduleSection = ScheduleSection()
    sampler: SamplerSection = SamplerSection()
    lora: LoraSection = LoraSection()
    pretrain: PretrainSection = PretrainSection()
    matcher: MatcherSection = MatcherSection()
    mono: MonoSection = MonoSection()
    reward: RewardSection = RewardSection()
    trainer: TrainerSection = TrainerSection()
    alignprop: AlignPropSection = AlignPropSection()
    eval: EvalSection = EvalSection()
    ablation: AblationSection = AblationSection()
    paths: PathsSection = PathsSection()
    run: RunSection = RunSection()

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.data.min_layers > self.data.max_layers:
            raise ValueError("data.min_layers exceeds data.max_layers")
        if self.data.min_disparity > self.data.max_disparity:
            raise ValueError("data.min_disparity exceeds data.max_disparity")
        if self.schedule.beta_start > self.schedule.beta_end:
            raise ValueError("schedule.beta_start exceeds schedule.beta_end")
        if self.sampler.num_sample_steps > self.schedule.num_steps:
            raise ValueError("sampler.num_sample_steps exceeds schedule.num_steps")
        if self.alignprop.truncation_max > self.sampler.num_sample_steps:
            raise ValueError("alignprop.truncation_max exceeds sampler.num_sample_steps")
        if self.matcher.max_disp >= self.data.width:
            raise ValueError("matcher.max_disp must be smaller than data.width")
        return self

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(exclude={"run"}), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:10]

    def run_dir(self) -> Path:
        name = self.run.name or f"{time.strftime('%Y%m%d-%H%M%S')}-{self.config_hash()}"
        return Path(self.run.root) / name


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ValueError(f"override must look like key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        path, value = parse_override(item)
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"cannot descend into non-object at {part!r} in {item!r}")
        node[path[-1]] = value
    return doc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return RunConfig.model_validate(apply_overrides(doc, overrides or []))


def json_schema() -> dict:
    return RunConfig.model_json_schema()
