"""Stage 1 (adapter fine-tuning on stacked pairs) and stage 2 (reward
maximization through the last few sampling steps)."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import lora as lora_mod
from .checkpoint import load_archive, save_archive
from .codec import unstack
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    denoise_loss,
    encode_prompts,
    initial_noise,
    sample,
)
from .rewards import RewardReport, RewardWeights
from .synthdata import PromptSpec

log = logging.getLogger(__name__)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (ints, strings)."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class TrainingLog:
    """Per-step training records plus periodic evaluation records."""

    def __init__(self, records: list[dict] | None = None, eval_records: list[dict] | None = None):
        self.records = list(records or [])
        self.eval_records = list(eval_records or [])

    def append(self, **row) -> None:
        if self.records and row["queries"] < self.records[-1]["queries"]:
            raise ValueError("reward-query count must be nondecreasing")
        self.records.append(row)

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def _write(path: Path, rows: list[dict]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fields: list[str] = []
        for r in rows:
            fields += [k for k in r if k not in fields]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)

    @staticmethod
    def _read(path: Path) -> list[dict]:
        if not path.exists():
            return []
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return [{k: _parse_cell(v) for k, v in r.items()} for r in rows]

    def to_csv(self, path: str | Path, eval_path: str | Path | None = None) -> None:
        self._write(Path(path), self.records)
        if eval_path is not None:
            self._write(Path(eval_path), self.eval_records)

    @classmethod
    def from_csv(cls, path: str | Path, eval_path: str | Path | None = None) -> "TrainingLog":
        return cls(cls._read(Path(path)), cls._read(Path(eval_path)) if eval_path else [])

    def truncate(self, step: int) -> None:
        """Drop records past ``step`` (used when resuming)."""
        self.records = [r for r in self.records if r["step"] < step]
        self.eval_records = [r for r in self.eval_records if r["step"] <= step]


def _parse_cell(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what exists."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _lr_at(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * step / total))
    raise ValueError(f"unknown lr schedule {schedule!r}")


# ----------------------------------------------------------------------------
# training state (resume support)


def save_training_state(path, model, opt: torch.optim.Optimizer, step: int, generator: torch.Generator, extra=None):
    arrays = {f"adapter/{k}": v for k, v in lora_mod.adapter_state(model).items()}
    params = lora_mod.lora_parameters(model)
    for i, p in enumerate(params):
        st = opt.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                arrays[f"optim/{i}/{key}"] = st[key]
        if "step" in st:
            arrays[f"optim/{i}/step"] = torch.as_tensor(st["step"]).reshape(1).double()
    arrays["rng"] = generator.get_state()
    save_archive(path, {"kind": "training_state", "step": step, **(extra or {})}, arrays)


def load_training_state(path, model, opt: torch.optim.Optimizer, generator: torch.Generator) -> int:
    header, arrays = load_archive(path)
    if header.get("kind") != "training_state":
        raise ValueError(f"{path} is not a training-state archive")
    lora_mod.load_adapter_state(
        model, {k[len("adapter/"):]: v for k, v in arrays.items() if k.startswith("adapter/")}
    )
    for i, p in enumerate(lora_mod.lora_parameters(model)):
        if f"optim/{i}/exp_avg" in arrays:
            opt.state[p] = {
                "step": torch.tensor(float(arrays[f"optim/{i}/step"][0])),
                "exp_avg": arrays[f"optim/{i}/exp_avg"].clone(),
                "exp_avg_sq": arrays[f"optim/{i}/exp_avg_sq"].clone(),
            }
    generator.set_state(arrays["rng"])
    return int(header["step"])


# ----------------------------------------------------------------------------
# stage 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lr_schedule: str = "cosine"
    batch_size: int = 8
    grad_accum_steps: int = 1
    total_iters: int = 2000
    seed: int = 0
    uncond_prob: float = 0.1
    log_every: int = 100
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.total_iters < 1 or self.grad_accum_steps < 1:
            raise ValueError("batch_size, grad_accum_steps and total_iters must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def finetune_stereo(
    model: torch.nn.Module,
    stacked: torch.Tensor,
    captions: Sequence[str],
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    log_: TrainingLog | None = None,
):
    """Adapter-only denoising fine-tuning on stacked stereo images.

    ``stacked`` is (N, 3, 2H, W); ``captions`` holds the N prompt texts.
    Returns ``(model, TrainingLog)``.
    """
    cfg.validate()
    params = lora_mod.lora_parameters(model)
    if not params:
        raise ValueError("model carries no adapters; call inject_lora first")
    if len(stacked) != len(captions) or len(stacked) == 0:
        raise ValueError("need a nonempty dataset with one caption per image")
    expected = tuple(getattr(getattr(model, "cfg", None), "image_size", stacked.shape[-2:]))
    if tuple(stacked.shape[-2:]) != expected:
        raise ValueError(f"dataset resolution {tuple(stacked.shape[-2:])} != model resolution {expected}")

    cond_all = encode_prompts(list(captions), model.cfg.cond_dim)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    g = torch.Generator().manual_seed(cfg.seed)
    train_log = log_ or TrainingLog()
    start = 0
    if resume_from is not None:
        start = load_training_state(resume_from, model, opt, g)
        train_log.truncate(start)

    model.train()
    n = len(stacked)
    t0 = time.time()
    for step in range(start, cfg.total_iters):
        lr = _lr_at(cfg.learning_rate, cfg.lr_schedule, step, cfg.total_iters)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(cfg.grad_accum_steps):
            idx = torch.randint(0, n, (cfg.batch_size,), generator=g)
            cond = cond_all[idx]
            drop = torch.rand(cfg.batch_size, generator=g) < cfg.uncond_prob
            cond = torch.where(drop[:, None], torch.zeros_like(cond), cond)
            loss = denoise_loss(model, stacked[idx], cond, schedule, g)
            (loss / cfg.grad_accum_steps).backward()
            total += loss.item() / cfg.grad_accum_steps
        opt.step()
        train_log.append(step=step, queries=0, loss=total, lr=lr, wall_time=time.time() - t0)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("stage1 step %d loss %.4f", step + 1, total)
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_state(Path(checkpoint_dir) / f"stage1-state-{step + 1:06d}.zip", model, opt, step + 1, g)
    model.eval()
    return model, train_log


# ----------------------------------------------------------------------------
# stage 2


RewardFn = Callable[[object, Sequence[PromptSpec]], RewardReport]


@dataclass
class AlignPropConfig:
    prompts: list[PromptSpec]
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    iters: int = 200
    prompts_per_iter: int = 16
    truncation_max: int = 10
    seed: int = 0
    learning_rate: float = 1e-3
    grad_clip: float = 1.0
    eval_every: int = 20
    checkpoint_every: int = 0

    def validate(self, sampler: SamplerConfig) -> None:
        if not self.prompts:
            raise ValueError("need at least one training prompt")
        if not 1 <= self.truncation_max <= sampler.num_sample_steps:
            raise ValueError(f"truncation_max must be in [1, {sampler.num_sample_steps}]")
        if self.iters < 0 or self.prompts_per_iter < 1:
            raise ValueError("iters must be >= 0 and prompts_per_iter >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


def generate(
    model,
    prompts: Sequence[PromptSpec],
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    seed: int,
    differentiable_tail: int | None = None,
    batch_size: int = 16,
) -> torch.Tensor:
    """One stacked sample per prompt, each from noise seeded by (seed, prompt text).

    Adding or reordering prompts never changes any individual sample's noise.
    """
    h, w = model.cfg.image_size
    outs = []
    for i in range(0, len(prompts), batch_size):
        chunk = prompts[i : i + batch_size]
        x_T = torch.stack([initial_noise((3, h, w), derive_seed(seed, p.text)) for p in chunk])
        cond = encode_prompts([p.text for p in chunk], model.cfg.cond_dim)
        outs.append(sample(model, cond, schedule, sampler, differentiable_tail=differentiable_tail, x_T=x_T))
    return torch.cat(outs)


def _stats(prefix: str, values: torch.Tensor) -> dict:
    v = values.detach().double()
    std = v.std(unbiased=False).item() if v.numel() > 1 else 0.0
    return {f"{prefix}_mean": v.mean().item(), f"{prefix}_std": std}


def evaluate_prompts(model, prompts, reward: RewardFn, schedule, sampler, seed, batch_size=16) -> RewardReport:
    with torch.no_grad():
        stacked = generate(model, prompts, schedule, sampler, seed, batch_size=batch_size)
        return reward(unstack(stacked), prompts).detach()


def finetune_reward(
    model: torch.nn.Module,
    cfg: AlignPropConfig,
    reward: RewardFn,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    eval_sets: dict[str, Sequence[PromptSpec]] | None = None,
    frozen_modules: Sequence[torch.nn.Module] = (),
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    log_: TrainingLog | None = None,
):
    """Maximize the mean reward of sampled images w.r.t. the adapter factors.

    Each iteration draws ``prompts_per_iter`` prompts, samples with a
    differentiable tail of ``K ~ Uniform{1..truncation_max}`` steps and
    ascends the mean reward. Evaluation sets are scored with fixed per-prompt
    noise every ``eval_every`` iterations, and at the start and end.
    """
    cfg.validate(sampler)
    params = lora_mod.lora_parameters(model)
    if not params:
        raise ValueError("model carries no adapters")
    for m in frozen_modules:
        for p in m.parameters():
            p.requires_grad_(False)
    eval_sets = dict(eval_sets or {})
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    g = torch.Generator().manual_seed(cfg.seed)
    train_log = log_ or TrainingLog()
    start = 0
    if resume_from is not None:
        start = load_training_state(resume_from, model, opt, g)
        train_log.truncate(start)
    h, w = model.cfg.image_size
    n_prompts = len(cfg.prompts)

    def run_eval(step: int, queries: int) -> None:
        model.eval()
        for name, prompts in eval_sets.items():
            rep = evaluate_prompts(model, list(prompts), reward, schedule, sampler, cfg.seed)
            row = {"step": step, "queries": queries, "set": name, "n": len(prompts)}
            for key in ("r_s", "r_p", "r_c", "r_total"):
                row.update(_stats(key, getattr(rep, key)))
            train_log.eval_records.append(row)

    queries = start * cfg.prompts_per_iter
    if start == 0 and eval_sets:
        run_eval(0, 0)
    t0 = time.time()
    for step in range(start, cfg.iters):
        model.train()
        idx = torch.randint(0, n_prompts, (cfg.prompts_per_iter,), generator=g).tolist()
        prompts = [cfg.prompts[i] for i in idx]
        k = int(torch.randint(1, cfg.truncation_max + 1, (1,), generator=g))
        noise_seed = int(torch.randint(0, 2**62, (1,), generator=g))
        x_T = initial_noise((len(prompts), 3, h, w), noise_seed)
        cond = encode_prompts([p.text for p in prompts], model.cfg.cond_dim)

        stacked = sample(model, cond, schedule, sampler, differentiable_tail=k, x_T=x_T)
        rep = reward(unstack(stacked), prompts)
        loss = -rep.r_total.mean()
        queries += len(prompts)

        row = {"step": step, "queries": queries, "tail": k, "loss": loss.item()}
        for key in ("r_s", "r_p", "r_c", "r_total"):
            row.update(_stats(key, getattr(rep, key)))
        opt.zero_grad(set_to_none=True)
        if not torch.isfinite(loss):
            log.warning("stage2 step %d: non-finite reward, skipping update", step)
            row["skipped"] = 1
        else:
            loss.backward()
            grads_ok = all(p.grad is None or torch.isfinite(p.grad).all() for p in params)
            if grads_ok:
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                row["skipped"] = 0
            else:
                log.warning("stage2 step %d: non-finite gradient, skipping update", step)
                row["skipped"] = 1
        row["wall_time"] = time.time() - t0
        train_log.append(**row)
        log.info(
            "stage2 step %d K=%d R=%.4f (s=%.3f p=%.3f c=%.3f)",
            step + 1, k, row["r_total_mean"], row["r_s_mean"], row["r_p_mean"], row["r_c_mean"],
        )
        last = step + 1 == cfg.iters
        if eval_sets and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
            run_eval(step + 1, queries)
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_state(Path(checkpoint_dir) / f"stage2-state-{step + 1:06d}.zip", model, opt, step + 1, g)
    model.eval()
    return model, train_log
