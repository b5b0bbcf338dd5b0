"""End-to-end steps operating on a ``RunConfig``.

Every step reads its inputs from ``cfg.paths`` (falling back to the
conventional file names inside the run directory) and writes its outputs
into the run directory. The CLI is a thin wrapper over these functions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import lora as lora_mod
from .checkpoint import load_denoiser, load_mono, save_denoiser, save_mono
from .codec import StereoPair, unstack
from .config import RunConfig
from .diffusion import (
    SamplerConfig,
    UNetConfig,
    build_unet,
    denoise_loss,
    encode_prompts,
    make_schedule,
)
from .disparity import MatcherConfig, MonoConfig, train_mono as fit_mono
from .evaluation import (
    METRICS_COLUMNS,
    Condition,
    aggregate,
    default_conditions,
    format_table,
    metrics_rows,
    per_prompt_scores,
    plot_curves,
    run_ablation,
    write_csv,
)
from .rewards import (
    RewardModels,
    RewardWeights,
    SubprocessScorer,
    ToyColorScorer,
    composite_reward,
    pearson,
)
from .synthdata import (
    GenerationConfig,
    PromptSpec,
    build_dataset,
    generate_scenes,
    load_dataset,
    parse_caption,
    records_from_scenes,
    save_png,
    split_prompts,
    to_hwc,
)
from .trainers import (
    AlignPropConfig,
    TrainConfig,
    TrainingLog,
    _lr_at,
    derive_seed,
    finetune_reward,
    finetune_stereo,
    generate,
)

log = logging.getLogger(__name__)

DEFAULT_NAMES = {
    "dataset": "dataset",
    "mono": "mono.zip",
    "base": "base.zip",
    "stage1": "stage1.zip",
    "stage2": "stage2.zip",
}


# ----------------------------------------------------------------------------
# config -> component objects


def run_dir(cfg: RunConfig) -> Path:
    d = cfg.run_dir()
    d.mkdir(parents=True, exist_ok=True)
    return d


def artifact(cfg: RunConfig, key: str) -> Path:
    explicit = getattr(cfg.paths, key)
    return Path(explicit) if explicit else cfg.run_dir() / DEFAULT_NAMES[key]


def require(cfg: RunConfig, key: str) -> Path:
    path = artifact(cfg, key)
    if not path.exists():
        raise FileNotFoundError(f"missing {key} artifact at {path}; set paths.{key} or run the producing step")
    return path


def generation_config(cfg: RunConfig) -> GenerationConfig:
    d = cfg.data
    return GenerationConfig(
        height=d.height,
        width=d.width,
        min_layers=d.min_layers,
        max_layers=d.max_layers,
        min_disparity=d.min_disparity,
        max_disparity=d.max_disparity,
        texture_amplitude=d.texture_amplitude,
    )


def unet_config(cfg: RunConfig) -> UNetConfig:
    m = cfg.model
    return UNetConfig(
        base_channels=m.base_channels,
        channel_mult=tuple(m.channel_mult),
        cond_dim=m.cond_dim,
        emb_dim=m.emb_dim,
        attn_heads=m.attn_heads,
        groups=m.groups,
        image_size=(2 * cfg.data.height, cfg.data.width),
    )


def schedule_of(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.num_steps, s.beta_start, s.beta_end)


def schedule_dict(cfg: RunConfig) -> dict:
    return cfg.schedule.model_dump()


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(
        num_sample_steps=s.num_sample_steps,
        guidance_scale=s.guidance_scale,
        clip_x0=s.clip_x0,
        seed=s.seed,
    )


def matcher_config(cfg: RunConfig) -> MatcherConfig:
    m = cfg.matcher
    return MatcherConfig(
        max_disp=m.max_disp, min_disp=m.min_disp, patch=m.patch, temperature=m.temperature, shiftable=m.shiftable
    )


def scorer_of(cfg: RunConfig):
    if cfg.reward.scorer == "subprocess":
        return SubprocessScorer(cfg.reward.scorer_command)
    return ToyColorScorer()


def reward_models(cfg: RunConfig) -> RewardModels:
    return RewardModels(matcher_config(cfg), load_mono(require(cfg, "mono")), scorer_of(cfg))


def reward_weights(cfg: RunConfig) -> RewardWeights:
    r = cfg.reward
    return RewardWeights(r.alpha, r.beta, r.gamma)


def prompt_split(cfg: RunConfig, n_train: int | None = None) -> tuple[list[PromptSpec], list[PromptSpec]]:
    """Training prompts and the disjoint held-out evaluation prompts."""
    n_train = cfg.alignprop.n_train_prompts if n_train is None else n_train
    return split_prompts(n_train, cfg.eval.n_prompts, cfg.eval.prompt_split_seed)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# steps


def gen_data(cfg: RunConfig) -> Path:
    out = artifact(cfg, "dataset")
    build_dataset(cfg.data.n_scenes, out, cfg.data.seed, generation_config(cfg))
    log.info("wrote %d scenes to %s", cfg.data.n_scenes, out)
    return out


def _dataset_tensors(cfg: RunConfig):
    records = load_dataset(require(cfg, "dataset"))
    lefts = torch.stack([r.pair.left for r in records])
    disps = torch.stack([r.disparity for r in records])
    return records, lefts, disps


def train_mono_step(cfg: RunConfig) -> dict:
    """Fit the monocular estimator on the dataset and report held-out correlation."""
    _, lefts, disps = _dataset_tensors(cfg)
    n = len(lefts)
    n_held = int(round(cfg.mono.heldout_fraction * n))
    perm = np.random.default_rng(cfg.mono.seed).permutation(n)
    held, train = perm[:n_held], perm[n_held:]
    m = cfg.mono
    net = fit_mono(lefts[train], disps[train], MonoConfig(m.channels, m.iters, m.batch_size, m.lr, m.seed))
    report = {"n_train": int(len(train)), "n_heldout": int(n_held)}
    if n_held:
        with torch.no_grad():
            r = pearson(net(lefts[held]), disps[held], batch_dims=1)
        report["heldout_correlation_mean"] = float(r.mean())
    path = artifact(cfg, "mono")
    save_mono(path, net, {"config": m.model_dump(), "report": report})
    _write_json(run_dir(cfg) / "mono_report.json", report)
    return report


def pretrain_base(cfg: RunConfig) -> TrainingLog:
    """Full-parameter training of the base denoiser on single views.

    Images are rendered at the stacked resolution (height ``2H``) so the base
    model learns the scene and caption distribution without ever seeing a
    stereo pair; the stereo layout is left for stage 1 to discover.
    """
    p = cfg.pretrain
    ucfg = unet_config(cfg)
    h, w = ucfg.image_size
    gen = generation_config(cfg)
    gen.height = h
    scenes = generate_scenes(p.n_images, derive_seed("pretrain", p.seed), gen)
    records = records_from_scenes(scenes)
    images = torch.stack([r.pair.left for r in records])
    cond_all = encode_prompts([r.prompt.text for r in records], ucfg.cond_dim)
    schedule = schedule_of(cfg)
    model = build_unet(ucfg, seed=cfg.model.seed)
    opt = torch.optim.Adam(model.parameters(), lr=p.learning_rate)
    g = torch.Generator().manual_seed(p.seed)
    train_log = TrainingLog()
    model.train()
    for step in range(p.iters):
        lr = _lr_at(p.learning_rate, "cosine", step, p.iters)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = torch.randint(0, len(images), (p.batch_size,), generator=g)
        cond = cond_all[idx]
        drop = torch.rand(p.batch_size, generator=g) < cfg.trainer.uncond_prob
        cond = torch.where(drop[:, None], torch.zeros_like(cond), cond)
        loss = denoise_loss(model, images[idx], cond, schedule, g)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        train_log.append(step=step, queries=0, loss=loss.item(), lr=lr)
        if (step + 1) % 100 == 0:
            log.info("pretrain step %d loss %.4f", step + 1, loss.item())
    model.eval()
    save_denoiser(artifact(cfg, "base"), model, schedule_dict(cfg), extra={"pretrain": p.model_dump()})
    train_log.to_csv(run_dir(cfg) / "pretrain_log.csv")
    return train_log


def lora_spec(cfg: RunConfig, injection: dict) -> dict:
    lc = cfg.lora
    return {
        "targets": list(lc.targets),
        "rank": lc.rank,
        "scale": lc.scale,
        "seed": lc.seed,
        "conv_rank": lc.conv_rank,
        "injection": injection,
    }


def train_stage1(cfg: RunConfig) -> tuple[torch.nn.Module, TrainingLog]:
    model, _ = load_denoiser(require(cfg, "base"))
    if lora_mod.lora_layers(model):
        raise ValueError("base checkpoint already carries adapters")
    lc = cfg.lora
    injection = lora_mod.inject_lora(model, lc.targets, lc.rank, lc.scale, lc.seed, lc.conv_rank)
    records = load_dataset(require(cfg, "dataset"))
    stacked = torch.stack([r.stacked for r in records])
    t = cfg.trainer
    tcfg = TrainConfig(
        learning_rate=t.learning_rate,
        lr_schedule=t.lr_schedule,
        batch_size=t.batch_size,
        grad_accum_steps=t.grad_accum_steps,
        total_iters=t.total_iters,
        seed=t.seed,
        uncond_prob=t.uncond_prob,
        checkpoint_every=t.checkpoint_every,
    )
    out = run_dir(cfg)
    model, train_log = finetune_stereo(
        model, stacked, [r.prompt.text for r in records], schedule_of(cfg), tcfg, checkpoint_dir=out
    )
    save_denoiser(artifact(cfg, "stage1"), model, schedule_dict(cfg), lora_spec(cfg, injection))
    train_log.to_csv(out / "stage1_log.csv")
    return model, train_log


def _alignprop_config(cfg: RunConfig, prompts, weights: RewardWeights) -> AlignPropConfig:
    a = cfg.alignprop
    return AlignPropConfig(
        prompts=list(prompts),
        reward_weights=weights,
        iters=a.iters,
        prompts_per_iter=a.prompts_per_iter,
        truncation_max=a.truncation_max,
        seed=a.seed,
        learning_rate=a.learning_rate,
        grad_clip=a.grad_clip,
        eval_every=a.eval_every,
        checkpoint_every=a.checkpoint_every,
    )


def tune_condition(cfg: RunConfig, model, models: RewardModels, weights: RewardWeights, n_train: int | None = None):
    """Stage 2 for one reward weighting; returns ``(model, TrainingLog)``."""
    train, heldout = prompt_split(cfg, n_train)
    eval_sets = {"heldout": heldout}
    if cfg.alignprop.n_train_eval_prompts:
        eval_sets["train"] = train[: cfg.alignprop.n_train_eval_prompts]

    def reward(pair, prompts):
        return composite_reward(pair, prompts, weights, models)

    frozen = [models.mono] if isinstance(models.mono, torch.nn.Module) else []
    return finetune_reward(
        model,
        _alignprop_config(cfg, train, weights),
        reward,
        schedule_of(cfg),
        sampler_config(cfg),
        eval_sets=eval_sets,
        frozen_modules=frozen,
    )


def train_stage2(cfg: RunConfig) -> tuple[torch.nn.Module, TrainingLog]:
    model, header = load_denoiser(require(cfg, "stage1"))
    models = reward_models(cfg)
    model, train_log = tune_condition(cfg, model, models, reward_weights(cfg))
    out = run_dir(cfg)
    save_denoiser(artifact(cfg, "stage2"), model, header["schedule"], header["lora"])
    train_log.to_csv(out / "stage2_log.csv", out / "stage2_eval.csv")
    return model, train_log


def latest_model_path(cfg: RunConfig) -> Path:
    for key in ("stage2", "stage1", "base"):
        path = artifact(cfg, key)
        if path.exists():
            return path
    raise FileNotFoundError("no denoiser checkpoint found (stage2, stage1 or base)")


def sample_step(cfg: RunConfig, prompt: str, seed: int | None, out: str | Path) -> Path:
    spec = parse_caption(prompt)
    model, _ = load_denoiser(latest_model_path(cfg))
    seed = cfg.sampler.seed if seed is None else seed
    with torch.no_grad():
        stacked = generate(model, [spec], schedule_of(cfg), sampler_config(cfg), seed)[0]
    pair = unstack(stacked)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "left.png", to_hwc(pair.left).clip(-1, 1))
    save_png(out / "right.png", to_hwc(pair.right).clip(-1, 1))
    save_png(out / "stacked.png", to_hwc(stacked).clip(-1, 1))
    return out


def evaluate_step(cfg: RunConfig) -> list[dict]:
    """Score the latest model (or the dataset's own pairs) on the held-out prompts."""
    models = reward_models(cfg)
    weights = reward_weights(cfg)
    out = run_dir(cfg)
    if cfg.eval.source == "dataset":
        records = load_dataset(require(cfg, "dataset"))[: cfg.eval.n_prompts]
        prompts = [r.prompt for r in records]
        source = StereoPair(torch.stack([r.pair.left for r in records]), torch.stack([r.pair.right for r in records]))
        label = "dataset"
    else:
        _, prompts = prompt_split(cfg)
        path = latest_model_path(cfg)
        source, _ = load_denoiser(path)
        label = path.stem
    scores = per_prompt_scores(
        source, prompts, models, weights, schedule_of(cfg), sampler_config(cfg), cfg.eval.seed
    )
    rows = metrics_rows(label, prompts, scores, cfg.eval.seed)
    table = aggregate(rows, cfg.eval.seed)
    write_csv(out / "metrics.csv", rows, METRICS_COLUMNS)
    write_csv(out / "table.csv", [asdict(r) for r in table])
    (out / "table.txt").write_text(format_table(table))
    return rows


def ablate_step(cfg: RunConfig, conditions: list[Condition] | None = None):
    stage1 = require(cfg, "stage1")
    models = reward_models(cfg)
    r = cfg.reward
    if conditions is None:
        conditions = default_conditions(cfg.ablation.prompt_set_sizes, r.alpha, r.beta, r.gamma)
        if not cfg.ablation.include_stereo_only:
            conditions = [c for c in conditions if c.label != "Base + Stereo"]
    _, heldout = prompt_split(cfg)

    def load_base():
        return load_denoiser(stage1)[0]

    def tune(model, cond: Condition):
        return tune_condition(cfg, model, models, cond.weights, cond.n_train_prompts)

    out = run_dir(cfg) / "ablation"
    return run_ablation(
        conditions, heldout, models, load_base, tune, schedule_of(cfg), sampler_config(cfg), cfg.eval.seed, out
    )


def plot_step(cfg: RunConfig) -> list[Path]:
    d = run_dir(cfg)
    log_path, eval_path = d / "stage2_log.csv", d / "stage2_eval.csv"
    if not log_path.exists():
        raise FileNotFoundError(f"no stage-2 log at {log_path}")
    return plot_curves(TrainingLog.from_csv(log_path, eval_path), d / "curves")
