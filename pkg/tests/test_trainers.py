import math

import numpy as np
import pytest
import torch

from stereogen.diffusion import SamplerConfig, UNetConfig, build_unet, denoise_loss, encode_prompts, make_schedule
from stereogen.lora import adapter_state, base_state, inject_lora
from stereogen.rewards import RewardReport
from stereogen.synthdata import split_prompts
from stereogen.trainers import (
    AlignPropConfig,
    TrainConfig,
    TrainingLog,
    derive_seed,
    finetune_reward,
    finetune_stereo,
    generate,
    smoothed,
)

TINY = UNetConfig(base_channels=8, channel_mult=(1, 2), cond_dim=16, emb_dim=16, attn_heads=2, groups=4, image_size=(8, 8))
SCHEDULE = make_schedule(1000, 1e-4, 0.02)
SAMPLER = SamplerConfig(num_sample_steps=3)
PROMPTS, HELDOUT = split_prompts(6, 4, 0)


def adapted(cfg=TINY, rank=4, targets=("*",), seed=0):
    model = build_unet(cfg, seed=seed)
    inject_lora(model, list(targets), rank=rank)
    return model


def tiny_data(n=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 8, 8, generator=g) * 2 - 1, [p.text for p in PROMPTS[:n]]


def params_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class Brightness:
    """Toy reward: mean brightness of the left view, optionally through a probe module."""

    def __init__(self, probe=None, poison_at=()):
        self.probe, self.poison_at, self.calls = probe, set(poison_at), 0

    def __call__(self, pair, prompts):
        self.calls += 1
        left = pair.left if self.probe is None else self.probe(pair.left)
        r_s = left.mean(dim=(1, 2, 3))
        if self.calls in self.poison_at:
            r_s = r_s * float("nan")
        zero = torch.zeros_like(r_s)
        return RewardReport(r_s=r_s, r_p=zero, r_c=zero, r_total=r_s)


# ----------------------------------------------------------------------------
# shared helpers


def test_derive_seed_and_smoothing():
    assert derive_seed(1, "a") == derive_seed(1, "a") != derive_seed(1, "b")
    assert 0 <= derive_seed("x") < 2**63
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(smoothed([5.0] * 7, 50), [5.0] * 7)


def test_training_log_roundtrip_and_monotone_queries(tmp_path):
    log = TrainingLog()
    log.append(step=0, queries=4, loss=0.5)
    log.append(step=1, queries=8, loss=float("nan"))
    log.eval_records.append({"step": 0, "set": "heldout", "r_s_mean": 0.25})
    log.to_csv(tmp_path / "log.csv", tmp_path / "eval.csv")
    back = TrainingLog.from_csv(tmp_path / "log.csv", tmp_path / "eval.csv")
    assert back.records[0] == {"step": 0, "queries": 4, "loss": 0.5}
    assert math.isnan(back.records[1]["loss"])
    assert back.eval_records == log.eval_records
    with pytest.raises(ValueError):
        log.append(step=2, queries=7, loss=0.1)


# ----------------------------------------------------------------------------
# stage 1


def test_stage1_overfits_single_item():
    cfg = UNetConfig(base_channels=32, channel_mult=(1, 2), cond_dim=16, emb_dim=32, attn_heads=2, groups=4, image_size=(8, 8))
    model = adapted(cfg, rank=8)
    x = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(0)) * 2 - 1
    cond = encode_prompts(["p"], 16).expand(64, -1)

    def item_loss():
        g = torch.Generator().manual_seed(123)
        with torch.no_grad():
            return np.mean([denoise_loss(model, x.expand(64, -1, -1, -1), cond, SCHEDULE, g).item() for _ in range(4)])

    before = item_loss()
    train = TrainConfig(learning_rate=1e-2, total_iters=200, batch_size=16, uncond_prob=0.0)
    finetune_stereo(model, x, ["p"], SCHEDULE, train)
    assert item_loss() <= 0.1 * before


def test_stage1_freezes_base_and_is_deterministic():
    x, caps = tiny_data()
    train = TrainConfig(learning_rate=1e-3, total_iters=5, batch_size=2)
    runs = []
    for _ in range(2):
        model = adapted()
        frozen = base_state(model)
        _, log = finetune_stereo(model, x, caps, SCHEDULE, train)
        assert params_equal(frozen, base_state(model))
        assert len(log) == 5 and all(r["queries"] == 0 for r in log.records)
        runs.append(adapter_state(model))
    assert params_equal(*runs)
    assert any(v.abs().sum() > 0 for k, v in runs[0].items() if k.endswith("lora_B"))


def test_stage1_zero_lr_changes_nothing():
    x, caps = tiny_data()
    model = adapted()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    finetune_stereo(model, x, caps, SCHEDULE, TrainConfig(learning_rate=0.0, total_iters=3, batch_size=2))
    assert params_equal(before, dict(model.state_dict()))


def test_stage1_resume_matches_uninterrupted(tmp_path):
    x, caps = tiny_data()
    train = TrainConfig(learning_rate=1e-3, total_iters=6, batch_size=2, checkpoint_every=3)
    full = adapted()
    _, full_log = finetune_stereo(full, x, caps, SCHEDULE, train, checkpoint_dir=tmp_path)
    state = tmp_path / "stage1-state-000003.zip"
    assert state.exists()

    resumed = adapted()
    partial = TrainingLog(full_log.records[:5])  # a log written past the checkpoint is truncated
    _, log = finetune_stereo(resumed, x, caps, SCHEDULE, train, resume_from=state, log_=partial)
    assert params_equal(adapter_state(full), adapter_state(resumed))
    assert [r["loss"] for r in log.records] == [r["loss"] for r in full_log.records]


def test_stage1_rejects_bad_inputs():
    x, caps = tiny_data()
    with pytest.raises(ValueError):
        finetune_stereo(build_unet(TINY), x, caps, SCHEDULE, TrainConfig(total_iters=1))
    with pytest.raises(ValueError):
        finetune_stereo(adapted(), torch.zeros(4, 3, 16, 8), caps, SCHEDULE, TrainConfig(total_iters=1))
    with pytest.raises(ValueError):
        finetune_stereo(adapted(), x, caps[:-1], SCHEDULE, TrainConfig(total_iters=1))
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step").validate()


# ----------------------------------------------------------------------------
# stage 2


def test_generate_noise_is_per_prompt():
    model = adapted()
    both = generate(model, PROMPTS[:2], SCHEDULE, SAMPLER, seed=3)
    alone = generate(model, PROMPTS[1:2], SCHEDULE, SAMPLER, seed=3)
    assert both.shape == (2, 3, 8, 8)
    assert torch.allclose(both[1], alone[0], atol=1e-6)
    assert torch.equal(both, generate(model, PROMPTS[:2], SCHEDULE, SAMPLER, seed=3))


def test_stage2_counts_queries_and_freezes_probe():
    model = adapted()
    probe = torch.nn.Conv2d(3, 3, 1)
    probe_before = {k: v.clone() for k, v in probe.state_dict().items()}
    base_before = base_state(model)
    cfg = AlignPropConfig(prompts=PROMPTS, iters=4, prompts_per_iter=3, truncation_max=3, eval_every=2, learning_rate=1e-3)
    _, log = finetune_reward(
        model, cfg, Brightness(probe), SCHEDULE, SAMPLER, eval_sets={"heldout": HELDOUT}, frozen_modules=[probe]
    )
    assert [r["queries"] for r in log.records] == [3, 6, 9, 12]
    assert log.records[-1]["queries"] == cfg.iters * cfg.prompts_per_iter
    assert {r["tail"] for r in log.records} <= {1, 2, 3}
    assert [r["step"] for r in log.eval_records] == [0, 2, 4]
    assert all(r["n"] == len(HELDOUT) and "r_s_std" in r for r in log.eval_records)
    assert params_equal(probe_before, dict(probe.state_dict()))
    assert not any(p.requires_grad for p in probe.parameters())
    assert params_equal(base_before, base_state(model))


def test_stage2_zero_lr_and_determinism():
    cfg = AlignPropConfig(prompts=PROMPTS, iters=3, prompts_per_iter=2, truncation_max=2, learning_rate=0.0)
    model = adapted()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    finetune_reward(model, cfg, Brightness(), SCHEDULE, SAMPLER)
    assert params_equal(before, dict(model.state_dict()))

    cfg.learning_rate = 1e-2
    a, b = adapted(), adapted()
    _, log_a = finetune_reward(a, cfg, Brightness(), SCHEDULE, SAMPLER)
    _, log_b = finetune_reward(b, cfg, Brightness(), SCHEDULE, SAMPLER)
    assert params_equal(adapter_state(a), adapter_state(b))
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    assert strip(log_a.records) == strip(log_b.records)


def test_stage2_resume_matches_uninterrupted(tmp_path):
    cfg = AlignPropConfig(prompts=PROMPTS, iters=4, prompts_per_iter=2, truncation_max=2, learning_rate=1e-2, checkpoint_every=2)
    full = adapted()
    _, full_log = finetune_reward(full, cfg, Brightness(), SCHEDULE, SAMPLER, checkpoint_dir=tmp_path)
    resumed = adapted()
    _, log = finetune_reward(
        resumed, cfg, Brightness(), SCHEDULE, SAMPLER,
        resume_from=tmp_path / "stage2-state-000002.zip", log_=TrainingLog(full_log.records[:2]),
    )
    assert params_equal(adapter_state(full), adapter_state(resumed))
    assert [r["queries"] for r in log.records] == [2, 4, 6, 8]


def test_stage2_skips_non_finite_reward():
    model = adapted()
    cfg = AlignPropConfig(prompts=PROMPTS, iters=3, prompts_per_iter=2, truncation_max=1, learning_rate=1e-2)
    reward = Brightness(poison_at={1})
    before = adapter_state(model)
    _, log = finetune_reward(model, cfg, reward, SCHEDULE, SAMPLER)
    assert [r["skipped"] for r in log.records] == [1, 0, 0]
    assert log.records[0]["queries"] == 2  # a skipped step still spent its queries
    assert not params_equal(before, adapter_state(model))
    assert all(torch.isfinite(v).all() for v in adapter_state(model).values())


def test_stage2_increases_toy_reward():
    model = adapted()
    cfg = AlignPropConfig(prompts=PROMPTS, iters=15, prompts_per_iter=4, truncation_max=1, learning_rate=3e-2, eval_every=15)
    _, log = finetune_reward(model, cfg, Brightness(), SCHEDULE, SAMPLER, eval_sets={"heldout": HELDOUT})
    first, last = log.eval_records[0]["r_s_mean"], log.eval_records[-1]["r_s_mean"]
    assert last > first + 0.05


def test_stage2_validation():
    model = adapted()
    with pytest.raises(ValueError):
        finetune_reward(model, AlignPropConfig(prompts=[]), Brightness(), SCHEDULE, SAMPLER)
    with pytest.raises(ValueError):
        finetune_reward(model, AlignPropConfig(prompts=PROMPTS, truncation_max=4), Brightness(), SCHEDULE, SAMPLER)
    with pytest.raises(ValueError):
        finetune_reward(model, AlignPropConfig(prompts=PROMPTS, truncation_max=0), Brightness(), SCHEDULE, SAMPLER)
    with pytest.raises(ValueError):
        finetune_reward(build_unet(TINY), AlignPropConfig(prompts=PROMPTS, truncation_max=1), Brightness(), SCHEDULE, SAMPLER)
