import json
import zipfile

import numpy as np
import pytest
import torch

from stereogen.checkpoint import (
    load_adapter,
    load_archive,
    load_denoiser,
    load_mono,
    save_adapter,
    save_archive,
    save_denoiser,
    save_mono,
)
from stereogen.codec import STACK_ORDER
from stereogen.diffusion import UNetConfig, build_unet
from stereogen.disparity import MonoNet
from stereogen.lora import adapter_state, inject_lora, lora_parameters

TINY = UNetConfig(base_channels=8, channel_mult=(1, 2), cond_dim=16, emb_dim=16, attn_heads=2, groups=4, image_size=(8, 8))
SCHED = {"num_steps": 1000, "beta_start": 1e-4, "beta_end": 0.02}


def lora_model(seed=0):
    model = build_unet(TINY, seed=seed)
    injection = inject_lora(model, ["*attn.to_q", "*attn.to_v"], rank=2, seed=seed)
    spec = {"targets": ["*attn.to_q", "*attn.to_v"], "rank": 2, "scale": 1.0, "seed": seed, "conv_rank": None, "injection": injection}
    with torch.no_grad():
        for p in lora_parameters(model):
            p.normal_()
    return model, spec


def test_archive_roundtrip_and_byte_stability(tmp_path):
    arrays = {"b": torch.arange(6, dtype=torch.float32).view(2, 3), "a": np.array([1, 2], dtype=np.int64)}
    save_archive(tmp_path / "x.zip", {"kind": "test", "n": 3}, arrays)
    save_archive(tmp_path / "y.zip", {"n": 3, "kind": "test"}, dict(reversed(list(arrays.items()))))
    assert (tmp_path / "x.zip").read_bytes() == (tmp_path / "y.zip").read_bytes()
    header, back = load_archive(tmp_path / "x.zip")
    assert header == {"format_version": 1, "kind": "test", "n": 3}
    assert torch.equal(back["b"], arrays["b"]) and back["a"].tolist() == [1, 2]
    assert not (tmp_path / "x.zip.tmp").exists()


def test_archive_rejects_unknown_version(tmp_path):
    path = tmp_path / "v.zip"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("header.json", json.dumps({"format_version": 99}))
    with pytest.raises(ValueError):
        load_archive(path)


def test_denoiser_roundtrip_with_adapters(tmp_path):
    model, spec = lora_model()
    save_denoiser(tmp_path / "m.zip", model, SCHED, spec)
    back, header = load_denoiser(tmp_path / "m.zip")
    assert header["schedule"] == SCHED and header["stack_order"] == STACK_ORDER
    x, c, t = torch.randn(2, 3, 8, 8), torch.randn(2, 16), torch.tensor([3, 700])
    with torch.no_grad():
        assert torch.equal(model(x, c, t), back(x, c, t))


def test_denoiser_header_checks(tmp_path):
    model = build_unet(TINY)
    save_mono(tmp_path / "mono.zip", MonoNet(4))
    with pytest.raises(ValueError):
        load_denoiser(tmp_path / "mono.zip")
    save_denoiser(tmp_path / "m.zip", model, SCHED, extra={"stack_order": "right-top"})
    with pytest.raises(ValueError):
        load_denoiser(tmp_path / "m.zip")


def test_adapter_files(tmp_path):
    model, spec = lora_model(seed=1)
    save_adapter(tmp_path / "a.zip", model, spec)
    fresh, _ = lora_model(seed=2)
    load_adapter(fresh, tmp_path / "a.zip")
    for k, v in adapter_state(model).items():
        assert torch.equal(v, adapter_state(fresh)[k])
    other = build_unet(TINY)
    inject_lora(other, ["*attn.to_k"], rank=2)
    with pytest.raises(ValueError):
        load_adapter(other, tmp_path / "a.zip")


def test_mono_roundtrip_is_frozen(tmp_path):
    net = MonoNet(4)
    save_mono(tmp_path / "mono.zip", net, {"report": {"r": 0.9}})
    back = load_mono(tmp_path / "mono.zip")
    assert not back.training and not any(p.requires_grad for p in back.parameters())
    x = torch.rand(2, 3, 16, 32)
    with torch.no_grad():
        assert torch.equal(net.eval()(x), back(x))
