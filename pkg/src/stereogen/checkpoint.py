"""Checkpoint archives: a zip holding ``header.json`` plus one ``.npy`` per array.

Entries carry a fixed timestamp so identical contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from . import lora as lora_mod
from .codec import STACK_ORDER
from .diffusion import UNet, UNetConfig
from .disparity import MonoNet

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_archive(path: str | Path, header: dict, arrays: dict[str, torch.Tensor | np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": FORMAT_VERSION, **header}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_entry("header.json"), json.dumps(header, indent=2, sort_keys=True))
        for name in sorted(arrays):
            value = arrays[name]
            if torch.is_tensor(value):
                value = value.detach().cpu().numpy()
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(value), allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())
    tmp.replace(path)


def load_archive(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
        arrays = {}
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                key = name[len("arrays/") : -len(".npy")]
                arrays[key] = torch.from_numpy(np.load(io.BytesIO(zf.read(name)), allow_pickle=False))
    return header, arrays


# ----------------------------------------------------------------------------
# model-level helpers


def save_denoiser(path, model: UNet, schedule: dict, lora: dict | None = None, extra: dict | None = None) -> None:
    header = {
        "kind": "denoiser",
        "architecture": model.cfg.to_dict(),
        "schedule": schedule,
        "stack_order": STACK_ORDER,
        "lora": lora,
        **(extra or {}),
    }
    save_archive(path, header, dict(model.state_dict()))


def build_denoiser(header: dict) -> UNet:
    model = UNet(UNetConfig.from_dict(header["architecture"]))
    spec = header.get("lora")
    if spec:
        lora_mod.inject_lora(
            model, spec["targets"], rank=spec["rank"], scale=spec["scale"],
            seed=spec["seed"], conv_rank=spec.get("conv_rank"),
        )
    return model


def load_denoiser(path) -> tuple[UNet, dict]:
    header, arrays = load_archive(path)
    if header.get("kind") != "denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    if header.get("stack_order") != STACK_ORDER:
        raise ValueError(f"{path}: stack order {header.get('stack_order')!r} != {STACK_ORDER!r}")
    model = build_denoiser(header)
    model.load_state_dict(arrays)
    return model, header


def save_adapter(path, model: UNet, lora: dict, extra: dict | None = None) -> None:
    header = {"kind": "adapter", "stack_order": STACK_ORDER, "lora": lora, **(extra or {})}
    save_archive(path, header, lora_mod.adapter_state(model))


def load_adapter(model: UNet, path) -> dict:
    """Load adapter factors onto a model already carrying matching adapters."""
    header, arrays = load_archive(path)
    if header.get("kind") != "adapter":
        raise ValueError(f"{path} is not an adapter checkpoint")
    injected = {n: {"kind": v["kind"], "rank": v["rank"]} for n, v in header["lora"]["injection"].items()}
    present = {
        n: {"kind": "linear" if isinstance(m, lora_mod.LoraLinear) else "conv2d", "rank": m.rank}
        for n, m in lora_mod.lora_layers(model).items()
    }
    if injected != present:
        raise ValueError("adapter injection map does not match the model")
    lora_mod.load_adapter_state(model, arrays)
    return header


def save_mono(path, net: MonoNet, extra: dict | None = None) -> None:
    header = {"kind": "mono", "channels": net.enc1.out_channels, **(extra or {})}
    save_archive(path, header, dict(net.state_dict()))


def load_mono(path) -> MonoNet:
    header, arrays = load_archive(path)
    if header.get("kind") != "mono":
        raise ValueError(f"{path} is not a monocular estimator checkpoint")
    net = MonoNet(header["channels"])
    net.load_state_dict(arrays)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net
