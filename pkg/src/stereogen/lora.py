"""Low-rank adapters for linear and convolutional projections.

An adapted layer computes ``W x + scale * B (A x)`` where ``W`` (and its bias)
is frozen, ``A`` maps the input width down to ``rank`` and ``B`` maps back to
the output width. ``B`` starts at zero so a freshly wrapped layer reproduces
the base layer exactly.
"""

from __future__ import annotations

import fnmatch
import zlib
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F


def _check_rank(rank: int, d_out: int, d_in: int) -> None:
    if rank < 1 or rank >= min(d_out, d_in):
        raise ValueError(f"rank must be in [1, {min(d_out, d_in) - 1}] for a {d_out}x{d_in} weight, got {rank}")


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)


class LoraLinear(nn.Module):
    def __init__(
        self,
        weight: torch.Tensor,
        rank: int,
        seed: int = 0,
        scale: float = 1.0,
        bias: torch.Tensor | None = None,
    ):
        super().__init__()
        d_out, d_in = weight.shape
        _check_rank(rank, d_out, d_in)
        self.rank = rank
        self.scale = scale
        self.weight = nn.Parameter(weight.detach().clone(), requires_grad=False)
        self.bias = None if bias is None else nn.Parameter(bias.detach().clone(), requires_grad=False)
        a = torch.randn(rank, d_in, generator=_generator(seed), dtype=weight.dtype) / rank
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=weight.dtype))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected input width {self.in_features}, got {x.shape[-1]}")
        base = F.linear(x, self.weight, self.bias)
        return base + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged_weight(self) -> torch.Tensor:
        return self.weight + self.scale * (self.lora_B @ self.lora_A)


class LoraConv2d(nn.Module):
    """Conv analogue: ``A`` is a ``rank``-channel conv with the base kernel
    geometry, ``B`` a 1x1 conv back to the output channels."""

    def __init__(self, conv: nn.Conv2d, rank: int, seed: int = 0, scale: float = 1.0):
        super().__init__()
        if conv.groups != 1:
            raise ValueError("grouped convolutions are not supported")
        d_out = conv.out_channels
        d_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
        _check_rank(rank, d_out, d_in)
        self.rank = rank
        self.scale = scale
        self.stride, self.padding, self.dilation = conv.stride, conv.padding, conv.dilation
        self.weight = nn.Parameter(conv.weight.detach().clone(), requires_grad=False)
        self.bias = None if conv.bias is None else nn.Parameter(conv.bias.detach().clone(), requires_grad=False)
        a = torch.randn(rank, d_in, generator=_generator(seed), dtype=conv.weight.dtype) / rank
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=conv.weight.dtype))

    def _conv(self, x, weight, bias=None):
        return F.conv2d(x, weight, bias, self.stride, self.padding, self.dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = self.lora_A.view(self.rank, *self.weight.shape[1:])
        low = self._conv(x, a)
        low = F.conv2d(low, self.lora_B[:, :, None, None])
        return self._conv(x, self.weight, self.bias) + self.scale * low

    def merged_weight(self) -> torch.Tensor:
        delta = (self.lora_B @ self.lora_A).view_as(self.weight)
        return self.weight + self.scale * delta


def wrap_linear(weight: torch.Tensor, rank: int, seed: int = 0, scale: float = 1.0, bias=None) -> LoraLinear:
    return LoraLinear(weight, rank, seed=seed, scale=scale, bias=bias)


def forward(layer: LoraLinear, x: torch.Tensor) -> torch.Tensor:
    return layer(x)


def merge(layer: LoraLinear | LoraConv2d) -> torch.Tensor:
    """Dense weight equivalent to the adapted layer."""
    with torch.no_grad():
        return layer.merged_weight().clone()


LORA_TYPES = (LoraLinear, LoraConv2d)


def _layer_seed(seed: int, name: str) -> int:
    return seed * 1_000_003 + zlib.crc32(name.encode())


def inject_lora(
    model: nn.Module,
    targets: Iterable[str],
    rank: int = 4,
    scale: float = 1.0,
    seed: int = 0,
    conv_rank: int | None = None,
) -> dict[str, dict]:
    """Replace every Linear/Conv2d whose qualified name matches a glob in
    ``targets`` with its adapted counterpart, then freeze all non-adapter
    parameters.

    Returns the injection map ``{name: {"kind", "rank", "scale"}}``. Layers too
    narrow for the requested rank get ``min(dims) - 1``.
    """
    targets = list(targets)
    plan = []
    for name, module in model.named_modules():
        if not any(fnmatch.fnmatchcase(name, pat) for pat in targets):
            continue
        if isinstance(module, (nn.Linear, nn.Conv2d)) and not isinstance(module, LORA_TYPES):
            plan.append((name, module))
    if not plan:
        raise ValueError(f"no Linear/Conv2d layers match {targets}")

    injected = {}
    for name, module in plan:
        if isinstance(module, nn.Linear):
            r = min(rank, min(module.weight.shape) - 1)
            new = LoraLinear(module.weight, r, seed=_layer_seed(seed, name), scale=scale, bias=module.bias)
            kind = "linear"
        else:
            flat = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            r = min(conv_rank or rank, min(module.out_channels, flat) - 1)
            new = LoraConv2d(module, r, seed=_layer_seed(seed, name), scale=scale)
            kind = "conv2d"
        parent_name, _, child = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, child, new)
        injected[name] = {"kind": kind, "rank": r, "scale": scale}

    for p in model.parameters():
        p.requires_grad_(False)
    for p in lora_parameters(model):
        p.requires_grad_(True)
    return injected


def lora_layers(model: nn.Module) -> dict[str, nn.Module]:
    return {n: m for n, m in model.named_modules() if isinstance(m, LORA_TYPES)}


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    params = []
    for m in lora_layers(model).values():
        params += [m.lora_A, m.lora_B]
    return params


def adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    out = {}
    for name, m in lora_layers(model).items():
        out[f"{name}.lora_A"] = m.lora_A.detach().clone()
        out[f"{name}.lora_B"] = m.lora_B.detach().clone()
    return out


def base_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Everything except adapter factors; handy for frozen-weight checks."""
    return {k: v.detach().clone() for k, v in model.state_dict().items() if ".lora_" not in k}


def load_adapter_state(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    layers = lora_layers(model)
    expected = {f"{n}.lora_{f}" for n in layers for f in "AB"}
    if set(state) != expected:
        missing, extra = expected - set(state), set(state) - expected
        raise ValueError(f"adapter mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    with torch.no_grad():
        for name, m in layers.items():
            m.lora_A.copy_(state[f"{name}.lora_A"])
            m.lora_B.copy_(state[f"{name}.lora_B"])
