"""Pair <-> stacked-image conversion.

The diffusion model only ever sees one image. A stereo pair is encoded by
placing the left view on top of the right view along the height axis; the
order is fixed and recorded in checkpoint headers as ``STACK_ORDER``.

Works on any tensor whose last three dims are ``(C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

STACK_ORDER = "left-top"


@dataclass
class StereoPair:
    left: torch.Tensor
    right: torch.Tensor

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(
                f"left/right shape mismatch: {tuple(self.left.shape)} vs {tuple(self.right.shape)}"
            )

    @property
    def shape(self) -> torch.Size:
        return self.left.shape

    def detach(self) -> "StereoPair":
        return StereoPair(self.left.detach(), self.right.detach())


def stack(pair: StereoPair) -> torch.Tensor:
    """Concatenate left over right: ``(..., C, H, W) -> (..., C, 2H, W)``."""
    if pair.left.shape != pair.right.shape:
        raise ValueError("left/right shape mismatch")
    return torch.cat([pair.left, pair.right], dim=-2)


def unstack(stacked: torch.Tensor) -> StereoPair:
    """Split a stacked image back into its two views."""
    if stacked.dim() < 3:
        raise ValueError(f"expected (..., C, H, W), got shape {tuple(stacked.shape)}")
    h2 = stacked.shape[-2]
    if h2 % 2:
        raise ValueError(f"stacked height must be even, got {h2}")
    h = h2 // 2
    return StereoPair(stacked[..., :h, :], stacked[..., h:, :])
