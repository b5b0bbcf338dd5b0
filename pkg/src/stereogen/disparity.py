"""Stereo block matching and a small monocular disparity network.

Disparity follows ``d = x_left - x_right``: a left-view pixel at ``x`` matches
the right-view pixel at ``x - d``. Cost volumes are laid out
``(..., D, H, W)`` with candidate ``i`` meaning disparity ``disparities[i]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import StereoPair


@dataclass
class CostVolume:
    costs: torch.Tensor  # (..., D, H, W), SSD per candidate
    valid: torch.Tensor  # (D, 1, W) bool, broadcastable against costs
    disparities: torch.Tensor  # (D,) integer candidates, ascending

    def masked(self, fill: float) -> torch.Tensor:
        return self.costs.masked_fill(~self.valid, fill)


@dataclass
class MatcherConfig:
    max_disp: int = 8
    min_disp: int = -2
    patch: int = 5
    temperature: float = 0.05
    mode: str = "soft"  # "soft" (differentiable) or "hard" (argmin)
    shiftable: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _patches(img: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, C*patch*patch, H, W) with replicated borders."""
    b, c, h, w = img.shape
    r = patch // 2
    padded = F.pad(img, (r, r, r, r), mode="replicate") if r else img
    return F.unfold(padded, patch).view(b, c * patch * patch, h, w)


def cost_volume(
    left: torch.Tensor,
    right: torch.Tensor,
    max_disp: int,
    patch: int = 5,
    min_disp: int = 0,
) -> CostVolume:
    """Sum-of-squared-differences between the patch around ``left[y, x]`` and
    the patch around ``right[y, x - d]`` for every ``d in [min_disp, max_disp]``.

    Entries whose right-view centre falls outside the frame are flagged
    invalid; their stored cost is meaningless.
    """
    if left.shape != right.shape:
        raise ValueError(f"shape mismatch: {tuple(left.shape)} vs {tuple(right.shape)}")
    if left.dim() < 3:
        raise ValueError("expected (..., C, H, W) images")
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch must be a positive odd integer, got {patch}")
    w = left.shape[-1]
    if not 1 <= max_disp < w:
        raise ValueError(f"max_disp must be in [1, {w - 1}], got {max_disp}")
    if min_disp > 0 or -min_disp >= w:
        raise ValueError(f"min_disp must be in [{1 - w}, 0], got {min_disp}")

    lead = left.shape[:-3]
    flat_l = left.reshape(-1, *left.shape[-3:])
    flat_r = right.reshape(-1, *right.shape[-3:])
    pl = _patches(flat_l, patch)
    pr = _patches(flat_r, patch)

    disps = torch.arange(min_disp, max_disp + 1)
    xs = torch.arange(w)
    src = xs[None, :] - disps[:, None]  # (D, W)
    valid = (src >= 0) & (src < w)
    src = src.clamp(0, w - 1)
    costs = torch.stack([(pl - pr[..., src[i]]).square().sum(1) for i in range(len(disps))], dim=1)
    costs = costs.reshape(*lead, len(disps), *costs.shape[-2:])
    return CostVolume(costs=costs, valid=valid[:, None, :], disparities=disps)


def shiftable_windows(cv: CostVolume, window: int) -> CostVolume:
    """Replace each cost by the minimum over a ``window``-sized neighbourhood.

    Equivalent to letting every pixel pick the best of all matching windows
    that contain it, which stops foreground disparity bleeding across object
    edges. Invalid entries are excluded from the minimum.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if window == 1:
        return cv
    r = window // 2
    costs = cv.masked(float("inf"))
    lead = costs.shape[:-2]
    flat = costs.reshape(-1, 1, *costs.shape[-2:])
    flat = -F.max_pool2d(-flat, window, stride=1, padding=r)
    return CostVolume(flat.view(*lead, *costs.shape[-2:]), cv.valid, cv.disparities)


def hard_disparity(cv: CostVolume) -> torch.Tensor:
    """Per-pixel argmin over valid candidates; ties go to the smallest disparity."""
    idx = cv.masked(float("inf")).argmin(dim=-3)
    return cv.disparities.to(cv.costs.dtype)[idx]


def soft_disparity(cv: CostVolume, temperature: float) -> torch.Tensor:
    """Expectation of ``d`` under ``softmax(-cost / temperature)`` over valid candidates."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = cv.masked(float("inf")) / -temperature
    probs = torch.softmax(logits, dim=-3)
    d = cv.disparities.to(cv.costs.dtype).view(-1, 1, 1)
    return (probs * d).sum(dim=-3)


def estimate_stereo(pair: StereoPair, cfg: MatcherConfig | None = None) -> torch.Tensor:
    """Left-view disparity for a (possibly batched) pair.

    SSD block matching, optionally with shiftable-window aggregation, then a
    softmin expectation (``mode="soft"``) or an argmin (``mode="hard"``).
    """
    cfg = cfg or MatcherConfig()
    cv = cost_volume(pair.left, pair.right, cfg.max_disp, cfg.patch, cfg.min_disp)
    if cfg.shiftable:
        cv = shiftable_windows(cv, cfg.patch)
    if cfg.mode == "soft":
        return soft_disparity(cv, cfg.temperature)
    if cfg.mode == "hard":
        return hard_disparity(cv)
    raise ValueError(f"unknown matcher mode {cfg.mode!r}")


# ----------------------------------------------------------------------------
# monocular estimator


@dataclass
class MonoConfig:
    channels: int = 16
    iters: int = 600
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class MonoNet(nn.Module):
    """Four-conv encoder-decoder producing relative disparity from one view.

    Output scale and offset are arbitrary; only correlation with true
    disparity is meaningful.
    """

    def __init__(self, channels: int = 16):
        super().__init__()
        c = channels
        self.enc1 = nn.Conv2d(3, c, 3, padding=1)
        self.enc2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.ctx = nn.Conv2d(2 * c, 2 * c, 3, padding=4, dilation=4)
        self.dec = nn.Conv2d(2 * c + c, 1, 3, padding=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        squeeze = image.dim() == 3
        if squeeze:
            image = image[None]
        h1 = F.silu(self.enc1(image))
        h2 = F.silu(self.enc2(h1))
        h2 = h2 + F.silu(self.ctx(h2))
        up = F.interpolate(h2, size=h1.shape[-2:], mode="bilinear", align_corners=False)
        out = self.dec(torch.cat([up, h1], dim=1))[:, 0]
        return out[0] if squeeze else out

    estimate = forward


def correlation_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    from .rewards import pearson

    return 1.0 - pearson(pred, target, batch_dims=1).mean()


def train_mono(images: torch.Tensor, disparities: torch.Tensor, cfg: MonoConfig | None = None) -> MonoNet:
    """Fit ``MonoNet`` to (left view, GT disparity) pairs with a correlation loss.

    ``images`` is (N, 3, H, W), ``disparities`` (N, H, W).
    """
    cfg = cfg or MonoConfig()
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    if images.shape[0] != disparities.shape[0]:
        raise ValueError("images and disparities differ in length")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = MonoNet(cfg.channels)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    n = images.shape[0]
    for it in range(cfg.iters):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=g)
        x = images[idx]
        if torch.rand((), generator=g) < 0.5:
            x, y = x.flip(-1), disparities[idx].flip(-1)
        else:
            y = disparities[idx]
        loss = correlation_loss(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net
