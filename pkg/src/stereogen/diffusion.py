"""Pixel-space text-conditioned diffusion: schedule, noising, denoiser, loss, sampler."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint as _checkpoint


# ----------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor  # float64, (T,)
    alpha_bars: torch.Tensor  # float64, (T,)

    @property
    def num_steps(self) -> int:
        return int(self.betas.numel())


def make_schedule(num_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError(f"num_steps must be positive, got {num_steps}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    return schedule_from_betas(betas)


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
    if betas.numel() < 1 or bool(((betas <= 0) | (betas >= 1)).any()):
        raise ValueError("betas must lie strictly inside (0, 1)")
    return NoiseSchedule(betas=betas, alpha_bars=torch.cumprod(1.0 - betas, dim=0))


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` is an int or a (B,) tensor."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0/eps shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if bool(((t < 0) | (t >= schedule.num_steps)).any()):
        raise ValueError(f"timestep out of range [0, {schedule.num_steps})")
    abar = schedule.alpha_bars[t].to(x0.dtype)
    if abar.dim() == 1:
        abar = abar.view(-1, *([1] * (x0.dim() - 1)))
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps


# ----------------------------------------------------------------------------
# prompt embedding


def _token_vector(token: str, dim: int) -> torch.Tensor:
    digest = hashlib.sha256(token.encode()).digest()
    g = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF)
    return torch.randn(dim, generator=g, dtype=torch.float64)


def encode_prompt(text: str, dim: int = 64) -> torch.Tensor:
    """Hashed bag of unigrams and bigrams, unit-normalized.

    Bigrams keep "red rectangle ... gray background" distinct from its
    colour-swapped twin. The empty string maps to the all-zero null prompt.
    """
    tokens = text.lower().split()
    if not tokens:
        return torch.zeros(dim)
    grams = tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
    v = torch.stack([_token_vector(g, dim) for g in grams]).sum(0)
    return (v / v.norm()).float()


def encode_prompts(texts: list[str], dim: int = 64) -> torch.Tensor:
    return torch.stack([encode_prompt(t, dim) for t in texts])


class Denoiser(Protocol):
    def __call__(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor: ...


# ----------------------------------------------------------------------------
# U-Net


@dataclass
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    cond_dim: int = 64
    emb_dim: int = 128
    attn_heads: int = 4
    groups: int = 8
    image_size: tuple[int, int] = (64, 64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _positional_grid(h: int, w: int, ch: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, (h*w, ch)."""
    quarter = ch // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float32) / max(quarter, 1))
    ys = torch.arange(h, dtype=torch.float32)[:, None] * freqs
    xs = torch.arange(w, dtype=torch.float32)[:, None] * freqs
    ey = torch.cat([ys.sin(), ys.cos()], 1)[:, None, :].expand(h, w, 2 * quarter)
    ex = torch.cat([xs.sin(), xs.cos()], 1)[None, :, :].expand(h, w, 2 * quarter)
    enc = torch.cat([ey, ex], dim=-1).reshape(h * w, 4 * quarter)
    return F.pad(enc, (0, ch - enc.shape[1]))


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, cond_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.film = nn.Linear(cond_dim, 2 * c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb, cemb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        scale, shift = self.film(cemb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Attention(nn.Module):
    def __init__(self, ch: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, ch)
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(ch, ch)
        self.to_v = nn.Linear(ch, ch)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        tokens = tokens + _positional_grid(h, w, c).to(tokens)
        q, k, v = (
            proj(tokens).view(b, h * w, self.heads, c // self.heads).transpose(1, 2)
            for proj in (self.to_q, self.to_k, self.to_v)
        )
        out = F.scaled_dot_product_attention(q, k, v)
        out = self.to_out(out.transpose(1, 2).reshape(b, h * w, c))
        return x + out.transpose(1, 2).view(b, c, h, w)


class UNet(nn.Module):
    """Small encoder-decoder predicting the injected noise.

    Timestep features are added inside every residual block; the prompt
    embedding modulates normalized features (scale/shift). Self-attention runs
    at the coarsest resolution, where one token spans the vertical distance
    between the two stacked views.
    """

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        cfg = cfg or UNetConfig()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        e, cd, g = cfg.emb_dim, cfg.cond_dim, cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_channels, e), nn.SiLU(), nn.Linear(e, e))
        self.cond_mlp = nn.Sequential(nn.Linear(cd, e), nn.SiLU(), nn.Linear(e, e))
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        c_prev = chans[0]
        for i, c in enumerate(chans):
            self.down_blocks.append(ResBlock(c_prev, c, e, e, g))
            c_prev = c
            if i < len(chans) - 1:
                self.downsamplers.append(nn.Conv2d(c, c, 3, stride=2, padding=1))

        self.mid1 = ResBlock(c_prev, c_prev, e, e, g)
        self.attn = Attention(c_prev, cfg.attn_heads, g)
        self.mid2 = ResBlock(c_prev, c_prev, e, e, g)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(len(chans))):
            c_skip = chans[i]
            c_out = chans[i - 1] if i > 0 else chans[0]
            self.up_blocks.append(ResBlock(c_prev + c_skip, c_out, e, e, g))
            c_prev = c_out
            if i > 0:
                self.upsamplers.append(nn.Conv2d(c_out, c_out, 3, padding=1))

        self.norm_out = nn.GroupNorm(g, c_prev)
        self.conv_out = nn.Conv2d(c_prev, cfg.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, device=x.device)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_features(t, self.cfg.base_channels).to(x.dtype))
        cemb = self.cond_mlp(cond.to(x.dtype))

        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb, cemb)
            skips.append(h)
            if i < len(self.downsamplers):
                h = self.downsamplers[i](h)
        h = self.mid2(self.attn(self.mid1(h, temb, cemb)), temb, cemb)
        for j, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), temb, cemb)
            if j < len(self.upsamplers):
                h = self.upsamplers[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def build_unet(cfg: UNetConfig | None = None, seed: int = 0) -> UNet:
    """Seeded initialisation that leaves the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)


ATTENTION_TARGETS = ("*attn.to_q", "*attn.to_k", "*attn.to_v", "*attn.to_out")


# ----------------------------------------------------------------------------
# training objective


def denoise_loss(
    denoiser: Denoiser,
    x0: torch.Tensor,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction MSE with one uniform timestep and fresh noise per item."""
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    b = x0.shape[0]
    t = torch.randint(0, schedule.num_steps, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_diffuse(x0, t, eps, schedule)
    return F.mse_loss(denoiser(x_t, cond, t), eps)


# ----------------------------------------------------------------------------
# sampling


@dataclass
class SamplerConfig:
    num_sample_steps: int = 20
    guidance_scale: float = 1.0
    deterministic: bool = True
    seed: int = 0
    clip_x0: bool = True

    def validate(self, schedule: NoiseSchedule) -> None:
        if not 1 <= self.num_sample_steps <= schedule.num_steps:
            raise ValueError(f"num_sample_steps must be in [1, {schedule.num_steps}]")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be nonnegative")
        if not self.deterministic:
            raise ValueError("only the deterministic sampler is implemented")


def sample_timesteps(schedule: NoiseSchedule, num_sample_steps: int) -> list[int]:
    """Strictly decreasing, evenly spaced, always starting at T - 1."""
    T = schedule.num_steps
    stride = T / num_sample_steps
    return [T - 1 - int(round(i * stride)) for i in range(num_sample_steps)]


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def ddim_coefficients(schedule: NoiseSchedule, t: int, t_prev: int) -> tuple[float, float]:
    """``x_prev = c_x * x_t + c_eps * eps_hat`` for the zero-variance update."""
    abar_t = float(schedule.alpha_bars[t])
    abar_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bars[t_prev])
    c_x = math.sqrt(abar_prev / abar_t)
    c_eps = math.sqrt(1.0 - abar_prev) - math.sqrt(abar_prev * (1.0 - abar_t) / abar_t)
    return c_x, c_eps


def guided_eps(denoiser: Denoiser, x, cond, t, guidance_scale: float, null_cond=None):
    t_vec = torch.full((x.shape[0],), t, dtype=torch.long)
    eps = denoiser(x, cond, t_vec)
    if guidance_scale == 1.0:
        return eps
    uncond = torch.zeros_like(cond) if null_cond is None else null_cond.expand_as(cond)
    eps_u = denoiser(x, uncond, t_vec)
    return eps_u + guidance_scale * (eps - eps_u)


def sample(
    denoiser: Denoiser,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    differentiable_tail: int | None = None,
    shape: tuple[int, ...] | None = None,
    x_T: torch.Tensor | None = None,
    checkpoint_steps: bool = True,
    step_callback: Callable[[int, torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Run the deterministic chain from seeded noise to ``x_0``.

    With ``differentiable_tail=K`` only the final ``K`` updates are recorded
    for autograd; the state entering the tail is detached. Without it the
    whole chain runs under ``no_grad``. Tail steps are recomputed during
    backward when ``checkpoint_steps`` is set.

    ``cfg.clip_x0`` clamps each step's clean-image estimate to [-1, 1] before
    re-noising; without it the update is the plain linear DDIM step.

    ``step_callback(i, x)`` may replace the state before step ``i``; tests
    use it to perturb pre-tail states.
    """
    cfg.validate(schedule)
    n = cfg.num_sample_steps
    if differentiable_tail is not None and not 1 <= differentiable_tail <= n:
        raise ValueError(f"differentiable_tail must be in [1, {n}], got {differentiable_tail}")
    if x_T is None:
        if shape is None:
            raise ValueError("need either shape or x_T")
        x_T = initial_noise(shape, cfg.seed)
    steps = sample_timesteps(schedule, n)
    tail_start = n if differentiable_tail is None else n - differentiable_tail

    def update(x, c, i):
        t = steps[i]
        t_prev = steps[i + 1] if i + 1 < n else -1
        eps = guided_eps(denoiser, x, c, t, cfg.guidance_scale)
        if not cfg.clip_x0:
            c_x, c_eps = ddim_coefficients(schedule, t, t_prev)
            return c_x * x + c_eps * eps
        abar_t = float(schedule.alpha_bars[t])
        abar_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bars[t_prev])
        x0 = ((x - math.sqrt(1 - abar_t) * eps) / math.sqrt(abar_t)).clamp(-1.0, 1.0)
        eps = (x - math.sqrt(abar_t) * x0) / math.sqrt(1 - abar_t)
        return math.sqrt(abar_prev) * x0 + math.sqrt(1 - abar_prev) * eps

    x = x_T
    with torch.no_grad():
        for i in range(tail_start):
            if step_callback is not None:
                x = step_callback(i, x)
            x = update(x, cond, i)
    x = x.detach()
    for i in range(tail_start, n):
        if step_callback is not None:
            x = step_callback(i, x)
        if checkpoint_steps and torch.is_grad_enabled():
            x = _checkpoint(update, x, cond, i, use_reentrant=False)
        else:
            x = update(x, cond, i)
    return x
