"""Stereo-consistency, prompt-consistency and convergence rewards.

All rewards take batched tensors and return one value per item, and all
except the subprocess scorer are differentiable in the pixel values.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import torch

from .codec import StereoPair
from .disparity import MatcherConfig, estimate_stereo
from .synthdata import PromptSpec, focus_box, save_png, to_hwc

VARIANCE_EPS = 1e-8
MAX_SQ_COLOR_DIST = 12.0  # squared distance between opposite corners of [-1, 1]^3


def pearson(a: torch.Tensor, b: torch.Tensor, batch_dims: int = 0) -> torch.Tensor:
    """Pearson correlation over all non-batch elements.

    Returns 0 where either input has variance below ``VARIANCE_EPS``.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    lead = a.shape[:batch_dims]
    a = a.reshape(*lead, -1)
    b = b.reshape(*lead, -1)
    if a.shape[-1] < 2:
        raise ValueError("pearson needs at least two elements")
    da = a - a.mean(-1, keepdim=True)
    db = b - b.mean(-1, keepdim=True)
    va, vb = da.square().mean(-1), db.square().mean(-1)
    degenerate = (va < VARIANCE_EPS) | (vb < VARIANCE_EPS)
    denom = torch.sqrt(da.square().sum(-1) * db.square().sum(-1))
    r = (da * db).sum(-1) / torch.where(degenerate, torch.ones_like(denom), denom)
    return torch.where(degenerate, torch.zeros_like(r), r)


def convergence_reward(d_s: torch.Tensor, batch_dims: int = 0) -> torch.Tensor:
    """Penalty on negative disparity: ``-mean(relu(-d)) / max(max(-d), 1)`` per item."""
    lead = d_s.shape[:batch_dims]
    neg = -d_s.reshape(*lead, -1)
    denom = neg.max(-1).values.clamp(min=1.0)
    return -neg.clamp(min=0).mean(-1) / denom


class MonocularEstimator(Protocol):
    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


def stereo_reward(
    pair: StereoPair,
    matcher: MatcherConfig,
    mono: MonocularEstimator,
    return_maps: bool = False,
):
    """Correlation between monocular (left only) and stereo disparity.

    Works on a single pair (``(3, H, W)`` views) or a batch.
    """
    batch_dims = pair.left.dim() - 3
    d_s = estimate_stereo(pair, matcher)
    d_m = mono(pair.left)
    r = pearson(d_m, d_s, batch_dims=batch_dims)
    return (r, d_s, d_m) if return_maps else r


class PromptScorer(Protocol):
    def score(self, pair: StereoPair, prompts: Sequence[PromptSpec]) -> torch.Tensor: ...


class ToyColorScorer:
    """``1 - |mean colour of the prompted region - target colour|^2 / 12`` on the left view.

    The region is the fixed window associated with the prompt's position
    phrase; see ``synthdata.focus_box``.
    """

    def score(self, pair: StereoPair, prompts: Sequence[PromptSpec]) -> torch.Tensor:
        left = pair.left if pair.left.dim() == 4 else pair.left[None]
        if len(prompts) != left.shape[0]:
            raise ValueError(f"{len(prompts)} prompts for {left.shape[0]} images")
        h, w = left.shape[-2:]
        scores = []
        for img, prompt in zip(left, prompts):
            prompt.validate()
            ys, xs = focus_box(prompt.position_word, h, w)
            mu = img[:, ys, xs].mean(dim=(-2, -1))
            target = torch.tensor(prompt.target_color, dtype=img.dtype)
            scores.append(1.0 - (mu - target).square().sum() / MAX_SQ_COLOR_DIST)
        out = torch.stack(scores)
        return out if pair.left.dim() == 4 else out[0]


class SubprocessScorer:
    """Delegates scoring to an external command, one call per image pair.

    The command receives a JSON object on stdin
    ``{"left": <png path>, "right": <png path>, "prompt": <text>}`` and must
    print ``{"score": <float>}`` on stdout. Scores carry no gradient.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def _score_one(self, left: torch.Tensor, right: torch.Tensor, prompt: PromptSpec) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            lp, rp = Path(tmp) / "left.png", Path(tmp) / "right.png"
            save_png(lp, to_hwc(left).clip(-1, 1))
            save_png(rp, to_hwc(right).clip(-1, 1))
            request = json.dumps({"left": str(lp), "right": str(rp), "prompt": prompt.text})
            proc = subprocess.run(
                self.command, input=request, capture_output=True, text=True, timeout=self.timeout
            )
        if proc.returncode != 0:
            raise RuntimeError(f"scorer exited with {proc.returncode}: {proc.stderr.strip()}")
        return float(json.loads(proc.stdout)["score"])

    def score(self, pair: StereoPair, prompts: Sequence[PromptSpec]) -> torch.Tensor:
        batched = pair.left.dim() == 4
        lefts = pair.left if batched else pair.left[None]
        rights = pair.right if batched else pair.right[None]
        vals = [self._score_one(l, r, p) for l, r, p in zip(lefts, rights, prompts)]
        out = torch.tensor(vals, dtype=pair.left.dtype)
        return out if batched else out[0]


def prompt_reward(pair: StereoPair, prompts, scorer: PromptScorer) -> torch.Tensor:
    """Scorer output for one prompt per pair; a lone PromptSpec is broadcast."""
    if isinstance(prompts, PromptSpec):
        n = pair.left.shape[0] if pair.left.dim() == 4 else 1
        prompts = [prompts] * n
        if pair.left.dim() == 3:
            return scorer.score(StereoPair(pair.left[None], pair.right[None]), prompts)[0]
    return scorer.score(pair, prompts)


@dataclass
class RewardWeights:
    alpha: float = 0.25
    beta: float = 0.75
    gamma: float = 0.25

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = float(getattr(self, name))
            if v != v or v in (float("inf"), float("-inf")):
                raise ValueError(f"{name} must be finite")


@dataclass
class RewardModels:
    matcher: MatcherConfig
    mono: MonocularEstimator
    scorer: PromptScorer = field(default_factory=ToyColorScorer)


@dataclass
class RewardReport:
    r_s: torch.Tensor
    r_p: torch.Tensor
    r_c: torch.Tensor
    r_total: torch.Tensor
    diagnostics: dict = field(default_factory=dict)

    def detach(self) -> "RewardReport":
        return RewardReport(
            self.r_s.detach(), self.r_p.detach(), self.r_c.detach(), self.r_total.detach(),
            {k: v.detach() if torch.is_tensor(v) else v for k, v in self.diagnostics.items()},
        )


def combine(r_s, r_p, r_c, weights: RewardWeights):
    return weights.alpha * r_s + weights.beta * r_p + weights.gamma * r_c


def composite_reward(
    pair: StereoPair,
    prompts,
    weights: RewardWeights,
    models: RewardModels,
) -> RewardReport:
    batch_dims = pair.left.dim() - 3
    r_s, d_s, d_m = stereo_reward(pair, models.matcher, models.mono, return_maps=True)
    r_c = convergence_reward(d_s, batch_dims=batch_dims)
    r_p = prompt_reward(pair, prompts, models.scorer)
    return RewardReport(
        r_s=r_s,
        r_p=r_p,
        r_c=r_c,
        r_total=combine(r_s, r_p, r_c, weights),
        diagnostics={"stereo_disparity": d_s, "mono_disparity": d_m},
    )
