"""Scores, ablation tables and reward-vs-query curves."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import StereoPair, unstack
from .rewards import RewardModels, RewardWeights, composite_reward
from .synthdata import PromptSpec
from .trainers import TrainingLog, derive_seed, generate

METRICS_COLUMNS = ("condition", "prompt", "seed", "r_s", "r_p", "r_c", "r_total")


@dataclass
class MetricsRow:
    condition: str
    stereo_mean: float
    stereo_std: float
    prompt_mean: float
    prompt_std: float
    n: int
    seed: int

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("MetricsRow needs n > 0")
        if self.stereo_std < 0 or self.prompt_std < 0:
            raise ValueError("standard deviations must be nonnegative")


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation (invariant to duplicating the set)."""
    if torch.is_tensor(values):
        values = values.detach().cpu().double().numpy()
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no values")
    return float(v.mean()), float(v.std())


def _pairs_for(source, prompts, schedule, sampler, seed) -> StereoPair:
    if isinstance(source, StereoPair):
        return source
    if not prompts:
        raise ValueError("empty prompt list")
    return unstack(generate(source, list(prompts), schedule, sampler, seed))


def per_prompt_scores(
    source,
    prompts: Sequence[PromptSpec],
    models: RewardModels,
    weights: RewardWeights | None = None,
    schedule=None,
    sampler=None,
    seed: int = 0,
) -> dict[str, torch.Tensor]:
    """Reward terms for one pair per prompt.

    ``source`` is either a batched StereoPair aligned with ``prompts`` or a
    denoiser, in which case each prompt gets one sample from seed
    ``derive_seed(seed, prompt.text)``.
    """
    if len(prompts) == 0:
        raise ValueError("empty prompt list")
    weights = weights or RewardWeights()
    with torch.no_grad():
        pair = _pairs_for(source, prompts, schedule, sampler, seed)
        rep = composite_reward(pair, list(prompts), weights, models)
    return {"r_s": rep.r_s, "r_p": rep.r_p, "r_c": rep.r_c, "r_total": rep.r_total}


def stereo_score(source, prompts, models: RewardModels, **kw) -> tuple[float, float]:
    return mean_std(per_prompt_scores(source, prompts, models, **kw)["r_s"])


def prompt_score(source, prompts, models: RewardModels, **kw) -> tuple[float, float]:
    return mean_std(per_prompt_scores(source, prompts, models, **kw)["r_p"])


def metrics_rows(condition: str, prompts, scores: dict[str, torch.Tensor], seed: int) -> list[dict]:
    rows = []
    for i, p in enumerate(prompts):
        rows.append(
            {
                "condition": condition,
                "prompt": p.text,
                "seed": derive_seed(seed, p.text),
                **{k: float(scores[k][i]) for k in ("r_s", "r_p", "r_c", "r_total")},
            }
        )
    return rows


def aggregate(rows: Sequence[dict], seed: int) -> list[MetricsRow]:
    """Collapse per-prompt rows into one MetricsRow per condition (order kept)."""
    out = []
    for cond in dict.fromkeys(r["condition"] for r in rows):
        sub = [r for r in rows if r["condition"] == cond]
        sm, ss = mean_std([r["r_s"] for r in sub])
        pm, ps = mean_std([r["r_p"] for r in sub])
        out.append(MetricsRow(cond, sm, ss, pm, ps, len(sub), seed))
    return out


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = int(v) if k in ("seed", "n") else float(v)
            except ValueError:
                pass
    return rows


def format_table(rows: Sequence[MetricsRow]) -> str:
    header = ("Condition", "Stereo Score", "Prompt Score")
    body = [
        (r.condition, f"{r.stereo_mean:.3f} ± {r.stereo_std:.3f}", f"{r.prompt_mean:.3f} ± {r.prompt_std:.3f}")
        for r in rows
    ]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(3)]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * len(line(header))
    return "\n".join([rule, line(header), rule, *map(line, body), rule]) + "\n"


# ----------------------------------------------------------------------------
# ablation


@dataclass
class Condition:
    """A stage-2 variant; ``weights=None`` evaluates the stage-1 model untouched."""

    label: str
    weights: RewardWeights | None = None
    n_train_prompts: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def default_conditions(prompt_set_sizes: Sequence[int], alpha=0.25, beta=0.75, gamma=0.25) -> list[Condition]:
    conds = [
        Condition("Base"),
        Condition("Base + Stereo", RewardWeights(alpha, 0.0, gamma)),
    ]
    for n in prompt_set_sizes:
        conds.append(Condition(f"Base + Stereo + Prompt, {n} prompts", RewardWeights(alpha, beta, gamma), n))
    return conds


def run_ablation(
    conditions: Sequence[Condition],
    eval_prompts: Sequence[PromptSpec],
    models: RewardModels,
    load_base: Callable[[], torch.nn.Module],
    tune: Callable[[torch.nn.Module, Condition], tuple[torch.nn.Module, TrainingLog]],
    schedule,
    sampler,
    seed: int,
    out_dir: str | Path | None = None,
) -> tuple[list[MetricsRow], list[dict], dict[str, TrainingLog]]:
    """Evaluate each condition on the same prompts and noise seeds.

    ``load_base`` must return a fresh copy of the stage-1 model; ``tune``
    runs stage 2 for a condition. Writes ``metrics.csv``, ``table.csv`` and
    ``table.txt`` under ``out_dir`` when given.
    """
    if not eval_prompts:
        raise ValueError("empty prompt list")
    per_prompt: list[dict] = []
    logs: dict[str, TrainingLog] = {}
    for cond in conditions:
        model = load_base()
        if cond.weights is not None:
            model, logs[cond.label] = tune(model, cond)
        scores = per_prompt_scores(model, eval_prompts, models, schedule=schedule, sampler=sampler, seed=seed)
        per_prompt += metrics_rows(cond.label, eval_prompts, scores, seed)
    table = aggregate(per_prompt, seed)
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "metrics.csv", per_prompt, METRICS_COLUMNS)
        write_csv(out / "table.csv", [asdict(r) for r in table])
        (out / "table.txt").write_text(format_table(table))
        for label, lg in logs.items():
            slug = "".join(ch if ch.isalnum() else "_" for ch in label).strip("_").lower()
            lg.to_csv(out / f"log_{slug}.csv", out / f"eval_{slug}.csv")
    return table, per_prompt, logs


# ----------------------------------------------------------------------------
# curves

REWARD_KEYS = ("r_s", "r_p", "r_c", "r_total")
_TITLES = {"r_s": "stereo consistency", "r_p": "prompt consistency", "r_c": "convergence", "r_total": "total"}


def curve_series(log: TrainingLog) -> dict[str, dict[str, np.ndarray]]:
    """``{series: {"queries", "<key>_mean", "<key>_std"}}`` for training batches and each eval set."""
    out = {}
    if log.records:
        out["train_batch"] = {
            "queries": np.array([r["queries"] for r in log.records], float),
            **{
                f"{k}_{s}": np.array([r.get(f"{k}_{s}", np.nan) for r in log.records], float)
                for k in REWARD_KEYS
                for s in ("mean", "std")
            },
        }
    for name in dict.fromkeys(r["set"] for r in log.eval_records):
        rows = [r for r in log.eval_records if r["set"] == name]
        out[f"eval_{name}"] = {
            "queries": np.array([r["queries"] for r in rows], float),
            **{f"{k}_{s}": np.array([r[f"{k}_{s}"] for r in rows], float) for k in REWARD_KEYS for s in ("mean", "std")},
        }
    return out


def plot_curves(log: TrainingLog, out: str | Path) -> list[Path]:
    """Write one reward-vs-queries PNG per reward term plus the underlying CSVs."""
    if not log.records and not log.eval_records:
        raise ValueError("empty training log")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "curves.csv", out / "curves_eval.csv")
    series = curve_series(log)
    paths = []
    for key in REWARD_KEYS:
        fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
        for name, s in series.items():
            mean, std = s[f"{key}_mean"], s[f"{key}_std"]
            if np.all(np.isnan(mean)):
                continue
            style = dict(lw=0.8, alpha=0.6) if name == "train_batch" else dict(lw=1.6, marker="o", ms=3)
            (line,) = ax.plot(s["queries"], mean, label=name, **style)
            ax.fill_between(s["queries"], mean - std, mean + std, color=line.get_color(), alpha=0.15)
        ax.set_xlabel("reward queries")
        ax.set_ylabel(key)
        ax.set_title(_TITLES[key])
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"curve_{key}.png"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def decile_means(log: TrainingLog, set_name: str, key: str) -> tuple[float, float]:
    """Mean of ``<key>_mean`` over eval records in the first and last 10% of queries."""
    rows = [r for r in log.eval_records if r["set"] == set_name]
    if not rows:
        raise ValueError(f"no eval records for set {set_name!r}")
    total = max(r["queries"] for r in rows)
    first = [r[f"{key}_mean"] for r in rows if r["queries"] <= 0.1 * total]
    last = [r[f"{key}_mean"] for r in rows if r["queries"] >= 0.9 * total]
    return float(np.mean(first)), float(np.mean(last))
