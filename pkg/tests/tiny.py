"""A configuration small enough to run every pipeline step in seconds."""

import json
from pathlib import Path

TINY_DOC = {
    "data": {"n_scenes": 6, "height": 16, "width": 32, "seed": 3},
    "model": {"base_channels": 8, "channel_mult": [1, 2], "cond_dim": 16, "emb_dim": 16, "attn_heads": 2, "groups": 4},
    "sampler": {"num_sample_steps": 2},
    "lora": {"targets": ["*"]},
    "pretrain": {"iters": 3, "batch_size": 2, "n_images": 4},
    "mono": {"channels": 4, "iters": 3, "batch_size": 2, "heldout_fraction": 0.34},
    "trainer": {"total_iters": 3, "batch_size": 2, "learning_rate": 1e-3},
    "alignprop": {
        "n_train_prompts": 4, "iters": 2, "prompts_per_iter": 2, "truncation_max": 1,
        "eval_every": 1, "n_train_eval_prompts": 2, "learning_rate": 1e-2,
    },
    "eval": {"n_prompts": 3},
    "ablation": {"prompt_set_sizes": [2]},
}


def write_tiny_config(root: Path, name: str = "tiny") -> Path:
    doc = json.loads(json.dumps(TINY_DOC))
    doc["run"] = {"root": str(root), "name": name}
    path = root / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path
