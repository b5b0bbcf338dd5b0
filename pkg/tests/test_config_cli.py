import json
import subprocess
import sys

import pytest

from stereogen.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from stereogen.config import RunConfig, apply_overrides, json_schema, load_config, parse_override
from tiny import write_tiny_config

PROMPT = "a red rectangle in front of a gray background"


def test_defaults_and_validation():
    cfg = load_config()
    assert cfg.trainer.learning_rate == 1e-4 and cfg.alignprop.iters == 200
    assert (cfg.reward.alpha, cfg.reward.beta, cfg.reward.gamma) == (0.25, 0.75, 0.25)
    with pytest.raises(ValueError):
        load_config(overrides=["trainer.bogus=1"])
    with pytest.raises(ValueError):
        load_config(overrides=["matcher.patch=4"])
    with pytest.raises(ValueError):
        load_config(overrides=["alignprop.truncation_max=30"])
    with pytest.raises(ValueError):
        load_config(overrides=["reward.scorer=subprocess"])


def test_overrides():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("a=[1, 2]") == (["a"], [1, 2])
    assert parse_override("a=hello") == (["a"], "hello")
    with pytest.raises(ValueError):
        parse_override("novalue")
    doc = {"trainer": {"seed": 1}}
    assert apply_overrides(doc, ["trainer.seed=7", "data.n_scenes=3"]) == {"trainer": {"seed": 7}, "data": {"n_scenes": 3}}
    assert doc == {"trainer": {"seed": 1}}
    cfg = load_config(overrides=["trainer.seed=7", "model.channel_mult=[1, 2]"])
    assert cfg.trainer.seed == 7 and cfg.model.channel_mult == [1, 2]


def test_config_hash_ignores_run_section(tmp_path):
    a = load_config(overrides=["run.name=x"])
    b = load_config(overrides=["run.name=y"])
    assert a.config_hash() == b.config_hash() != load_config(overrides=["data.seed=1"]).config_hash()
    assert str(a.run_dir()).endswith("x")
    assert "properties" in json_schema() and RunConfig.model_json_schema() == json_schema()


def test_exit_codes(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["sample", "--config", str(cfg)]) == EXIT_USAGE  # --prompt missing
    assert main(["sample", "--config", str(cfg), "--prompt", "a blue banana"]) == EXIT_USAGE
    assert main(["eval", "--config", str(cfg), "--set", "eval.nope=1"]) == EXIT_USAGE
    assert main(["eval", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    # valid configuration, but the stage-1 checkpoint has not been produced
    assert main(["train-stage2", "--config", str(cfg)]) == EXIT_RUNTIME
    assert main(["schema"]) == EXIT_OK
    assert "properties" in json.loads(capsys.readouterr().out)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "stereogen", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train-stage1" in out.stdout


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_tiny_config(root)
    for step in ("gen-data", "train-mono", "train-base", "train-stage1", "train-stage2"):
        assert main([step, "--config", str(cfg)]) == EXIT_OK, step
    return root, cfg


def test_pipeline_artifacts(tiny_run):
    root, cfg = tiny_run
    run = root / "tiny"
    for name in ("dataset/manifest.json", "mono.zip", "base.zip", "stage1.zip", "stage2.zip",
                 "mono_report.json", "stage1_log.csv", "stage2_log.csv", "stage2_eval.csv"):
        assert (run / name).exists(), name
    report = json.loads((run / "mono_report.json").read_text())
    assert report["n_heldout"] == 2 and report["n_train"] == 4


def test_eval_writes_metrics_for_both_sources(tiny_run, capsys):
    root, cfg = tiny_run
    assert main(["eval", "--config", str(cfg)]) == EXIT_OK
    assert "Stereo Score" in capsys.readouterr().out
    rows = (root / "tiny" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "condition,prompt,seed,r_s,r_p,r_c,r_total" and len(rows) == 1 + 3
    assert all(r.startswith("stage2,") for r in rows[1:])
    assert main(["eval", "--config", str(cfg), "--set", "eval.source=dataset"]) == EXIT_OK
    assert (root / "tiny" / "metrics.csv").read_text().splitlines()[1].startswith("dataset,")


def test_sample_is_deterministic(tiny_run, tmp_path):
    _, cfg = tiny_run
    outs = []
    for name in ("a", "b"):
        assert main(["sample", "--config", str(cfg), "--prompt", PROMPT, "--seed", "5", "--out", str(tmp_path / name)]) == 0
        outs.append({f: (tmp_path / name / f).read_bytes() for f in ("left.png", "right.png", "stacked.png")})
    assert outs[0] == outs[1]
    assert main(["sample", "--config", str(cfg), "--prompt", PROMPT, "--seed", "6", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "stacked.png").read_bytes() != outs[0]["stacked.png"]


def test_plot_and_ablate(tiny_run):
    root, cfg = tiny_run
    assert main(["plot", "--config", str(cfg)]) == EXIT_OK
    assert sorted(p.name for p in (root / "tiny" / "curves").glob("*.png")) == [
        "curve_r_c.png", "curve_r_p.png", "curve_r_s.png", "curve_r_total.png"
    ]
    assert main(["ablate", "--config", str(cfg)]) == EXIT_OK
    table = (root / "tiny" / "ablation" / "table.csv").read_text().splitlines()
    assert len(table) == 1 + 3
