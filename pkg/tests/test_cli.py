import csv
import io
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ttadet import cli
from ttadet.experiment import ConfigError, apply_override, build_config
from ttadet.source import SourceStats
from ttadet.stats import GaussianStats

TINY = {
    "model": {"hidden_channels": 8, "feature_channels": 8, "roi_dim": 8},
    "pretrain": {"n_train": 64, "n_val": 16, "epochs": 2, "map_floor": 0.0, "lr_decay_epochs": []},
    "stream": {"n_scenes": 20},
    "seeds": [0, 1],
}
STEPS = ("pretrain", "fit-stats", "adapt", "ablate", "report")


def write_config(directory: Path, doc=TINY) -> str:
    path = directory / "config.json"
    path.write_text(json.dumps(doc))
    return str(path)


def run(*args) -> int:
    return cli.main([str(a) for a in args])


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    config = write_config(base)
    outs = []
    for name in ("a", "b"):
        out = base / name
        for step in STEPS:
            assert run(step, "--config", config, "--out", out) == 0, step
        outs.append(out)
    return config, outs


def test_pipeline_writes_every_artifact(pipeline):
    _, (out, _) = pipeline
    for rel in ("checkpoint/manifest.json", "pretrain.json", "stats/global.json", "stats/foreground.json",
                "adapt/gaussian_noise-5.csv", "adapt/summary.json", "ablation/gaussian_noise-5.csv", "report.md"):
        assert (out / rel).is_file(), rel


def test_rerun_is_byte_identical(pipeline):
    _, (a, b) = pipeline
    assert tree_bytes(a) == tree_bytes(b)


def test_adapt_csv_has_one_row_per_batch(pipeline):
    _, (out, _) = pipeline
    rows = (out / "adapt" / "gaussian_noise-5.csv").read_text().splitlines()
    assert len(rows) - 1 == 3  # ceil(20 / 8)


def test_ablation_table_shape(pipeline):
    _, (out, _) = pipeline
    rows = list(csv.DictReader(io.StringIO((out / "ablation" / "gaussian_noise-5.csv").read_text())))
    assert [r["preset"] for r in rows] == list(cli.ABLATION_ORDER)
    direct = rows[0]
    assert direct["map_seed0"] == direct["map_seed1"] and float(direct["std_map"]) == 0.0
    assert sum(int(r["best_in_seeds"]) for r in rows) == 2


def test_summary_gain_is_consistent(pipeline):
    _, (out, _) = pipeline
    doc = json.loads((out / "adapt" / "summary.json").read_text())
    row = doc["corruptions"]["gaussian_noise-5"]
    assert row["gain"] == row["adapted_map"] - row["direct_test_map"]
    assert doc["flags"] == "stfar" and doc["seed"] == 0


def test_seed_flag_changes_adaptation_only(pipeline, tmp_path):
    config, (out, _) = pipeline
    other = tmp_path / "o"
    for rel in ("checkpoint", "stats"):
        shutil.copytree(out / rel, other / rel)
    assert run("adapt", "--config", config, "--out", other, "--seed", 7) == 0
    a = json.loads((out / "adapt" / "summary.json").read_text())["corruptions"]["gaussian_noise-5"]
    b = json.loads((other / "adapt" / "summary.json").read_text())["corruptions"]["gaussian_noise-5"]
    assert a["direct_test_map"] == b["direct_test_map"]


def test_unknown_key_names_its_path(tmp_path, capsys):
    assert run("pretrain", "--set", "tta.gama=0.1", "--out", tmp_path) == cli.EXIT_CONFIG
    assert "tta.gama" in capsys.readouterr().err


def test_invalid_value_names_its_path(tmp_path, capsys):
    assert run("pretrain", "--set", "tta.gamma=2", "--out", tmp_path) == cli.EXIT_CONFIG
    assert "tta.gamma" in capsys.readouterr().err


def test_malformed_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"seed": 1,')
    assert run("pretrain", "--config", path, "--out", tmp_path) == cli.EXIT_CONFIG
    assert "malformed JSON" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run("pretrain", "--config", tmp_path / "nope.json", "--out", tmp_path) == cli.EXIT_CONFIG


def test_inconsistent_sizes_are_a_config_error(tmp_path):
    assert run("pretrain", "--set", "model.image_size=16", "--out", tmp_path) == cli.EXIT_CONFIG


def test_missing_artifacts(tmp_path, capsys):
    for step in ("fit-stats", "adapt", "ablate", "report"):
        assert run(step, "--out", tmp_path) == cli.EXIT_MISSING, step
    assert "pretrain" in capsys.readouterr().err


def test_floor_failure(tmp_path):
    config = write_config(tmp_path, {**TINY, "pretrain": {**TINY["pretrain"], "map_floor": 1.0}})
    assert run("pretrain", "--config", config, "--out", tmp_path) == cli.EXIT_FLOOR
    assert json.loads((tmp_path / "pretrain.json").read_text())["passed"] is False


def test_dimension_mismatch(pipeline, tmp_path):
    config, (out, _) = pipeline
    for rel in ("checkpoint", "stats"):
        shutil.copytree(out / rel, tmp_path / rel)
    GaussianStats(np.zeros(3), np.eye(3)).save(tmp_path / "stats" / "global.json")
    assert run("adapt", "--config", config, "--out", tmp_path) == cli.EXIT_DIM


def test_not_positive_definite(pipeline, tmp_path, monkeypatch):
    config, (out, _) = pipeline
    shutil.copytree(out / "checkpoint", tmp_path / "checkpoint")
    broken = GaussianStats(np.zeros(8), -np.eye(8))
    monkeypatch.setattr(cli, "fit_source_stats", lambda params, scenes: SourceStats(broken, broken))
    assert run("fit-stats", "--config", config, "--out", tmp_path) == cli.EXIT_PSD
    assert not (tmp_path / "stats").exists()


def test_override_parsing():
    doc = {}
    apply_override(doc, "tta.gamma=0.015625")
    apply_override(doc, "stream.corruptions=[{\"kind\": \"blur\", \"severity\": 2}]")
    apply_override(doc, "stream.corruptions.0.severity=3")
    apply_override(doc, "output_dir=runs/x")
    cfg = build_config(doc)
    assert cfg.tta.gamma == 0.015625
    assert cfg.stream.corruptions[0].name == "blur-3"
    assert cfg.output_dir == "runs/x"
    with pytest.raises(ConfigError):
        apply_override({}, "no-equals-sign")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ttadet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "fit-stats" in proc.stdout
