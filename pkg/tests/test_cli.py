import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lgda.cli import main

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

TINY = """\
[run]
name = "tiny"
seed = 3
[synth]
image_size = 32
n_source = 10
n_target_train = 6
n_target_test = 4
[train]
epochs_source = 2
epochs_adapt = 1
batch_size = 4
num_passes = 2
feature_channels = 8
augment_source = false
[eval]
error_maps = 2
"""


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    run = root / "run"
    common = ("--config", cfg, "--run-dir", run)
    for cmd in ("synth", "pretrain", "pseudolabel", "adapt"):
        assert _run(cmd, *common) == 0, cmd
    return cfg, run, common


def _rows(path):
    return list(csv.DictReader(path.open()))


def test_pipeline_outputs(pipeline):
    _, run, _ = pipeline
    for split, n in (("source", 10), ("target_train", 6), ("target_test", 4)):
        assert len(list((run / "data" / split / "images").glob("*.png"))) == n
    for name in ("ckpt_source.pt", "ckpt_adapted.pt", "cache/manifest.json", "history.jsonl"):
        assert (run / name).exists(), name
    for cmd in ("synth", "pretrain", "pseudolabel", "adapt"):
        frozen = tomllib.loads((run / f"config.{cmd}.toml").read_text())
        assert frozen["synth"]["image_size"] == 32
        assert frozen["provenance"]["synth.image_size"] == "file"
        assert frozen["provenance"]["train.learning_rate"] == "default"


def test_eval_writes_table_and_maps(pipeline):
    _, run, common = pipeline
    assert _run("eval", *common) == 0
    rows = _rows(run / "eval_adapted.csv")
    assert len(rows) == 1 and rows[0]["method"] == "adapted"
    assert 0 <= float(rows[0]["avg-Dice"]) <= 100
    assert len(list((run / "error_maps" / "adapted").glob("*.png"))) == 4
    assert _run("eval", *common, "--eval.checkpoint=source") == 0
    assert (run / "eval_source.txt").exists()


def test_histogram(pipeline):
    _, run, common = pipeline
    assert _run("histogram", *common) == 0
    for strategy in ("threshold", "topk_fraction", "below_mean"):
        rows = _rows(run / f"histogram_{strategy}.csv")
        assert len(rows) > 0
        for col in ("source", "easy", "hard"):
            total = sum(float(r[col]) for r in rows)
            assert total == pytest.approx(1.0, abs=1e-6) or total == 0.0
    report = json.loads((run / "division_report.json").read_text())
    assert len(report["easy_ids"]) + len(report["hard_ids"]) == len(report["records"]) == 6


def test_ablate_rows(pipeline):
    _, run, common = pipeline
    assert _run("ablate", *common) == 0
    assert [r["method"] for r in _rows(run / "ablation.csv")] == ["Baseline", "Baseline+L", "Baseline+LG"]
    assert [r["strategy"] for r in _rows(run / "strategies.csv")] == ["TopK", "AVG", "H>η"]
    assert (run / "error_maps" / "Baseline+LG").is_dir()


@pytest.fixture
def zero_run(pipeline, tmp_path):
    cfg, run, _ = pipeline
    out = tmp_path / "zero"
    out.mkdir()
    (out / "ckpt_source.pt").write_bytes((run / "ckpt_source.pt").read_bytes())
    (out / "ckpt_source.model_meta.json").write_bytes((run / "ckpt_source.model_meta.json").read_bytes())
    return cfg, run, out


def test_zero_adaptation_rows_identical(zero_run):
    cfg, run, out = zero_run
    assert _run("ablate", "--config", cfg, "--run-dir", out, f"--paths.data_dir={run / 'data'}",
                "--train.epochs_adapt=0") == 0
    rows = _rows(out / "ablation.csv")
    base = {k: v for k, v in rows[0].items() if k != "method"}
    for r in rows[1:]:
        assert {k: v for k, v in r.items() if k != "method"} == base


def test_synth_refuses_overwrite_and_is_deterministic(pipeline, tmp_path):
    cfg, run, common = pipeline
    before = (run / "data" / "target_test" / "images").iterdir().__next__()
    assert _run("synth", *common) == 1
    other = tmp_path / "again"
    assert _run("synth", "--config", cfg, "--run-dir", other) == 0
    a = sorted(p.read_bytes() for p in (run / "data" / "source" / "masks").glob("*.png"))
    b = sorted(p.read_bytes() for p in (other / "data" / "source" / "masks").glob("*.png"))
    assert a == b and before.exists()
    assert _run("synth", "--config", cfg, "--run-dir", other, "--force", "--seed", "9") == 0
    c = sorted(p.read_bytes() for p in (other / "data" / "source" / "images").glob("*.png"))
    assert c != sorted(p.read_bytes() for p in (run / "data" / "source" / "images").glob("*.png"))


def test_missing_prerequisites(tmp_path, capsys):
    run = tmp_path / "empty"
    assert _run("pretrain", "--run-dir", run) == 1
    assert "lgda synth" in capsys.readouterr().err
    for cmd in ("pseudolabel", "adapt", "eval", "ablate", "histogram"):
        assert _run(cmd, "--run-dir", run) == 1, cmd


def test_adapt_requires_cache(pipeline, tmp_path, capsys):
    cfg, run, _ = pipeline
    out = tmp_path / "nocache"
    out.mkdir()
    for name in ("ckpt_source.pt", "ckpt_source.model_meta.json"):
        (out / name).write_bytes((run / name).read_bytes())
    assert _run("adapt", "--config", cfg, "--run-dir", out, f"--paths.data_dir={run / 'data'}") == 1
    assert "pseudolabel" in capsys.readouterr().err


def test_bad_flags(tmp_path, capsys):
    assert _run("synth", "--run-dir", tmp_path, "--train.bogus=1") == 1
    assert _run("synth", "--run-dir", tmp_path, "--synth.image_size=abc") == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["nosuchcommand"])


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "lgda.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "pretrain", "pseudolabel", "adapt", "eval", "ablate", "histogram"):
        assert cmd in out.stdout
