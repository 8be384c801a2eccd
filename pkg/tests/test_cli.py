import csv
import json

import pytest
import yaml
from click.testing import CliRunner

from famix.cli import main
from famix.datasets import make_synthetic_corpus, read_class_names, write_class_names
from famix.evaluation import CITYSCAPES_CLASSES


@pytest.fixture
def run():
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
    return invoke


@pytest.fixture
def cfg_file(tiny_corpus, tmp_path):
    def write(**kw):
        raw = {"manifest": str(tiny_corpus), "iterations": 2, "batch_size": 4, "pin_steps": 3, **kw}
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*.yaml')))}.yaml"
        path.write_text(yaml.safe_dump(raw))
        return path
    return write


def test_mine_is_byte_stable_and_logs_fragments(run, cfg_file, tmp_path):
    cfg = cfg_file(prompts="R1:20")
    a = run("mine", "--config", cfg, "--out", tmp_path / "a")
    b = run("mine", "--config", cfg, "--out", tmp_path / "b")
    assert a.exit_code == 0 and b.exit_code == 0
    assert (tmp_path / "a" / "bank.famix").read_bytes() == (tmp_path / "b" / "bank.famix").read_bytes()
    log = json.loads((tmp_path / "a" / "mining_log.json").read_text())
    assert log["fragments_available"] == 20
    assert sum(log["added_per_batch"]) == sum(json.loads(a.stdout)["counts"])


def test_two_class_toy_bank_has_only_present_classes(run, tmp_path):
    man = make_synthetic_corpus(tmp_path / "two", n_train=8, n_val=4, seed=1, class_names=("road", "sky"))
    write_class_names(read_class_names(man.parent / "class_names.txt") + ["car"], man.parent / "class_names.txt")
    cfg = tmp_path / "two.yaml"
    cfg.write_text(yaml.safe_dump({"manifest": str(man), "prompts": "R1:1", "pin_steps": 2, "batch_size": 4}))
    res = run("mine", "--config", cfg, "--out", tmp_path / "m")
    counts = json.loads(res.stdout)["counts"]
    assert counts[0] > 0 and counts[1] > 0 and counts[2] == 0


def test_train_eval_sanity_direction_and_column_order(run, cfg_file, tmp_path):
    cfg = cfg_file(iterations=60, mode={"variant": "none", "mix": False, "mix_source": "S"},
                   eval_splits=["train", "shifted"])
    assert run("train", "--config", cfg, "--out", tmp_path / "t", "--seed", 1).exit_code == 0
    res = run("eval", "--config", cfg, "--checkpoint", tmp_path / "t" / "checkpoint.pt")
    assert res.exit_code == 0
    report = json.loads((tmp_path / "t" / "eval.json").read_text())["datasets"]
    assert report["train"]["miou"] >= report["shifted"]["miou"]
    with open(tmp_path / "t" / "eval.csv") as fh:
        rows = list(csv.reader(fh))
    classes = rows[0][1:-1]
    assert classes == [c for c in CITYSCAPES_CLASSES if c in classes]
    assert [r[0] for r in rows[1:]] == ["train", "shifted", "mean"]


def test_errors_are_machine_readable(run, cfg_file, tmp_path):
    res = run("train", "--config", cfg_file(bank="/nope.famix"), "--out", tmp_path / "x")
    assert res.exit_code == 1
    rec = json.loads(res.stderr.strip().splitlines()[-1])
    assert rec["status"] == "error" and rec["error"] == "configuration" and "bank" in rec["message"]
    res = run("eval", "--checkpoint", tmp_path / "missing.pt")
    assert res.exit_code == 1 and json.loads(res.stderr)["error"] == "configuration"
    assert run("ablate", "--config", cfg_file(), "--grid", "nope").exit_code == 1
    assert run("train", "--profile", "huge").exit_code == 2


def test_table5_grid_has_eight_arms(run, cfg_file, tmp_path):
    res = run("ablate", "--config", cfg_file(iterations=1), "--grid", "table5", "--seeds", "0",
              "--out", tmp_path / "t5")
    assert res.exit_code == 0, res.output
    summary = json.loads((tmp_path / "t5" / "results.json").read_text())
    flags = [(r["labels"]["Freeze"], r["labels"]["Augment"], r["labels"]["Mix"]) for r in summary["rows"]]
    assert len(flags) == 8 and len(set(flags)) == 8
    before = (tmp_path / "t5" / "results.md").read_bytes()
    assert run("report", "--run", tmp_path / "t5").exit_code == 0
    assert (tmp_path / "t5" / "results.md").read_bytes() == before


@pytest.mark.parametrize("grid, points", [("freeze", 5), ("prompts", 4)])
def test_sweeps_emit_one_point_per_setting(run, cfg_file, tmp_path, grid, points):
    res = run("ablate", "--config", cfg_file(iterations=1), "--grid", grid, "--seeds", "0", "--out", tmp_path / grid)
    assert res.exit_code == 0, res.output
    rows = json.loads((tmp_path / grid / "results.json").read_text())["rows"]
    assert len(rows) == points
    assert all(set(r["datasets"]) == {"val", "shifted"} for r in rows)
    assert (tmp_path / grid / "sweep.png").stat().st_size > 0


def test_partial_failures_are_reported(run, cfg_file, tmp_path, monkeypatch):
    import famix.train
    from famix.errors import TrainingDivergenceError

    real = famix.train.run_schedule

    def flaky(cfg, *a, **kw):
        if cfg.mode.variant == "mixstyle":
            raise TrainingDivergenceError(0, float("nan"))
        return real(cfg, *a, **kw)

    monkeypatch.setattr(famix.train, "run_schedule", flaky)
    res = run("ablate", "--config", cfg_file(iterations=1), "--grid", "noise", "--seeds", "0", "--out", tmp_path / "n")
    assert res.exit_code == 1
    out = json.loads(res.stdout.strip().splitlines()[-1])
    assert out["status"] == "partial" and [f["arm"] for f in out["failed_arms"]] == ["noise-mixstyle"]
    assert out["failed_arms"][0]["error"] == "training-divergence"
    rows = json.loads((tmp_path / "n" / "results.json").read_text())["rows"]
    assert len(rows) == 10 and sum(1 for r in rows if r["datasets"]) == 9


def test_corpus_command(run, tmp_path):
    res = run("corpus", "--out", tmp_path / "c", "--n-train", 2, "--n-val", 1)
    assert res.exit_code == 0 and (tmp_path / "c" / "manifest.csv").exists()
