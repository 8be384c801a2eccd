"""Command line entry point: ``famix mine|train|eval|ablate|report|corpus``.

Every command exits 0 on success.  On failure it prints one JSON error
record to stderr and exits nonzero (1 for famix errors, 2 for usage
errors, 3 for anything unexpected).
"""
from __future__ import annotations

import csv
import functools
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Optional

import click

from famix.errors import ConfigurationError, FamixError

log = logging.getLogger("famix")


def _error_record(exc: BaseException, code: str) -> str:
    rec = {"status": "error", "error": code, "type": type(exc).__name__, "message": str(exc)}
    for attr in ("iteration", "loss"):
        if hasattr(exc, attr):
            rec[attr] = getattr(exc, attr)
    return json.dumps(rec)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FamixError as exc:
            click.echo(_error_record(exc, exc.code), err=True)
            sys.exit(1)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except Exception as exc:  # surface unexpected failures as records too
            log.debug("%s", traceback.format_exc())
            click.echo(_error_record(exc, "internal"), err=True)
            sys.exit(3)
    return wrapper


def _load_config(config: Optional[str], profile: Optional[str], seed: Optional[int], out: Optional[str],
                 **overrides):
    from famix.config import ExperimentConfig

    extra = {k: v for k, v in overrides.items() if v is not None}
    if seed is not None:
        extra["seed"] = seed
    if out is not None:
        extra["out_dir"] = out
    if config:
        return ExperimentConfig.load(config, profile=profile, **extra)
    return ExperimentConfig.from_dict(extra, profile=profile)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


common = [
    click.option("--config", "config", type=click.Path(dir_okay=False), help="YAML experiment config."),
    click.option("--seed", type=int, help="Override the config seed."),
    click.option("--profile", type=click.Choice(["desk", "paper"]), help="Default hyperparameter profile."),
    click.option("--out", type=click.Path(file_okay=False), help="Output directory."),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int):
    """Language-driven class-wise style mixing for segmentation generalization."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@with_common
@click.option("--manifest", help="Dataset manifest (overrides config).")
@click.option("--prompts", help="Prompt set: R1, R2, R1:<n> or a file path.")
@guarded
def mine(config, seed, profile, out, manifest, prompts):
    """Mine a class-wise style bank from the training split."""
    from famix.bank import save_bank
    from famix.train import mine_from_config

    cfg = _load_config(config, profile, seed, out, manifest=manifest, prompts=prompts).validate("mine")
    bank, mlog = mine_from_config(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out_dir / "bank.famix")
    _write_json(out_dir / "mining_log.json", mlog)
    click.echo(json.dumps({"status": "ok", "bank": str(out_dir / "bank.famix"), "counts": bank.counts()}))


@main.command()
@with_common
@click.option("--manifest", help="Dataset manifest (overrides config).")
@click.option("--bank", help="Style bank file (overrides config).")
@click.option("--resume", type=click.Path(dir_okay=False, exists=True), help="Checkpoint to resume from.")
@guarded
def train(config, seed, profile, out, manifest, bank, resume):
    """Train a segmenter with the configured augmentation arm and freeze preset."""
    from famix.train import run_schedule

    cfg = _load_config(config, profile, seed, out, manifest=manifest, bank=bank).validate("train")
    res = run_schedule(cfg, cfg.out_dir, resume=resume)
    last = res.log[-1] if res.log else {}
    click.echo(json.dumps({"status": "ok", "checkpoint": str(Path(cfg.out_dir) / "checkpoint.pt"),
                           "iterations": cfg.iterations, "final_loss": last.get("loss")}))


@main.command("eval")
@with_common
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False), help="Trained checkpoint.")
@click.option("--split", "splits", multiple=True, help="Splits to evaluate (repeatable; default: config).")
@click.option("--manifest", help="Dataset manifest (default: the checkpoint's).")
@guarded
def eval_cmd(config, seed, profile, out, checkpoint, splits, manifest):
    """Per-dataset per-class IoU and mIoU of a checkpoint."""
    from famix.ablation import eval_report_rows, evaluate_splits
    from famix.train import load_checkpoint, model_from_checkpoint

    if not Path(checkpoint).exists():
        raise ConfigurationError(f"checkpoint not found: {checkpoint}")
    ckpt = load_checkpoint(checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    if manifest:
        cfg = cfg.replace(manifest=manifest, class_names=None)
    if splits:
        cfg = cfg.replace(eval_splits=tuple(splits))
    datasets = evaluate_splits(model, cfg, ckpt["class_names"])
    out_dir = Path(out or Path(checkpoint).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"checkpoint": str(checkpoint), "iteration": ckpt["iteration"], "datasets": datasets}
    _write_json(out_dir / "eval.json", report)
    header, body = eval_report_rows(datasets, ckpt["class_names"])
    with open(out_dir / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows([header] + body)
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)] + ["| " + " | ".join(r) + " |" for r in body]
    (out_dir / "eval.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    click.echo("\n".join(md))


@main.command()
@with_common
@click.option("--grid", required=True, help="table5, freeze, prompts, prompt-construction, mining, mix-sets, noise.")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated seeds shared by all arms.")
@guarded
def ablate(config, seed, profile, out, grid, seeds):
    """Run an ablation grid and write the consolidated report."""
    from famix.ablation import GRIDS, run_grid

    if grid not in GRIDS:
        raise ConfigurationError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--seeds must be comma-separated integers, got {seeds!r}") from None
    cfg = _load_config(config, profile, seed, out)
    cfg.validate("mine")
    summary = run_grid(cfg, grid, seed_list, cfg.out_dir)
    click.echo(json.dumps({"status": "ok" if not summary["failures"] else "partial",
                           "results": str(Path(cfg.out_dir) / "results.md"),
                           "failed_arms": summary["failures"]}))
    if summary["failures"]:
        sys.exit(1)


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False, exists=True),
              help="Ablation output directory.")
@guarded
def report(run_dir):
    """Rebuild tables and plots from completed ablation artifacts."""
    from famix.ablation import consolidate

    if not (Path(run_dir) / "grid.json").exists():
        raise ConfigurationError(f"{run_dir} is not an ablation directory (no grid.json)")
    consolidate(run_dir)
    click.echo((Path(run_dir) / "results.md").read_text(encoding="utf-8"), nl=False)


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Corpus directory.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--n-train", default=64, show_default=True, type=int)
@click.option("--n-val", default=16, show_default=True, type=int)
@click.option("--size", default=64, show_default=True, type=int)
@guarded
def corpus(out, seed, n_train, n_val, size):
    """Write the synthetic two-domain toy corpus."""
    from famix.datasets import make_synthetic_corpus

    path = make_synthetic_corpus(out, n_train, n_val, size, seed)
    click.echo(json.dumps({"status": "ok", "manifest": str(path)}))


if __name__ == "__main__":
    main()
