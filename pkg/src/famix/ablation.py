"""Ablation grids, per-arm runs and the artifact consolidator.

Each arm run writes ``<out>/arms/<arm>/seed<k>/result.json``; the
consolidator only reads those files, so arms can run in separate processes
and an interrupted grid resumes where it stopped.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from famix.augment import AugmentMode
from famix.bank import save_bank
from famix.config import ExperimentConfig
from famix.datasets import load_split
from famix.encoders import JointEncoder, build_encoder
from famix.errors import ConfigurationError, FamixError
from famix.evaluation import CITYSCAPES_CLASSES, EvalReport, miou, multi_run_summary
from famix.freeze import FREEZE_SWEEP

log = logging.getLogger(__name__)

CHECK, CROSS = "✓", "✗"


@dataclass
class Arm:
    name: str
    overrides: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    x: Optional[float] = None  # position on a sweep plot


def _mark(flag: bool) -> str:
    return CHECK if flag else CROSS


def _language(**kw) -> dict:
    return {"variant": "language", "mix": True, "mix_source": "T", **kw}


def grid_table5(cfg: ExperimentConfig) -> list:
    """Freeze x Augment x Mix, 8 arms."""
    arms = []
    for freeze in (False, True):
        for augment in (False, True):
            for mix in (False, True):
                mode = AugmentMode.from_flags(augment, mix)
                arms.append(Arm(
                    f"freeze{int(freeze)}-augment{int(augment)}-mix{int(mix)}",
                    {"freeze": "FAMIX" if freeze else "FT", "mode": dataclasses.asdict(mode)},
                    {"Freeze": _mark(freeze), "Augment": _mark(augment), "Mix": _mark(mix)}))
    return arms


def grid_freeze(cfg: ExperimentConfig) -> list:
    """One FAMix run per freeze sweep point."""
    return [Arm(f"freeze-{p}", {"freeze": p, "mode": _language()}, {"Frozen layers": p}, x=i)
            for i, p in enumerate(FREEZE_SWEEP)]


def grid_prompts(cfg: ExperimentConfig, sizes: Sequence[int] = (1, 5, 10, 20)) -> list:
    """Cardinality of the random style prompt set."""
    return [Arm(f"prompts-{n}", {"prompts": f"R1:{n}", "mode": _language()}, {"|R|": str(n)}, x=n)
            for n in sizes]


def grid_prompt_construction(cfg: ExperimentConfig) -> list:
    rows = [  # (RCP, RSP, CN)
        (False, False, True), (True, False, False), (False, True, False), (True, False, True), (False, True, True)]
    arms = []
    for rcp, rsp, cn in rows:
        arms.append(Arm(
            f"prompt-rcp{int(rcp)}-rsp{int(rsp)}-cn{int(cn)}",
            {"prompts": "R2" if rcp else "R1", "prompt_fragment": rcp or rsp, "prompt_class_name": cn,
             "mode": _language()},
            {"RCP": _mark(rcp), "RSP": _mark(rsp), "CN": _mark(cn)}))
    return arms


def grid_mining(cfg: ExperimentConfig) -> list:
    return [
        Arm("mining-global", {"mining": "global", "mode": _language(locality="global")}, {"Style mining": "global"}),
        Arm("mining-local", {"mining": "local", "mode": _language()}, {"Style mining": "local"}),
    ]


def grid_mix_sets(cfg: ExperimentConfig) -> list:
    return [
        Arm("mixset-S", {"mode": {"variant": "none", "mix": True, "mix_source": "S"}}, {"Mixing set": "S"}),
        Arm("mixset-S+T", {"mode": _language(mix_source="S+T")}, {"Mixing set": "S ∪ T"}),
        Arm("mixset-T", {"mode": _language()}, {"Mixing set": "T"}),
    ]


def grid_noise(cfg: ExperimentConfig, levels: Sequence[float] = (5, 10, 15, 20, 25, 30, math.inf)) -> list:
    arms = [Arm("noise-baseline", {"mode": {"variant": "none", "mix": False, "mix_source": "S"}},
                {"SNR": "Baseline"})]
    for snr in levels:
        tag = "inf" if math.isinf(snr) else f"{snr:g}"
        arms.append(Arm(f"noise-{tag}", {"mode": {"variant": "noise", "mix": True, "mix_source": "T",
                                                  "snr_db": float(snr)}}, {"SNR": "∞" if tag == "inf" else tag},
                        x=None if math.isinf(snr) else snr))
    arms.append(Arm("noise-mixstyle", {"mode": {"variant": "mixstyle", "mix": True, "mix_source": "S"}},
                    {"SNR": "MixStyle"}))
    arms.append(Arm("noise-prompts", {"mode": _language()}, {"SNR": "Prompts"}))
    return arms


GRIDS = {
    "table5": grid_table5,
    "freeze": grid_freeze,
    "prompts": grid_prompts,
    "prompt-construction": grid_prompt_construction,
    "mining": grid_mining,
    "mix-sets": grid_mix_sets,
    "noise": grid_noise,
}
SWEEPS = {"freeze": "Frozen layers", "prompts": "|R|"}


def arm_config(base: ExperimentConfig, arm: Arm, seed: int) -> ExperimentConfig:
    raw = base.to_dict()
    raw.update(arm.overrides)
    raw["seed"] = seed
    raw.pop("profile", None)
    return ExperimentConfig.from_dict(raw, profile=base.profile)


def _bank_key(cfg: ExperimentConfig) -> str:
    parts = [cfg.encoder, cfg.prompts, cfg.prompt_fragment, cfg.prompt_class_name, cfg.mining, cfg.m,
             cfg.pin_steps, cfg.pin_step_size, cfg.mining_epochs, cfg.seed, cfg.manifest]
    return hashlib.sha1(json.dumps(parts, default=str).encode()).hexdigest()[:12]


def ensure_bank(cfg: ExperimentConfig, out: Path, encoder: JointEncoder) -> ExperimentConfig:
    """Mine (or reuse) the bank the arm needs; returns the config pointing at it."""
    from famix.train import mine_from_config

    if cfg.mode.variant != "language":
        return cfg
    path = out / "banks" / f"{_bank_key(cfg)}.famix"
    if not path.exists():
        bank, mlog = mine_from_config(cfg, encoder)
        save_bank(bank, path)
        path.with_suffix(".json").write_text(json.dumps(mlog, indent=2, sort_keys=True) + "\n")
    return cfg.replace(bank=str(path))


def evaluate_splits(model, cfg: ExperimentConfig, class_names) -> dict:
    from famix.train import evaluate

    out = {}
    for split in cfg.eval_splits:
        rep = miou(evaluate(model, load_split(cfg.manifest, split), len(class_names)), class_names)
        out[split] = rep.as_dict()
    return out


def run_arm(base: ExperimentConfig, arm: Arm, seed: int, out: Path, encoder: Optional[JointEncoder] = None
            ) -> dict:
    from famix.train import run_schedule

    target = out / "arms" / arm.name / f"seed{seed}"
    done = target / "result.json"
    if done.exists():
        return json.loads(done.read_text())
    cfg = arm_config(base, arm, seed)
    encoder = encoder or build_encoder(cfg.encoder, cfg.pretrained)
    cfg = ensure_bank(cfg, out, encoder)
    res = run_schedule(cfg, target, encoder=encoder)
    result = {"arm": arm.name, "seed": seed, "labels": arm.labels, "x": arm.x,
              "class_names": res.class_names, "datasets": evaluate_splits(res.model, cfg, res.class_names),
              "final_loss": res.log[-1]["loss"] if res.log else None}
    done.write_text(json.dumps(result, indent=2) + "\n")
    return result


def run_grid(base: ExperimentConfig, grid: str, seeds: Sequence[int], out, encoder=None) -> dict:
    """Run every arm of ``grid`` for every seed; failed arms are listed, not fatal."""
    if grid not in GRIDS:
        raise ConfigurationError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    arms = GRIDS[grid](base)
    (out / "grid.json").write_text(json.dumps(
        {"grid": grid, "seeds": list(seeds), "arms": [{"name": a.name, "labels": a.labels, "x": a.x} for a in arms],
         "config": base.to_dict()}, indent=2, default=str) + "\n")
    encoder = encoder or build_encoder(base.encoder, base.pretrained)
    failures = []
    for arm in arms:
        for seed in seeds:
            try:
                run_arm(base, arm, seed, out, encoder)
            except Exception as exc:  # one broken arm must not sink the grid
                log.error("arm %s seed %d failed: %s", arm.name, seed, exc)
                failures.append({"arm": arm.name, "seed": seed, "error": getattr(exc, "code", "internal"),
                                 "message": str(exc)})
    (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    summary = consolidate(out)
    summary["failures"] = failures
    return summary


def ordered_columns(class_names: Sequence[str]) -> list:
    """Class names in the driving-benchmark order, unknown names after."""
    known = [c for c in CITYSCAPES_CLASSES if c in class_names]
    return known + [c for c in class_names if c not in known]


def _report_from(d: dict, class_names) -> EvalReport:
    iou = np.array([np.nan if d["iou"].get(c) is None else d["iou"][c] for c in class_names])
    return EvalReport(iou, d["miou"], tuple(class_names))


def summarize_results(results: Sequence[dict]) -> dict:
    """Per dataset: mean/std mIoU and mean per-class IoU across seeds."""
    class_names = results[0]["class_names"]
    out = {}
    for split in results[0]["datasets"]:
        reps = [_report_from(r["datasets"][split], class_names) for r in results if split in r["datasets"]]
        s = multi_run_summary(reps)
        out[split] = {"miou": s.miou, "std": s.miou_std, "runs": s.runs,
                      "iou": {c: (None if math.isnan(v) else float(v)) for c, v in zip(class_names, s.iou)}}
    return out


def consolidate(out) -> dict:
    """Read completed arm artifacts and write results.{json,csv,md} (+ sweep plot)."""
    out = Path(out)
    meta = json.loads((out / "grid.json").read_text())
    rows = []
    for a in meta["arms"]:
        files = sorted((out / "arms" / a["name"]).glob("seed*/result.json"))
        results = [json.loads(f.read_text()) for f in files]
        if not results:
            rows.append({"arm": a["name"], "labels": a["labels"], "x": a["x"], "seeds": [], "datasets": {}})
            continue
        rows.append({"arm": a["name"], "labels": a["labels"], "x": a["x"], "seeds": [r["seed"] for r in results],
                     "class_names": results[0]["class_names"], "datasets": summarize_results(results)})
    summary = {"grid": meta["grid"], "rows": rows}
    (out / "results.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_tables(summary, out)
    if meta["grid"] in SWEEPS:
        plot_sweep(summary, out / "sweep.png", SWEEPS[meta["grid"]])
    return summary


def _fmt(v, scale=100.0) -> str:
    return "" if v is None else f"{v * scale:.2f}"


def table_rows(summary: dict) -> tuple:
    """Header and rows: arm labels, then per dataset mIoU and std, then per-class IoU of each dataset."""
    rows = summary["rows"]
    label_keys = list(rows[0]["labels"]) if rows else []
    splits, classes = [], []
    for r in rows:
        for s in r["datasets"]:
            if s not in splits:
                splits.append(s)
        if not classes and r.get("class_names"):
            classes = ordered_columns(r["class_names"])
    header = label_keys + [f"{s} mIoU" for s in splits] + [f"{s} std" for s in splits] + \
        [f"{s}:{c}" for s in splits for c in classes] + ["seeds"]
    body = []
    for r in rows:
        line = [r["labels"].get(k, "") for k in label_keys]
        line += [_fmt(r["datasets"].get(s, {}).get("miou")) for s in splits]
        line += [_fmt(r["datasets"].get(s, {}).get("std")) for s in splits]
        line += [_fmt(r["datasets"].get(s, {}).get("iou", {}).get(c)) for s in splits for c in classes]
        line.append(" ".join(str(x) for x in r["seeds"]) or "failed")
        body.append(line)
    return header, body


def write_tables(summary: dict, out: Path, stem: str = "results") -> None:
    header, body = table_rows(summary)
    with open(out / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(body)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(row) + " |" for row in body]
    (out / f"{stem}.md").write_text("\n".join(lines) + "\n", encoding="utf-8")


def plot_sweep(summary: dict, path: Path, xlabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in summary["rows"] if r["datasets"]]
    if not rows:
        return
    labels = [next(iter(r["labels"].values())) for r in rows]
    xs = list(range(len(rows)))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for split in rows[0]["datasets"]:
        y = [100 * r["datasets"][split]["miou"] for r in rows]
        e = [100 * r["datasets"][split]["std"] for r in rows]
        ax.errorbar(xs, y, yerr=e, marker="o", capsize=3, label=split)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mIoU (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def eval_report_rows(datasets: dict, class_names) -> tuple:
    """Per-dataset table for one checkpoint plus a mean row."""
    classes = ordered_columns(class_names)
    header = ["dataset"] + classes + ["mIoU"]
    body = []
    for split, d in datasets.items():
        body.append([split] + [_fmt(d["iou"].get(c)) for c in classes] + [_fmt(d["miou"])])
    mean = [np.nanmean([np.nan if d["iou"].get(c) is None else d["iou"][c] for d in datasets.values()])
            for c in classes]
    body.append(["mean"] + [_fmt(None if np.isnan(v) else float(v)) for v in mean]
                + [_fmt(float(np.mean([d["miou"] for d in datasets.values()])))])
    return header, body
