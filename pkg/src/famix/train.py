"""Training loop: poly schedule, freeze-aware SGD, Layer1 style randomization."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from famix.augment import AugmentMode, StylePool, build_noise_bank, build_source_style_set, randomize_batch
from famix.bank import StyleBank, load_bank
from famix.config import ExperimentConfig
from famix.datasets import JointTransform, SegmentationSet, eval_batches, load_split, read_class_names, train_batches
from famix.encoders import JointEncoder, build_encoder, state_checksum
from famix.errors import ConfigurationError, ShapeError, TrainingDivergenceError
from famix.evaluation import ConfusionMatrix
from famix.freeze import FreezePolicy, get_policy
from famix.models import DESK_HEAD, PAPER_HEAD, SegmentationNet
from famix.stats import IGNORE_INDEX

log = logging.getLogger(__name__)

HEADS = {"desk": DESK_HEAD, "paper": PAPER_HEAD}
CHECKPOINT_VERSION = 1


def poly_lr(lr0: float, t: int, total: int, power: float = 0.9) -> float:
    """``lr0 * (1 - t/T) ** power``, clamped to 0 past the end."""
    if total <= 0:
        raise ValueError("total iterations must be positive")
    frac = min(max(t / total, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


def build_model(encoder: JointEncoder, num_classes: int, head: str = "desk", output_stride: int = 16,
                seed: int = 0) -> SegmentationNet:
    """Segmenter on a copy of the encoder's visual trunk; the head is initialised from ``seed``."""
    if not hasattr(encoder, "visual"):
        raise ConfigurationError("training needs a CLIP ResNet encoder (desk or open_clip)")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegmentationNet(encoder.visual, num_classes, output_stride=output_stride, **HEADS[head])


def make_optimizer(model: SegmentationNet, cfg: ExperimentConfig) -> torch.optim.SGD:
    """Two groups (decoder, backbone) holding trainable parameters only."""
    dec = [p for p in model.decoder.parameters() if p.requires_grad]
    dec_ids = {id(p) for p in model.decoder.parameters()}
    back = [p for p in model.parameters() if p.requires_grad and id(p) not in dec_ids]
    groups = [{"params": dec, "lr": cfg.lr_decoder, "lr0": cfg.lr_decoder, "name": "decoder"}]
    if back:
        groups.append({"params": back, "lr": cfg.lr_backbone, "lr0": cfg.lr_backbone, "name": "backbone"})
    return torch.optim.SGD(groups, lr=cfg.lr_decoder, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, t: int, total: int, power: float) -> dict:
    lrs = {}
    for g in optimizer.param_groups:
        g["lr"] = poly_lr(g["lr0"], t, total, power)
        lrs[g["name"]] = g["lr"]
    return lrs


def group_checksums(model: SegmentationNet) -> dict:
    return {g: state_checksum(model.group(g)) for g in model.group_parameters()}


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = IGNORE_INDEX):
    if not bool((labels != ignore_index).any()):
        return logits.sum() * 0.0  # nothing labelled: zero loss, graph kept
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


@dataclass
class TrainState:
    model: SegmentationNet
    optimizer: torch.optim.Optimizer
    policy: FreezePolicy
    total: int
    iteration: int = 0
    phase: int = 0
    power: float = 0.9
    seed: int = 0


def _step_rng(seed: int, iteration: int) -> np.random.Generator:
    # per-iteration stream so a resumed run draws the same randomization
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1, int(iteration)]))


def train_step(state: TrainState, images: torch.Tensor, labels: torch.Tensor, mode: AugmentMode,
               pool: Optional[StylePool], m: int, num_classes: int) -> dict:
    """One SGD update; returns the log record for this iteration."""
    model = state.model
    model.train()
    lrs = set_lr(state.optimizer, state.iteration, state.total, state.power)
    rng = _step_rng(state.seed, state.iteration)
    drawn = {}

    def hook(f):
        out, info = randomize_batch(f, labels, pool, mode, m, rng, num_classes=num_classes, return_info=True)
        drawn["alpha"] = info.alpha
        return out

    logits = model(images, layer1_hook=None if mode.passthrough else hook)
    loss = segmentation_loss(logits, labels)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergenceError(state.iteration, value)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    alpha = drawn.get("alpha")
    if isinstance(alpha, np.ndarray):
        alpha = alpha.tolist()
    record = {"iteration": state.iteration, "phase": state.phase, "loss": value,
              "lr": lrs, "alpha": None if alpha is None else alpha}
    state.iteration += 1
    return record


def layer1_stream(model: SegmentationNet, data: SegmentationSet, batch_size: int):
    """Layer1 features and labels of a split, in file order, with the model in eval mode."""
    was = model.training
    model.eval()
    try:
        for images, labels in eval_batches(data, batch_size):
            with torch.no_grad():
                f = model.low_level(images)
            yield f, labels
    finally:
        model.train(was)


@torch.no_grad()
def evaluate(model: SegmentationNet, data: SegmentationSet, num_classes: int, batch_size: int = 16
             ) -> ConfusionMatrix:
    was = model.training
    model.eval()
    cm = ConfusionMatrix(num_classes)
    try:
        for images, labels in eval_batches(data, batch_size):
            pred = model(images, out_size=labels.shape[-2:]).argmax(1)
            cm.accumulate(pred.numpy(), labels.numpy())
    finally:
        model.train(was)
    return cm


def build_pool(cfg: ExperimentConfig, model: SegmentationNet, train: SegmentationSet, class_names,
               bank: Optional[StyleBank] = None) -> Optional[StylePool]:
    """Sampling pool for the configured arm; the source set comes from a no-grad Layer1 pass."""
    mode = cfg.mode
    if mode.passthrough or mode.variant == "mixstyle":
        return None
    banks = []
    if mode.variant == "language":
        if bank is None:
            bank = load_bank(cfg.bank)
        if not bank.is_global and list(bank.class_names) != list(class_names):
            raise ConfigurationError(f"bank classes {list(bank.class_names)} != dataset classes {list(class_names)}")
        banks.append(bank)
    elif mode.variant == "noise":
        banks.append(build_noise_bank(layer1_stream(model, train, cfg.batch_size), cfg.m, class_names,
                                      mode.snr_db, seed=cfg.seed))
    if mode.needs_source_set:
        if banks and banks[0].is_global:
            raise ConfigurationError("S+T mixing needs a class-wise (local) bank")
        banks.append(build_source_style_set(layer1_stream(model, train, cfg.batch_size), cfg.m, class_names))
    pool = StylePool.from_banks(*banks)
    channels = model.layer1[-1].conv3.out_channels
    if pool.channels != channels:
        raise ShapeError(f"style bank has {pool.channels} channels, Layer1 has {channels}")
    return pool


@dataclass
class TrainResult:
    model: SegmentationNet
    log: list
    policy: FreezePolicy
    class_names: list
    checksums: dict = field(default_factory=dict)


def save_checkpoint(path, state: TrainState, cfg: ExperimentConfig, class_names) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "class_names": list(class_names),
        "iteration": state.iteration,
        "phase": state.phase,
        "policy": state.policy.name,
        "frozen": sorted(state.model._frozen),
        "trainable": sorted(set(state.model.group_parameters()) - state.model._frozen),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
    }, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(ckpt, dict) or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path} is not a famix checkpoint")
    return ckpt


def model_from_checkpoint(ckpt: dict, encoder: Optional[JointEncoder] = None):
    cfg = ExperimentConfig.from_dict({k: v for k, v in ckpt["config"].items() if k != "profile"},
                                     profile=ckpt["config"].get("profile"))
    encoder = encoder or build_encoder(cfg.encoder, cfg.pretrained)
    model = build_model(encoder, len(ckpt["class_names"]), cfg.head, cfg.output_stride, cfg.seed)
    model.load_state_dict(ckpt["model"])
    model.set_frozen(ckpt["frozen"])
    model.eval()
    return model, cfg


def run_schedule(cfg: ExperimentConfig, out_dir=None, resume=None, encoder: Optional[JointEncoder] = None,
                 bank: Optional[StyleBank] = None, on_record: Optional[Callable] = None,
                 stop_at: Optional[int] = None) -> TrainResult:
    """Train per ``cfg``; writes ``train_log.jsonl`` and ``checkpoint.pt`` under ``out_dir`` if given.

    ``stop_at`` ends the run early (used to exercise resume); the schedule
    still spans ``cfg.iterations``.
    """
    cfg.validate("train", have_bank=bank is not None)
    policy = get_policy(cfg.freeze, cfg.dp_ft_split)
    class_names = read_class_names(cfg.class_names_path)
    K = len(class_names)
    train = load_split(cfg.manifest, cfg.train_split)
    if int(train.labels[train.labels != IGNORE_INDEX].max(initial=0)) >= K:
        raise ConfigurationError(f"labels exceed the {K} classes in {cfg.class_names_path}")

    encoder = encoder or build_encoder(cfg.encoder, cfg.pretrained)
    model = build_model(encoder, K, cfg.head, cfg.output_stride, cfg.seed)
    start, phase = 0, policy.phase_at(0, cfg.iterations)
    ckpt = load_checkpoint(resume) if resume else None
    if ckpt is not None:
        model.load_state_dict(ckpt["model"])
        start, phase = ckpt["iteration"], ckpt["phase"]
    policy.apply(model, phase)
    pool = build_pool(cfg, model, train, class_names, bank)
    optimizer = make_optimizer(model, cfg)
    if ckpt is not None:
        optimizer.load_state_dict(ckpt["optimizer"])
    state = TrainState(model, optimizer, policy, cfg.iterations, start, phase, cfg.power, cfg.seed)

    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if ckpt else "w", encoding="utf-8")
    transform = JointTransform(cfg.crop, cfg.flip, cfg.jitter or (0.0, 0.0, 0.0))
    stream = train_batches(train, cfg.batch_size, cfg.seed, transform)
    for _ in range(start):  # replay the data order up to the resume point
        next(stream)
    records = []
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    try:
        while state.iteration < end:
            want = policy.phase_at(state.iteration, cfg.iterations)
            if want != state.phase:
                log.info("iteration %d: entering phase %d of %s", state.iteration, want, policy.name)
                state.phase = want
                policy.apply(model, want)
                state.optimizer = make_optimizer(model, cfg)
            images, labels = next(stream)
            rec = train_step(state, images, labels, cfg.mode, pool, cfg.m, K)
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if on_record:
                on_record(rec)
    finally:
        if log_fh:
            log_fh.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.pt", state, cfg, class_names)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    model.eval()
    return TrainResult(model, records, policy, class_names, group_checksums(model))


def mining_stream(encoder: JointEncoder, data: SegmentationSet, batch_size: int, epochs: int, seed: int):
    """Layer1 features of seed-shuffled batches over ``epochs`` passes."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            idx = np.sort(order[start:start + batch_size])
            sub = SegmentationSet(data.images[idx], data.labels[idx])
            for images, labels in eval_batches(sub, len(idx)):
                with torch.no_grad():
                    f = encoder.low_level(images)
                yield f, labels


def mine_from_config(cfg: ExperimentConfig, encoder: Optional[JointEncoder] = None, prompts=None):
    """Mine a bank per ``cfg``; returns ``(bank, mining_log_dict)``."""
    from famix.mining import MiningLog, mine_global, mine_style_banks
    from famix.prompts import resolve_prompt_set

    cfg.validate("mine")
    prompts = prompts or resolve_prompt_set(cfg.prompts)
    class_names = read_class_names(cfg.class_names_path)
    data = load_split(cfg.manifest, cfg.train_split)
    encoder = encoder or build_encoder(cfg.encoder, cfg.pretrained)
    stream = mining_stream(encoder, data, cfg.batch_size, cfg.mining_epochs, cfg.seed)
    mlog = MiningLog()
    if cfg.mining == "global":
        bank = mine_global(stream, prompts, encoder, cfg.pin_steps, cfg.pin_step_size, cfg.seed, mining_log=mlog)
    else:
        bank = mine_style_banks(stream, prompts, class_names, encoder, cfg.m, len(class_names), cfg.pin_steps,
                                cfg.pin_step_size, cfg.seed, use_fragment=cfg.prompt_fragment,
                                use_class_name=cfg.prompt_class_name, mining_log=mlog)
    bank.metadata["encoder"] = cfg.encoder
    return bank, mlog.as_dict(bank, prompts)
