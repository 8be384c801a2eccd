"""Experiment configuration, profiles and up-front validation.

A config file is YAML with flat keys; ``mode`` is a nested mapping of
:class:`~famix.augment.AugmentMode` fields.  Example::

    manifest: corpus/manifest.csv
    freeze: FAMIX
    mode: {variant: language, mix: true, mix_source: T}
    bank: runs/mine/bank.famix
    prompts: R1
    iterations: 600
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from famix.augment import AugmentMode
from famix.errors import ConfigurationError
from famix.freeze import get_policy
from famix.prompts import resolve_prompt_set
from famix.stats import grid_side_for

PROFILES = {
    "desk": dict(
        encoder="desk:0", m=16, iterations=600, batch_size=8, crop=64,
        lr_decoder=0.1, lr_backbone=0.01, momentum=0.9, weight_decay=1e-4, power=0.9,
        head="desk", output_stride=16, jitter=(0.1, 0.1, 0.1), flip=True,
        pin_steps=100, pin_step_size=1.0, eval_splits=("val", "shifted"),
    ),
    # hyperparameters of the full-scale protocol; not exercised in CI
    "paper": dict(
        encoder="RN50", m=9, iterations=40_000, batch_size=8, crop=768,
        lr_decoder=0.1, lr_backbone=0.01, momentum=0.9, weight_decay=1e-4, power=0.9,
        head="paper", output_stride=16, jitter=(0.3, 0.3, 0.3), flip=True,
        pin_steps=100, pin_step_size=1.0, eval_splits=("val",),
    ),
}


@dataclass
class ExperimentConfig:
    manifest: Optional[str] = None
    class_names: Optional[str] = None
    train_split: str = "train"
    eval_splits: tuple = ("val", "shifted")
    encoder: str = "desk:0"
    pretrained: Optional[str] = None
    mode: AugmentMode = field(default_factory=AugmentMode)
    freeze: str = "FAMIX"
    dp_ft_split: float = 0.5
    bank: Optional[str] = None
    prompts: str = "R1"
    prompt_fragment: bool = True
    prompt_class_name: bool = True
    mining: str = "local"
    mining_epochs: int = 1
    m: int = 16
    pin_steps: int = 100
    pin_step_size: float = 1.0
    seed: int = 0
    iterations: int = 600
    batch_size: int = 8
    crop: Optional[int] = 64
    lr_decoder: float = 0.1
    lr_backbone: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    head: str = "desk"
    output_stride: int = 16
    jitter: tuple = (0.1, 0.1, 0.1)
    flip: bool = True
    eval_every: int = 0
    profile: str = "desk"
    out_dir: str = "runs/famix"

    @classmethod
    def from_dict(cls, raw: dict, profile: Optional[str] = None, base_dir: Optional[Path] = None
                  ) -> "ExperimentConfig":
        raw = dict(raw or {})
        prof = profile or raw.pop("profile", None) or "desk"
        raw.pop("profile", None)
        if prof not in PROFILES:
            raise ConfigurationError(f"unknown profile {prof!r}; choose from {sorted(PROFILES)}")
        values = dict(PROFILES[prof])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {sorted(unknown)}")
        values.update(raw)
        mode = values.get("mode", {})
        if isinstance(mode, dict):
            try:
                values["mode"] = AugmentMode(**mode)
            except TypeError as exc:
                raise ConfigurationError(f"bad mode: {exc}") from None
        for key in ("eval_splits", "jitter"):
            if key in values and values[key] is not None:
                values[key] = tuple(values[key])
        if base_dir is not None:
            for key in ("manifest", "class_names", "bank", "pretrained"):
                v = values.get(key)
                if v and not Path(v).is_absolute() and (Path(base_dir) / v).exists():
                    values[key] = str(Path(base_dir) / v)
        values["profile"] = prof
        return cls(**values)

    @classmethod
    def load(cls, path, profile: Optional[str] = None, **overrides) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: config must be a mapping")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw, profile, base_dir=path.parent)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = dataclasses.asdict(self.mode)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @property
    def class_names_path(self) -> Optional[Path]:
        if self.class_names:
            return Path(self.class_names)
        if self.manifest:
            return Path(self.manifest).parent / "class_names.txt"
        return None

    def validate(self, command: str = "train", have_bank: bool = False) -> "ExperimentConfig":
        """Check every cross-field constraint and referenced file; raises ConfigurationError.

        ``have_bank`` skips the bank-file check when the caller supplies a bank in memory.
        """
        errors = []
        if not self.manifest:
            errors.append("manifest is required")
        elif not Path(self.manifest).exists():
            errors.append(f"manifest not found: {self.manifest}")
        cn = self.class_names_path
        if cn is not None and not cn.exists():
            errors.append(f"class names file not found: {cn}")
        try:
            grid_side_for(self.m)
        except Exception as exc:
            errors.append(str(exc))
        try:
            get_policy(self.freeze, self.dp_ft_split)
        except ConfigurationError as exc:
            errors.append(str(exc))
        for key in ("iterations", "batch_size", "mining_epochs"):
            if getattr(self, key) < 1:
                errors.append(f"{key} must be >= 1")
        if self.pin_steps < 0:
            errors.append("pin_steps must be >= 0")
        for key in ("lr_decoder", "lr_backbone", "weight_decay", "power", "pin_step_size"):
            v = getattr(self, key)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                errors.append(f"{key} must be a finite non-negative number")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must lie in [0, 1)")
        if self.head not in ("desk", "paper"):
            errors.append(f"head must be 'desk' or 'paper', got {self.head!r}")
        if self.output_stride not in (16, 32):
            errors.append("output_stride must be 16 or 32")
        if self.mining not in ("local", "global"):
            errors.append(f"mining must be 'local' or 'global', got {self.mining!r}")
        if not (self.prompt_fragment or self.prompt_class_name):
            errors.append("prompts need a style fragment, a class name, or both")
        if self.crop is not None and self.crop % 4:
            errors.append("crop must be a multiple of 4 (Layer1 stride)")
        if command in ("mine",) or (command == "train" and self.mode.needs_bank):
            try:
                resolve_prompt_set(self.prompts)
            except Exception as exc:
                errors.append(f"prompts: {exc}")
        if command == "train":
            if self.mode.variant == "language" and not have_bank:
                if not self.bank:
                    errors.append(f"mode {self.mode.variant}/{self.mode.mix_source} needs a bank path")
                elif not Path(self.bank).exists():
                    errors.append(f"bank file not found: {self.bank}")
            if self.batch_size < 2:
                errors.append("training needs batch_size >= 2 (BatchNorm in the head, MixStyle pairing)")
        if errors:
            raise ConfigurationError("; ".join(errors))
        return self
