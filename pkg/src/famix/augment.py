"""Feature-level style randomization arms used during training.

All arms act on Layer1 activations ``(N, C, H, W)`` with labels ``(N, H', W')``
at an integer multiple of the feature resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import torch

from famix.bank import BankEntry, StyleBank
from famix.errors import ConfigurationError, DegenerateBatchError, ShapeError
from famix.stats import (
    IGNORE_INDEX,
    PatchGrid,
    SeedLike,
    as_rng,
    dominant_classes,
    partition,
    perturb_with_snr,
    sample_mix_weight,
    spatial_stats,
    StyleStats,
)

VARIANTS = ("language", "noise", "none", "mixstyle")
SOURCES = ("T", "S", "S+T")


@dataclass(frozen=True)
class AugmentMode:
    """One arm of the augmentation ablations.

    ``variant`` picks where bank styles come from (mined with language,
    noise-perturbed source styles, or nothing); ``mix`` toggles the linear
    interpolation with the patch's own style; ``mix_source`` picks the
    sampling set (mined ``T``, source ``S`` or their union).  ``mixstyle``
    is the whole-map, batch-shuffled baseline and ignores the other fields.
    """

    variant: str = "language"
    mix: bool = True
    mix_source: str = "T"
    locality: str = "local"
    snr_db: Optional[float] = None
    alpha_shape: str = "scalar"
    probability: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown augmentation variant {self.variant!r}")
        if self.mix_source not in SOURCES:
            raise ConfigurationError(f"mix_source must be one of {SOURCES}, got {self.mix_source!r}")
        if self.locality not in ("local", "global"):
            raise ConfigurationError(f"locality must be 'local' or 'global', got {self.locality!r}")
        if self.alpha_shape not in ("scalar", "channel"):
            raise ConfigurationError(f"alpha_shape must be 'scalar' or 'channel', got {self.alpha_shape!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError(f"probability must lie in [0, 1], got {self.probability}")
        if self.variant == "none" and self.mix and self.mix_source != "S":
            raise ConfigurationError("mixing without augmentation only makes sense with mix_source='S'")
        if self.variant == "noise" and (self.snr_db is None or math.isnan(self.snr_db)):
            raise ConfigurationError("noise augmentation needs snr_db")
        if self.variant in ("language", "noise") and self.mix_source == "S":
            raise ConfigurationError(f"variant {self.variant!r} samples augmented styles; use mix_source T or S+T")
        if self.locality == "global" and self.variant != "language":
            raise ConfigurationError("global locality is defined for language-mined banks only")

    @property
    def passthrough(self) -> bool:
        return self.variant == "none" and not self.mix

    @property
    def needs_bank(self) -> bool:
        return self.variant in ("language", "noise")

    @property
    def needs_source_set(self) -> bool:
        return (self.variant == "none" and self.mix) or (self.needs_bank and self.mix_source == "S+T")

    @classmethod
    def from_flags(cls, augment: bool, mix: bool, **kw) -> "AugmentMode":
        """The Freeze x Augment x Mix table arms."""
        if augment:
            return cls("language", mix, kw.pop("mix_source", "T"), **kw)
        return cls("none", mix, "S", **kw)


class StylePool:
    """Per-class stacked style tensors, ready for vectorised sampling."""

    def __init__(self, num_classes: int, channels: int, shared: bool = False):
        self.num_classes = num_classes
        self.channels = channels
        self.shared = shared
        self.mu = [torch.zeros(0, channels) for _ in range(num_classes)]
        self.sigma = [torch.zeros(0, channels) for _ in range(num_classes)]

    @classmethod
    def from_banks(cls, *banks: StyleBank) -> "StylePool":
        banks = [b for b in banks if b is not None]
        if not banks:
            raise ConfigurationError("no style bank to sample from")
        shared = banks[0].is_global
        K, C = banks[0].num_classes, banks[0].channels
        for b in banks[1:]:
            if b.channels != C or (b.is_global != shared) or (not shared and b.num_classes != K):
                raise ShapeError("style banks to combine disagree on classes or channels")
        pool = cls(K, C, shared)
        for k in range(K):
            mus, sigmas = zip(*(b.class_arrays(k) for b in banks))
            pool.mu[k] = torch.from_numpy(np.concatenate(mus))
            pool.sigma[k] = torch.from_numpy(np.concatenate(sigmas))
        return pool

    def size(self, k: int) -> int:
        return self.mu[0 if self.shared else k].shape[0]


@dataclass
class RandomizeInfo:
    alpha: object = None
    dominant: Optional[np.ndarray] = None
    applied: Optional[np.ndarray] = None
    target_mu: Optional[torch.Tensor] = None
    target_sigma: Optional[torch.Tensor] = None
    skipped: bool = False


def randomize_batch(f: torch.Tensor, y, pool: Optional[StylePool], mode: AugmentMode, m: int,
                    seed: SeedLike = None, alpha=None, num_classes: Optional[int] = None,
                    ignore_index: int = IGNORE_INDEX, return_info: bool = False):
    """Patch-wise, class-aware style randomization of a Layer1 batch.

    One mixing weight is drawn per batch (unless ``alpha`` is given).  Each
    grid patch gets a style sampled from the pool entry of its dominant
    class; patches that are all-ignore or whose class has no style keep
    their own statistics.
    """
    info = RandomizeInfo()
    if mode.passthrough:
        info.skipped = True
        return (f, info) if return_info else f
    if mode.variant == "mixstyle":
        out, perm, a = mixstyle_batch(f, seed, alpha=alpha, return_perm=True)
        info.alpha = a
        info.dominant = perm
        return (out, info) if return_info else out
    if pool is None:
        raise ConfigurationError("this augmentation arm needs a style pool")
    if pool.channels != f.shape[1]:
        raise ShapeError(f"style pool has {pool.channels} channels, features have {f.shape[1]}")
    rng = as_rng(seed)
    if mode.probability < 1.0 and rng.random() >= mode.probability:
        info.skipped = True
        return (f, info) if return_info else f

    y_np = np.asarray(y)
    if num_classes is not None:
        K = num_classes
    elif pool.shared:  # class-agnostic pool: any non-ignore label counts
        labelled = y_np[y_np != ignore_index]
        K = int(labelled.max()) + 1 if labelled.size else 1
    else:
        K = pool.num_classes
    m_eff = 1 if mode.locality == "global" else m
    dom = dominant_classes(y_np, m_eff, K, ignore_index)
    if mode.mix and alpha is None:
        alpha = sample_mix_weight(f.shape[1] if mode.alpha_shape == "channel" else None, rng)

    N, C = f.shape[:2]
    g = dom.shape[-1]
    t_mu = torch.zeros(N, g, g, C, dtype=f.dtype)
    t_sigma = torch.ones(N, g, g, C, dtype=f.dtype)
    applied = np.zeros(dom.shape, dtype=bool)
    for n, i, j in np.ndindex(dom.shape):
        c = int(dom[n, i, j])
        if c < 0:
            continue
        k = 0 if pool.shared else c
        size = pool.size(k)
        if size == 0:
            continue
        idx = int(rng.integers(size))
        t_mu[n, i, j] = pool.mu[k][idx]
        t_sigma[n, i, j] = pool.sigma[k][idx]
        applied[n, i, j] = True

    grid = partition(f, m_eff).view()  # (N, C, g, g, ph, pw)
    mu_p, sigma_p = spatial_stats(grid)  # (N, C, g, g)
    t_mu = t_mu.permute(0, 3, 1, 2)
    t_sigma = t_sigma.permute(0, 3, 1, 2)
    if mode.mix:
        a = torch.as_tensor(alpha, dtype=f.dtype)
        if a.ndim == 1:
            a = a[None, :, None, None]
        mu_mix = torch.lerp(mu_p.detach(), t_mu, a)
        sigma_mix = torch.lerp(sigma_p.detach(), t_sigma, a)
    else:
        mu_mix, sigma_mix = t_mu, t_sigma
    restyled = (grid - mu_p[..., None, None]) / sigma_p[..., None, None] * sigma_mix[..., None, None] \
        + mu_mix[..., None, None]
    mask = torch.from_numpy(applied)[:, None, :, :, None, None]
    out = PatchGrid.assemble(torch.where(mask, restyled, grid))
    info.alpha, info.dominant, info.applied = alpha, dom, applied
    info.target_mu, info.target_sigma = t_mu, t_sigma
    return (out, info) if return_info else out


def mixstyle_batch(f: torch.Tensor, seed: SeedLike = None, alpha=None, return_perm: bool = False):
    """Vanilla MixStyle: mix whole-map statistics with a shuffled partner."""
    N = f.shape[0]
    if N < 2:
        raise DegenerateBatchError("MixStyle needs a batch of at least two feature maps")
    rng = as_rng(seed)
    perm = rng.permutation(N)
    if alpha is None:
        alpha = sample_mix_weight(None, rng)
    mu, sigma = spatial_stats(f)
    mu, sigma = mu.detach(), sigma.detach()
    p = torch.from_numpy(perm)
    a = torch.as_tensor(alpha, dtype=f.dtype)
    mu_mix = torch.lerp(mu, mu[p], a)
    sigma_mix = torch.lerp(sigma, sigma[p], a)
    mu_f, sigma_f = spatial_stats(f)
    out = (f - mu_f[..., None, None]) / sigma_f[..., None, None] * sigma_mix[..., None, None] + mu_mix[..., None, None]
    return (out, perm, alpha) if return_perm else out


def _patch_styles(features: Iterable, m: int, num_classes: int, ignore_index: int, balanced: bool):
    for b, (f, y) in enumerate(features):
        f = torch.as_tensor(f)
        dom = dominant_classes(np.asarray(y), m, num_classes, ignore_index)
        mu, sigma = spatial_stats(partition(f, m).view())  # (N, C, g, g)
        seen = set()
        for n, i, j in np.ndindex(dom.shape):
            c = int(dom[n, i, j])
            if c < 0 or (balanced and c in seen):
                continue
            seen.add(c)
            yield b, c, f"b{b}/n{n}/p{i},{j}", mu[n, :, i, j], sigma[n, :, i, j]


def build_source_style_set(features: Iterable, m: int, class_names, ignore_index: int = IGNORE_INDEX,
                           balanced: bool = False) -> StyleBank:
    """Channel stats of every non-ignore patch, filed under its dominant class."""
    bank = None
    for _, c, sid, mu, sigma in _patch_styles(features, m, len(class_names), ignore_index, balanced):
        if bank is None:
            bank = StyleBank.empty(class_names, mu.shape[0], scope="source", m=int(m))
        bank.add(c, BankEntry(mu.numpy(), sigma.numpy(), "", sid))
    if bank is None:
        raise ConfigurationError("no labelled patches found while collecting source styles")
    return bank


def build_noise_bank(features: Iterable, m: int, class_names, snr_db: float, seed: SeedLike = 0,
                     ignore_index: int = IGNORE_INDEX) -> StyleBank:
    """Noise-perturbed source styles, one per dominant class per batch."""
    rng = as_rng(seed)
    bank = None
    for _, c, sid, mu, sigma in _patch_styles(features, m, len(class_names), ignore_index, balanced=True):
        if bank is None:
            bank = StyleBank.empty(class_names, mu.shape[0], scope="noise", m=int(m),
                                   snr_db=float(snr_db) if math.isfinite(snr_db) else "inf",
                                   seed=None if isinstance(seed, np.random.Generator) else seed)
        s = perturb_with_snr(StyleStats(mu.double(), sigma.double()), snr_db, rng)
        bank.add(c, BankEntry(s.mu.numpy(), s.sigma.numpy(), f"snr={snr_db:g}dB", sid))
    if bank is None:
        raise ConfigurationError("no labelled patches found while building the noise bank")
    return bank
