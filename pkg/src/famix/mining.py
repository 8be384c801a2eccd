"""Prompt-driven style mining into class-wise style banks.

PIN keeps the normalised content of a Layer1 patch fixed and optimises the
per-channel affine statistics so that the encoder's embedding of the
restyled patch moves towards the embedding of a text prompt.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from famix.bank import BankEntry, StyleBank
from famix.encoders import JointEncoder
from famix.errors import ConfigurationError, DomainError, ShapeError
from famix.prompts import GLOBAL_CONTEXT, PromptSet, PromptSpec
from famix.stats import (
    EPS_SIGMA,
    IGNORE_INDEX,
    SeedLike,
    StyleStats,
    spatial_stats,
    as_rng,
    dominant_class,
    dominant_classes,
    partition,
)

log = logging.getLogger(__name__)

PIN_STEPS = 100
PIN_STEP_SIZE = 1.0


@dataclass
class PinResult:
    style: StyleStats
    final_cosine_distance: float
    initial_cosine_distance: float
    iterations_run: int
    prompt: Optional[PromptSpec] = None
    trace: list = field(default_factory=list)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return 1.0 - F.cosine_similarity(a, b, dim=-1)


def pin_objective(encoder: JointEncoder, normalized: torch.Tensor, text_emb: torch.Tensor):
    """Per-patch cosine distance as a function of the style variables."""

    def loss(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        stylized = normalized * sigma[..., None, None] + mu[..., None, None]
        return cosine_distance(encoder.embed_features(stylized), text_emb)

    return loss


def pin_optimize_batch(patches: torch.Tensor, text_emb: torch.Tensor, encoder: JointEncoder,
                       steps: int = PIN_STEPS, step_size: float = PIN_STEP_SIZE):
    """Run PIN independently on each patch of ``patches`` ``(P, C, h, w)``.

    Plain gradient descent; a step that would raise a patch's loss is
    rejected and that patch's step size halved, so each loss trace is
    non-increasing.  Returns ``(mu, sigma, trace)`` with ``trace`` of shape
    ``(steps + 1, P)``.
    """
    if steps < 0:
        raise DomainError(f"steps must be >= 0, got {steps}")
    if text_emb.shape[-1] != encoder.embed_dim:
        raise ConfigurationError(f"text embedding dim {text_emb.shape[-1]} != encoder dim {encoder.embed_dim}")
    x = patches.detach()
    mu0, sigma0 = spatial_stats(x)
    normalized = (x - mu0[..., None, None]) / sigma0[..., None, None]
    text_emb = text_emb.detach().to(x.dtype)
    loss_fn = pin_objective(encoder, normalized, text_emb)

    def evaluate(mu, sigma):
        mu = mu.detach().requires_grad_(True)
        sigma = sigma.detach().requires_grad_(True)
        loss = loss_fn(mu, sigma)
        g_mu, g_sigma = torch.autograd.grad(loss.sum(), (mu, sigma))
        return loss.detach(), g_mu, g_sigma

    mu, sigma = mu0.clone(), sigma0.clone()
    loss, g_mu, g_sigma = evaluate(mu, sigma)
    lr = torch.full_like(loss, float(step_size))
    trace = [loss.clone()]
    for _ in range(steps):
        cand_mu = mu - lr[:, None] * g_mu
        cand_sigma = (sigma - lr[:, None] * g_sigma).clamp_min(EPS_SIGMA)
        cand_loss, cand_g_mu, cand_g_sigma = evaluate(cand_mu, cand_sigma)
        accept = cand_loss <= loss
        a = accept[:, None]
        mu = torch.where(a, cand_mu, mu)
        sigma = torch.where(a, cand_sigma, sigma)
        g_mu = torch.where(a, cand_g_mu, g_mu)
        g_sigma = torch.where(a, cand_g_sigma, g_sigma)
        loss = torch.where(accept, cand_loss, loss)
        lr = torch.where(accept, lr, lr / 2)
        trace.append(loss.clone())
    return mu.detach(), sigma.detach(), torch.stack(trace)


class TextCache:
    """Memoised text embeddings for one encoder."""

    def __init__(self, encoder: JointEncoder):
        self.encoder = encoder
        self._cache = {}

    def __call__(self, texts: Sequence[str]) -> torch.Tensor:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            with torch.no_grad():
                emb = self.encoder.embed_text(missing)
            for t, e in zip(missing, emb):
                self._cache[t] = e
        return torch.stack([self._cache[t] for t in texts])


def pin_optimize(patch: torch.Tensor, prompt: PromptSpec, encoder: JointEncoder,
                 steps: int = PIN_STEPS, step_size: float = PIN_STEP_SIZE) -> PinResult:
    """PIN on a single ``(C, h, w)`` patch."""
    if patch.ndim != 3:
        raise ShapeError(f"expected a (C, h, w) patch, got {tuple(patch.shape)}")
    with torch.no_grad():
        text = encoder.embed_text([prompt.rendered])
    mu, sigma, trace = pin_optimize_batch(patch[None], text, encoder, steps, step_size)
    t = trace[:, 0]
    return PinResult(StyleStats(mu[0], sigma[0]), float(t[-1]), float(t[0]), steps, prompt, t.tolist())


def select_balanced_patches(grid_patches, ignore_index: int = IGNORE_INDEX) -> dict:
    """First patch seen for each dominant class; all-ignore patches are skipped."""
    chosen = {}
    for feat, label in grid_patches:
        c = dominant_class(label, ignore_index)
        if c is not None and c not in chosen:
            chosen[c] = feat
    return chosen


def _first_per_class(dom: np.ndarray) -> list:
    """``(class, n, i, j)`` for the first patch of each dominant class, in visit order."""
    seen = {}
    for n, i, j in np.ndindex(dom.shape):
        c = int(dom[n, i, j])
        if c >= 0 and c not in seen:
            seen[c] = (c, n, i, j)
    return list(seen.values())


@dataclass
class MiningLog:
    batches: int = 0
    added_per_batch: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def as_dict(self, bank: StyleBank, prompts: PromptSet) -> dict:
        return {
            "batches": self.batches,
            "added_per_batch": self.added_per_batch,
            "class_counts": dict(zip(bank.class_names, bank.counts())),
            "fragments_available": prompts.cardinality,
            "distinct_fragments_available": len(set(prompts.entries)),
            "prompt_variant": prompts.variant,
            "entries": self.records,
        }


def _bank_metadata(prompts, steps, step_size, seed, m, extra=None):
    meta = {
        "prompt_set": {"variant": prompts.variant, "cardinality": prompts.cardinality},
        "pin": {"steps": int(steps), "step_size": float(step_size), "optimizer": "gd-halving"},
        "seed": None if seed is None or isinstance(seed, np.random.Generator) else int(seed),
        "m": int(m),
    }
    meta.update(extra or {})
    return meta


def mine_style_banks(features: Iterable, prompts: PromptSet, class_names: Sequence[str], encoder: JointEncoder,
                     m: int, num_classes: Optional[int] = None, steps: int = PIN_STEPS,
                     step_size: float = PIN_STEP_SIZE, seed: SeedLike = 0, ignore_index: int = IGNORE_INDEX,
                     use_fragment: bool = True, use_class_name: bool = True, mining_log: Optional[MiningLog] = None
                     ) -> StyleBank:
    """Local, class-balanced style mining over a stream of ``(features, labels)`` batches.

    ``features`` are Layer1 activations ``(N, C, H, W)``; ``labels`` are
    integer maps ``(N, H', W')`` whose size is an integer multiple of the
    feature size.  Each batch contributes one mined style per distinct
    dominant class.
    """
    if prompts is None or len(prompts) == 0:
        raise ConfigurationError("empty prompt set")
    K = num_classes if num_classes is not None else len(class_names)
    if len(class_names) != K:
        raise ConfigurationError(f"{len(class_names)} class names for {K} classes")
    rng = as_rng(seed)
    texts = TextCache(encoder)
    bank = None
    mlog = mining_log if mining_log is not None else MiningLog()
    for b, (f, y) in enumerate(features):
        f = torch.as_tensor(f)
        if bank is None:
            bank = StyleBank.empty(class_names, f.shape[1],
                                   **_bank_metadata(prompts, steps, step_size, seed, m, {"scope": "local"}))
        dom = dominant_classes(y, m, K, ignore_index)
        picks = _first_per_class(dom)
        mlog.batches += 1
        mlog.added_per_batch.append(len(picks))
        if not picks:
            continue
        grid = partition(f, m).view()
        patches = torch.stack([grid[n, :, i, j] for _, n, i, j in picks])
        specs = []
        for c, *_ in picks:
            fragment = prompts.entries[int(rng.integers(len(prompts)))] if use_fragment else None
            specs.append(PromptSpec(fragment, class_names[c] if use_class_name else None))
        text = texts([s.rendered for s in specs]).to(patches.dtype)
        mu, sigma, trace = pin_optimize_batch(patches, text, encoder, steps, step_size)
        for p, (c, n, i, j) in enumerate(picks):
            sid = f"b{b}/n{n}/p{i},{j}"
            bank.add(c, BankEntry(mu[p].numpy(), sigma[p].numpy(), specs[p].rendered, sid))
            mlog.records.append({"class": c, "source": sid, "prompt": specs[p].rendered,
                                 "initial": float(trace[0, p]), "final": float(trace[-1, p])})
    if bank is None:
        raise ConfigurationError("feature stream was empty")
    bank.metadata["bank_size"] = len(bank)
    return bank


def mine_global(features: Iterable, prompts: PromptSet, encoder: JointEncoder, steps: int = PIN_STEPS,
                step_size: float = PIN_STEP_SIZE, seed: SeedLike = 0, context: str = GLOBAL_CONTEXT,
                mining_log: Optional[MiningLog] = None) -> StyleBank:
    """One style per whole feature map, prompted with ``<fragment> style driving``.

    Labels in the stream are ignored; the result is a single-key bank.
    """
    if prompts is None or len(prompts) == 0:
        raise ConfigurationError("empty prompt set")
    rng = as_rng(seed)
    texts = TextCache(encoder)
    bank = None
    mlog = mining_log if mining_log is not None else MiningLog()
    for b, item in enumerate(features):
        f = torch.as_tensor(item[0] if isinstance(item, (tuple, list)) else item)
        if bank is None:
            bank = StyleBank.empty([context], f.shape[1],
                                   **_bank_metadata(prompts, steps, step_size, seed, 1, {"scope": "global"}))
        specs = [PromptSpec(prompts.entries[int(rng.integers(len(prompts)))], context) for _ in range(f.shape[0])]
        text = texts([s.rendered for s in specs]).to(f.dtype)
        mu, sigma, trace = pin_optimize_batch(f, text, encoder, steps, step_size)
        mlog.batches += 1
        mlog.added_per_batch.append(f.shape[0])
        for n in range(f.shape[0]):
            sid = f"b{b}/n{n}"
            bank.add(0, BankEntry(mu[n].numpy(), sigma[n].numpy(), specs[n].rendered, sid))
            mlog.records.append({"class": 0, "source": sid, "prompt": specs[n].rendered,
                                 "initial": float(trace[0, n]), "final": float(trace[-1, n])})
    if bank is None:
        raise ConfigurationError("feature stream was empty")
    bank.metadata["bank_size"] = len(bank)
    return bank
