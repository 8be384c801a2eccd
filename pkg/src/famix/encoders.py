"""Frozen vision-language encoders with a splittable visual stem.

Style mining needs three things from an encoder: the low-level (Layer1)
features of an image, the joint-space embedding of such features after the
remaining visual stages, and the joint-space embedding of a text prompt.
:class:`JointEncoder` is that contract; :class:`ClipEncoder` implements it on
top of an ``open_clip`` ResNet CLIP and :class:`StubEncoder` is a small
smooth float64 stand-in used for gradient checks.
"""
from __future__ import annotations

import hashlib
import logging
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from famix.errors import ConfigurationError

log = logging.getLogger(__name__)

# channel normalisation constants used by CLIP preprocessing
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

DESK_VISION = dict(layers=(1, 1, 1, 2), width=16, image_size=64)
DESK_TEXT = dict(context_length=77, vocab_size=49408, width=64, heads=2, layers=2)
DESK_EMBED_DIM = 64


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class JointEncoder(nn.Module):
    """Interface for an encoder usable by prompt-driven style mining."""

    embed_dim: int
    feature_channels: int

    def low_level(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embed_features(self, feats: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embed_text(self, texts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def freeze(self) -> "JointEncoder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def checksum(self) -> str:
        return state_checksum(self)


class ClipEncoder(JointEncoder):
    """Adapter around an ``open_clip`` CLIP model with a ModifiedResNet tower."""

    def __init__(self, model: nn.Module, tokenizer=None, native_size: Optional[int] = None):
        super().__init__()
        visual = model.visual
        if not hasattr(visual, "layer1") or not hasattr(visual, "attnpool"):
            raise ConfigurationError("style mining needs a ResNet CLIP visual tower (stem + layer1..4)")
        self.model = model
        self.tokenizer = tokenizer
        image_size = getattr(visual, "image_size", None) or native_size
        if isinstance(image_size, (tuple, list)):
            image_size = image_size[0]
        # Layer1 runs at stride 4; attention pooling expects this grid
        self.native_grid = int(image_size) // 4
        self.feature_channels = visual.layer1[-1].conv3.out_channels
        self.embed_dim = model.text_projection.shape[-1] if isinstance(model.text_projection, torch.Tensor) \
            else model.text_projection.out_features
        self.freeze()

    @property
    def visual(self):
        return self.model.visual

    def low_level(self, images):
        v = self.visual
        return v.layer1(v.stem(images))

    def embed_features(self, feats):
        v = self.visual
        if feats.shape[-2:] != (self.native_grid, self.native_grid):
            feats = F.interpolate(feats, size=(self.native_grid, self.native_grid), mode="bilinear",
                                  align_corners=False)
        x = v.layer4(v.layer3(v.layer2(feats)))
        return v.attnpool(x)

    def embed_text(self, texts):
        tokens = self.tokenizer(list(texts))
        return self.model.encode_text(tokens)


def _clip_tokenizer(name: str = "RN50"):
    import open_clip

    return open_clip.get_tokenizer(name)


def build_clip_encoder(name: str = "RN50", pretrained: Optional[str] = None) -> ClipEncoder:
    """Full-size CLIP ResNet; ``pretrained`` is a local checkpoint path or tag."""
    import open_clip

    if pretrained is None:
        log.warning("no pretrained weights for %s; using BN-calibrated random initialisation", name)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        model = open_clip.create_model(name, pretrained=pretrained)
    if pretrained is None:
        _wake_residuals(model.visual)
        size = model.visual.image_size
        calibrate_batchnorm(model.visual, size[0] if isinstance(size, (tuple, list)) else size, batches=2)
    model.eval()
    return ClipEncoder(model, _clip_tokenizer(name))


def procedural_images(n: int, size: int, seed: int = 0) -> torch.Tensor:
    """Smooth random colour fields with sharp blobs, in ``[0, 1]``; data-free calibration input."""
    g = torch.Generator().manual_seed(seed)
    coarse = torch.rand(n, 3, 4, 4, generator=g)
    x = F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=False)
    fine = F.interpolate(torch.rand(n, 1, size // 4, size // 4, generator=g), size=(size, size), mode="nearest")
    x = x * (0.6 + 0.4 * fine) + 0.05 * torch.randn(n, 3, size, size, generator=g)
    return x.clamp(0, 1)


@torch.no_grad()
def calibrate_batchnorm(visual: nn.Module, image_size: int, seed: int = 0, batches: int = 4,
                        batch_size: int = 16) -> None:
    """Reset BatchNorm running statistics from procedural images (cumulative average).

    A randomly initialised trunk with default running stats (0, 1) shrinks
    activations stage by stage; calibrating gives every BN a unit-scale
    output, as a trained network would have.
    """
    bns = [mod for mod in visual.modules() if isinstance(mod, nn.BatchNorm2d)]
    saved = [(bn.momentum, bn.training) for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None
        bn.train()
    for b in range(batches):
        visual(normalize_images(procedural_images(batch_size, image_size, seed * 1000 + b)))
    for bn, (mom, tr) in zip(bns, saved):
        bn.momentum = mom
        bn.train(tr)


def _wake_residuals(visual: nn.Module) -> None:
    # open_clip zero-initialises the last BN of every bottleneck; a stand-in for
    # trained weights should let the residual branches contribute
    with torch.no_grad():
        for name, p in visual.named_parameters():
            if name.endswith("bn3.weight"):
                p.fill_(1.0)


def build_desk_encoder(seed: int = 0) -> ClipEncoder:
    """A reduced-width ResNet CLIP, deterministically initialised from ``seed`` and BN-calibrated."""
    from open_clip.model import CLIP, CLIPTextCfg, CLIPVisionCfg

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CLIP(embed_dim=DESK_EMBED_DIM, vision_cfg=CLIPVisionCfg(**DESK_VISION),
                     text_cfg=CLIPTextCfg(**DESK_TEXT))
    _wake_residuals(model.visual)
    calibrate_batchnorm(model.visual, DESK_VISION["image_size"], seed)
    model.eval()
    return ClipEncoder(model, _clip_tokenizer())


def build_encoder(encoder_id: str, pretrained: Optional[str] = None) -> JointEncoder:
    """Resolve an encoder id: ``desk[:seed]``, ``stub[:seed]`` or an open_clip name like ``RN50``."""
    kind, _, arg = encoder_id.partition(":")
    if kind == "desk":
        return build_desk_encoder(int(arg or 0))
    if kind == "stub":
        return StubEncoder(seed=int(arg or 0))
    return build_clip_encoder(kind, pretrained)


def _text_seed(text: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}\x00{text}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class StubEncoder(JointEncoder):
    """Small smooth joint-embedding model (float64 by default).

    Text embeddings are fixed pseudo-random vectors keyed by the prompt
    string; the visual head is a 1x1 conv, tanh, spatial mean and a linear
    projection, so the loss surface is smooth enough for finite differences.
    """

    def __init__(self, channels: int = 16, embed_dim: int = 12, hidden: int = 24, seed: int = 0,
                 dtype=torch.float64):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.feature_channels = channels
        self.embed_dim = embed_dim
        self.stem = nn.Conv2d(3, channels, 4, stride=4).to(dtype)
        self.mix = nn.Conv2d(channels, hidden, 1).to(dtype)
        self.proj = nn.Linear(2 * hidden, embed_dim).to(dtype)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=dtype) / max(1, p[0].numel()) ** 0.5)
        self.freeze()

    def low_level(self, images):
        return self.stem(images.to(self.stem.weight.dtype))

    def embed_features(self, feats):
        h = torch.tanh(self.mix(feats.to(self.mix.weight.dtype)))
        pooled = torch.cat([h.mean(dim=(-2, -1)), (h * h).mean(dim=(-2, -1))], dim=-1)
        return self.proj(pooled)

    def embed_text(self, texts: Iterable[str]):
        rows = [np.random.default_rng(_text_seed(t, self.seed)).standard_normal(self.embed_dim) for t in texts]
        return torch.tensor(np.stack(rows), dtype=self.proj.weight.dtype)


def normalize_images(images: torch.Tensor) -> torch.Tensor:
    """Map ``[0, 1]`` RGB batches to CLIP input normalisation."""
    mean = images.new_tensor(CLIP_MEAN)[:, None, None]
    std = images.new_tensor(CLIP_STD)[:, None, None]
    return (images - mean) / std
