"""Feature-statistics math: channel stats, AdaIN, style mixing, patch grids.

Feature maps are torch tensors laid out channels-first, either a single map
``(C, H, W)`` or a batch ``(N, C, H, W)``.  Statistics are always taken over
the two trailing spatial axes.  Use :func:`as_feature_map` to bring an
``(H, W, C)`` array into this layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from famix.errors import (
    DegenerateSignalError,
    DomainError,
    InvalidInputError,
    PartitionError,
    ShapeError,
)

EPS_SIGMA = 1e-6
MIX_BETA = (0.1, 0.1)
IGNORE_INDEX = 255

SeedLike = Union[None, int, np.random.Generator]


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def as_feature_map(data, layout: str = "chw") -> torch.Tensor:
    """Validate ``data`` and return it as a channels-first tensor.

    ``layout`` names the axis order of the input: ``"chw"``, ``"hwc"``,
    ``"nchw"`` or ``"nhwc"``.
    """
    x = torch.as_tensor(data)
    if not x.is_floating_point():
        x = x.to(torch.get_default_dtype())
    layout = layout.lower()
    if layout not in ("chw", "hwc", "nchw", "nhwc") or x.ndim != len(layout):
        raise ShapeError(f"expected a {len(layout)}-d tensor for layout {layout!r}, got shape {tuple(x.shape)}")
    if layout == "hwc":
        x = x.permute(2, 0, 1)
    elif layout == "nhwc":
        x = x.permute(0, 3, 1, 2)
    if min(x.shape[-3:]) < 1:
        raise ShapeError(f"empty feature map of shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("feature map contains NaN or Inf")
    return x


_EPS_SIGMA_F32 = float(np.float32(EPS_SIGMA))


@dataclass(frozen=True)
class StyleStats:
    """Per-channel mean and standard deviation; trailing axis is channels."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        mu = torch.as_tensor(self.mu)
        sigma = torch.as_tensor(self.sigma)
        if mu.shape != sigma.shape:
            raise ShapeError(f"mu shape {tuple(mu.shape)} != sigma shape {tuple(sigma.shape)}")
        if not (torch.isfinite(mu).all() and torch.isfinite(sigma).all()):
            raise InvalidInputError("style statistics must be finite")
        # float32(1e-6) is a hair below 1e-6; accept the clamp value at either precision
        if (sigma < _EPS_SIGMA_F32).any():
            raise DomainError(f"sigma below {EPS_SIGMA}: min={sigma.min().item()!r}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]

    def to(self, dtype=None, device=None) -> "StyleStats":
        return StyleStats(self.mu.to(device=device, dtype=dtype), self.sigma.to(device=device, dtype=dtype))


def spatial_stats(x: torch.Tensor, eps: float = EPS_SIGMA):
    """Population mean/std over the last two axes, std clamped at ``eps``."""
    mu = x.mean(dim=(-2, -1))
    sigma = x.var(dim=(-2, -1), unbiased=False).sqrt().clamp_min(eps)
    return mu, sigma


def channel_stats(f) -> StyleStats:
    x = torch.as_tensor(f)
    if x.ndim < 3:
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("feature map contains NaN or Inf")
    mu, sigma = spatial_stats(x)
    return StyleStats(mu, sigma)


def adain(source, target_style: StyleStats) -> torch.Tensor:
    """Re-normalise ``source`` so its channel statistics become ``target_style``."""
    x = torch.as_tensor(source)
    mu_t, sigma_t = target_style.mu, target_style.sigma
    if mu_t.shape[-1] != x.shape[-3]:
        raise ShapeError(f"style has {mu_t.shape[-1]} channels, feature map has {x.shape[-3]}")
    mu_s, sigma_s = spatial_stats(x)
    mu_t = mu_t.to(x)[..., None, None]
    sigma_t = sigma_t.to(x)[..., None, None]
    return (x - mu_s[..., None, None]) / sigma_s[..., None, None] * sigma_t + mu_t


def _check_alpha(alpha) -> torch.Tensor:
    a = torch.as_tensor(alpha, dtype=torch.float64)
    if not torch.isfinite(a).all() or (a < 0).any() or (a > 1).any():
        raise DomainError(f"mixing weight must lie in [0, 1], got {alpha!r}")
    return a


def mix_styles(source: StyleStats, target: StyleStats, alpha) -> StyleStats:
    """Affine path ``(1 - alpha) * source + alpha * target`` for mu and sigma."""
    if source.mu.shape[-1] != target.mu.shape[-1]:
        raise ShapeError(f"channel mismatch: {source.channels} vs {target.channels}")
    a = _check_alpha(alpha).to(source.mu.dtype)
    tmu, tsig = target.mu.to(source.mu), target.sigma.to(source.sigma)
    # torch.lerp keeps both endpoints exact
    return StyleStats(torch.lerp(source.mu, tmu, a), torch.lerp(source.sigma, tsig, a))


def sample_mix_weight(channels: Optional[int] = None, seed: SeedLike = None):
    """Draw the mixing weight from Beta(0.1, 0.1).

    Returns a float, or an array of ``channels`` i.i.d. draws when
    ``channels`` is given.
    """
    rng = as_rng(seed)
    a, b = MIX_BETA
    if channels is None:
        return float(rng.beta(a, b))
    return rng.beta(a, b, size=channels)


def _move_grid_axes(x, order):
    if isinstance(x, torch.Tensor):
        return x.permute(*order)
    return np.transpose(x, order)


@dataclass(frozen=True)
class PatchGrid:
    """A ``grid_side x grid_side`` tiling of the two trailing axes of ``parent``."""

    parent: object
    grid_side: int

    @property
    def m(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_shape(self) -> tuple:
        h, w = self.parent.shape[-2:]
        return h // self.grid_side, w // self.grid_side

    def view(self):
        """Array of shape ``(..., g, g, ph, pw)`` holding every patch."""
        g = self.grid_side
        ph, pw = self.patch_shape
        lead = tuple(self.parent.shape[:-2])
        x = self.parent.reshape(*lead, g, ph, g, pw)
        n = len(lead)
        order = tuple(range(n)) + (n, n + 2, n + 1, n + 3)
        return _move_grid_axes(x, order)

    def patch(self, i: int, j: int):
        ph, pw = self.patch_shape
        return self.parent[..., i * ph:(i + 1) * ph, j * pw:(j + 1) * pw]

    def patches(self) -> list:
        g = self.grid_side
        return [self.patch(i, j) for i in range(g) for j in range(g)]

    @staticmethod
    def assemble(grid_view):
        """Inverse of :meth:`view`."""
        *lead, g, g2, ph, pw = grid_view.shape
        n = len(lead)
        order = tuple(range(n)) + (n, n + 2, n + 1, n + 3)
        x = _move_grid_axes(grid_view, order)
        return x.reshape(*lead, g * ph, g2 * pw)


def grid_side_for(m: int) -> int:
    if m < 1:
        raise PartitionError(f"patch count must be positive, got {m}")
    g = math.isqrt(m)
    if g * g != m:
        raise PartitionError(f"patch count {m} is not a perfect square")
    return g


def partition(f, m: int) -> PatchGrid:
    g = grid_side_for(m)
    h, w = f.shape[-2:]
    if h % g or w % g:
        raise PartitionError(f"{h}x{w} map cannot be split into a {g}x{g} grid")
    return PatchGrid(f, g)


def dominant_class(y_patch, ignore_index: int = IGNORE_INDEX) -> Optional[int]:
    """Most frequent non-ignore label; ties go to the lowest id."""
    y = np.asarray(y_patch).ravel()
    y = y[y != ignore_index]
    if y.size == 0:
        return None
    return int(np.argmax(np.bincount(y)))


def dominant_classes(labels, m: int, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Dominant class for every patch of a label batch ``(N, H, W)``.

    Returns an int array ``(N, g, g)`` using -1 where a patch is all-ignore.
    """
    y = np.asarray(labels)
    grid = partition(y, m).view()
    lead = grid.shape[:-2]
    flat = grid.reshape(-1, grid.shape[-2] * grid.shape[-1]).astype(np.int64)
    valid = flat != ignore_index
    if (flat[valid] >= num_classes).any() or (flat[valid] < 0).any():
        raise InvalidInputError(f"label outside [0, {num_classes - 1}] and not ignore")
    rows = np.broadcast_to(np.arange(flat.shape[0])[:, None], flat.shape)
    counts = np.zeros((flat.shape[0], num_classes), dtype=np.int64)
    np.add.at(counts, (rows[valid], flat[valid]), 1)
    out = counts.argmax(axis=1)
    out[counts.sum(axis=1) == 0] = -1
    return out.reshape(lead)


def perturb_with_snr(s: StyleStats, snr_db: float, seed: SeedLike = None) -> StyleStats:
    """Add Gaussian noise to mu and sigma at a fixed signal-to-noise ratio (dB)."""
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise DomainError(f"snr_db must be finite or +inf, got {snr_db!r}")
    if snr_db == math.inf:
        return s
    rng = as_rng(seed)
    scale = 10.0 ** (-snr_db / 20.0)

    def noisy(v: torch.Tensor, name: str) -> torch.Tensor:
        v64 = v.detach().cpu().double().numpy()
        norm = np.linalg.norm(v64)
        if norm == 0:
            raise DegenerateSignalError(f"{name} has zero norm; SNR is undefined")
        n = rng.standard_normal(v64.shape)
        out = v64 + scale * norm / np.linalg.norm(n) * n
        return torch.from_numpy(out).to(v.dtype)

    mu = noisy(s.mu, "mu")
    sigma = noisy(s.sigma, "sigma").clamp_min(EPS_SIGMA)
    return StyleStats(mu, sigma)
