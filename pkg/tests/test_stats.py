import itertools
import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from famix.errors import DegenerateSignalError, DomainError, InvalidInputError, PartitionError, ShapeError
from famix.stats import (
    EPS_SIGMA,
    StyleStats,
    adain,
    as_feature_map,
    channel_stats,
    dominant_class,
    dominant_classes,
    mix_styles,
    partition,
    perturb_with_snr,
    sample_mix_weight,
)


def brute_stats(values):
    """Mean and population std by explicit summation."""
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def brute_dominant(patch, ignore=255):
    counts = Counter(v for v in patch if v != ignore)
    if not counts:
        return None
    best = max(counts.values())
    return min(k for k, c in counts.items() if c == best)


def style(mu, sigma, dtype=torch.float64):
    return StyleStats(torch.tensor(mu, dtype=dtype), torch.tensor(sigma, dtype=dtype))


# channel_stats


def test_channel_stats_single_channel():
    f = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]], dtype=torch.float64)
    mean, std = brute_stats([1, 3, 5, 7])
    s = channel_stats(f)
    assert s.mu.item() == pytest.approx(mean)
    assert s.sigma.item() == pytest.approx(std)
    assert std == pytest.approx(math.sqrt(5))


def test_channel_stats_constant_channel_is_clamped():
    s = channel_stats(torch.full((1, 2, 2), 2.0))
    assert s.mu.item() == 2.0
    assert s.sigma.item() == pytest.approx(EPS_SIGMA)


def test_channel_stats_shift_invariance():
    base = torch.randn(1, 5, 6, dtype=torch.float64)
    f = torch.cat([base, base + 10])
    s = channel_stats(f)
    assert s.mu[1] == pytest.approx(s.mu[0].item() + 10)
    assert s.sigma[1] == pytest.approx(s.sigma[0].item())


def test_channel_stats_rejects_nonfinite():
    f = torch.zeros(1, 2, 2)
    f[0, 0, 1] = float("nan")
    with pytest.raises(InvalidInputError):
        channel_stats(f)


def test_as_feature_map_hwc_layout():
    hwc = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    x = as_feature_map(hwc, layout="hwc")
    assert x.shape == (4, 2, 3)
    assert torch.equal(x[:, 1, 2], torch.from_numpy(hwc[1, 2]))
    with pytest.raises(ShapeError):
        as_feature_map(hwc, layout="nchw")


# adain


def test_adain_known_values():
    f = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]], dtype=torch.float64)
    out = adain(f, style([0.0], [1.0]))
    r5 = math.sqrt(5)
    expected = torch.tensor([[[-3 / r5, -1 / r5], [1 / r5, 3 / r5]]], dtype=torch.float64)
    assert torch.allclose(out, expected, atol=1e-12)


def test_adain_own_style_is_identity():
    f = torch.randn(8, 6, 5, dtype=torch.float64)
    assert torch.allclose(adain(f, channel_stats(f)), f, atol=1e-5)


def test_adain_channel_mismatch():
    with pytest.raises(ShapeError):
        adain(torch.randn(3, 4, 4), style([0.0, 0.0], [1.0, 1.0]))


def test_adain_batched_styles():
    f = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    target = style(np.arange(6.0).reshape(2, 3), np.ones((2, 3)) * 2)
    s = channel_stats(adain(f, target))
    assert torch.allclose(s.mu, target.mu, atol=1e-10)
    assert torch.allclose(s.sigma, target.sigma, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(
    c=st.integers(1, 6),
    h=st.integers(2, 7),
    w=st.integers(2, 7),
    seed=st.integers(0, 2**31 - 1),
)
def test_adain_transfers_stats(c, h, w, seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(c, h, w, generator=g, dtype=torch.float64) * 3 + 1
    mu = torch.randn(c, generator=g, dtype=torch.float64) * 5
    sigma = torch.rand(c, generator=g, dtype=torch.float64) * 4 + 0.05
    out = channel_stats(adain(f, StyleStats(mu, sigma)))
    torch.testing.assert_close(out.mu, mu, rtol=1e-4, atol=1e-8)
    torch.testing.assert_close(out.sigma, sigma, rtol=1e-4, atol=0)


@settings(max_examples=60, deadline=None)
@given(c=st.integers(1, 6), h=st.integers(2, 7), seed=st.integers(0, 2**31 - 1))
def test_adain_self_identity_property(c, h, seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(c, h, h + 1, generator=g, dtype=torch.float64)
    s = channel_stats(f)
    if (s.sigma <= EPS_SIGMA).any():
        return
    torch.testing.assert_close(adain(f, s), f, rtol=0, atol=1e-5)


# mix_styles


def test_mix_endpoints_and_midpoint():
    s, t = style([2.0, 1.0], [1.0, 3.0]), style([6.0, -1.0], [2.0, 0.5])
    assert torch.equal(mix_styles(s, t, 0.0).mu, s.mu)
    assert torch.equal(mix_styles(s, t, 0.0).sigma, s.sigma)
    assert torch.equal(mix_styles(s, t, 1.0).mu, t.mu)
    assert torch.equal(mix_styles(s, t, 1.0).sigma, t.sigma)
    assert mix_styles(s, t, 0.5).mu[0].item() == 4.0


def test_mix_per_channel_alpha():
    s, t = style([0.0, 0.0], [1.0, 1.0]), style([10.0, 10.0], [3.0, 3.0])
    m = mix_styles(s, t, np.array([0.25, 1.0]))
    assert m.mu.tolist() == [2.5, 10.0]
    assert m.sigma.tolist() == [1.5, 3.0]


@pytest.mark.parametrize("alpha", [-0.1, 1.5, float("nan"), np.array([0.5, 2.0])])
def test_mix_alpha_out_of_range(alpha):
    s = style([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(DomainError):
        mix_styles(s, s, alpha)


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0, 1), seed=st.integers(0, 10_000))
def test_mix_is_affine_path(alpha, seed):
    rng = np.random.default_rng(seed)
    s = style(rng.normal(size=4), rng.uniform(0.1, 2, size=4))
    t = style(rng.normal(size=4), rng.uniform(0.1, 2, size=4))
    m = mix_styles(s, t, alpha)
    torch.testing.assert_close(m.mu, (1 - alpha) * s.mu + alpha * t.mu, rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(m.sigma, (1 - alpha) * s.sigma + alpha * t.sigma, rtol=1e-12, atol=1e-12)
    same = mix_styles(s, s, alpha)
    assert torch.equal(same.mu, s.mu) and torch.equal(same.sigma, s.sigma)


# sample_mix_weight


def test_mix_weight_support_and_determinism():
    a = sample_mix_weight(channels=1000, seed=3)
    assert ((a >= 0) & (a <= 1)).all()
    assert np.array_equal(a, sample_mix_weight(channels=1000, seed=3))
    assert sample_mix_weight(seed=7) == sample_mix_weight(seed=7)
    assert isinstance(sample_mix_weight(seed=7), float)


def test_mix_weight_beta_symmetry():
    draws = sample_mix_weight(channels=100_000, seed=0)
    assert abs(draws.mean() - 0.5) < 0.01
    assert abs((draws <= 0.5).mean() - 0.5) < 0.01
    # U-shaped law: most mass near the endpoints
    assert ((draws < 0.1) | (draws > 0.9)).mean() > 0.6


# partition


def test_partition_four_patches_reassemble():
    f = torch.arange(16.0).reshape(1, 4, 4)
    grid = partition(f, 4)
    patches = grid.patches()
    assert len(patches) == 4
    assert all(p.shape == (1, 2, 2) for p in patches)
    top = torch.cat([patches[0], patches[1]], dim=-1)
    bottom = torch.cat([patches[2], patches[3]], dim=-1)
    assert torch.equal(torch.cat([top, bottom], dim=-2), f)


def test_partition_single_patch():
    f = torch.randn(3, 5, 7)
    assert torch.equal(partition(f, 1).patch(0, 0), f)


@pytest.mark.parametrize("shape,m", [((1, 5, 4), 4), ((1, 4, 4), 3), ((1, 6, 6), 4 * 4), ((1, 4, 4), 0)])
def test_partition_errors(shape, m):
    with pytest.raises(PartitionError):
        partition(torch.zeros(shape), m)


@settings(max_examples=40, deadline=None)
@given(g=st.integers(1, 4), ph=st.integers(1, 4), pw=st.integers(1, 4), n=st.integers(1, 3))
def test_partition_bijection(g, ph, pw, n):
    f = torch.randn(n, 2, g * ph, g * pw)
    grid = partition(f, g * g)
    view = grid.view()
    assert view.shape == (n, 2, g, g, ph, pw)
    for i, j in itertools.product(range(g), range(g)):
        assert torch.equal(view[:, :, i, j], grid.patch(i, j))
    assert torch.equal(grid.assemble(view), f)
    y = np.random.default_rng(0).integers(0, 9, size=(n, g * ph, g * pw))
    assert np.array_equal(partition(y, g * g).assemble(partition(y, g * g).view()), y)


# dominant_class


def test_dominant_class_examples():
    assert dominant_class([[1, 1], [2, 0]]) == 1
    assert dominant_class([[2, 1], [1, 2]]) == 1
    assert dominant_class([[255, 255], [255, 255]], ignore_index=255) is None


@pytest.mark.parametrize("alphabet", [1, 2, 3, 4])
def test_dominant_class_exhaustive_2x2(alphabet):
    symbols = list(range(alphabet - 1)) + [255] if alphabet > 1 else [0]
    symbols = sorted(set(symbols + list(range(alphabet))))
    patches = list(itertools.product(symbols, repeat=4))
    for p in patches:
        assert dominant_class(np.array(p).reshape(2, 2)) == brute_dominant(p)
    labels = np.array(patches).reshape(-1, 2, 2)
    got = dominant_classes(labels, 1, num_classes=max(alphabet, 1))
    want = [brute_dominant(p) for p in patches]
    assert [None if v < 0 else int(v) for v in got.reshape(-1)] == want


def test_dominant_classes_grid_layout():
    y = np.array([[0, 0, 1, 1], [0, 2, 1, 255], [255, 255, 3, 3], [255, 255, 2, 3]])
    got = dominant_classes(y[None], 4, num_classes=4)
    assert got.tolist() == [[[0, 1], [-1, 3]]]


def test_dominant_classes_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        dominant_classes(np.full((1, 2, 2), 7), 1, num_classes=4)


# perturb_with_snr


@pytest.mark.parametrize("snr_db,ratio", [(20.0, 0.1), (0.0, 1.0), (6.0, 10 ** (-6 / 20)), (-10.0, 10 ** 0.5)])
def test_snr_norm_ratio(snr_db, ratio):
    rng = np.random.default_rng(1)
    s = style(rng.normal(size=16), rng.uniform(1, 2, size=16))
    out = perturb_with_snr(s, snr_db, seed=5)
    got = torch.linalg.norm(out.mu - s.mu) / torch.linalg.norm(s.mu)
    assert got.item() == pytest.approx(ratio, rel=1e-6)
    if snr_db >= 20.0:
        # no clamping happened, so the sigma ratio is exact too
        got_sigma = torch.linalg.norm(out.sigma - s.sigma) / torch.linalg.norm(s.sigma)
        assert got_sigma.item() == pytest.approx(ratio, rel=1e-6)


def test_snr_independent_noise_for_mu_and_sigma():
    s = style(np.ones(8), np.ones(8))
    out = perturb_with_snr(s, 10.0, seed=2)
    assert not torch.allclose(out.mu - s.mu, out.sigma - s.sigma)


def test_snr_infinite_is_identity_and_deterministic():
    s = style([1.0, 2.0], [1.0, 1.0])
    assert perturb_with_snr(s, math.inf, seed=0) is s
    a = perturb_with_snr(s, 10.0, seed=4)
    b = perturb_with_snr(s, 10.0, seed=4)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.sigma, b.sigma)


def test_snr_degenerate_signal():
    with pytest.raises(DegenerateSignalError):
        perturb_with_snr(style([0.0, 0.0], [1.0, 1.0]), 20.0, seed=0)
    assert perturb_with_snr(style([0.0, 0.0], [1.0, 1.0]), math.inf).mu.tolist() == [0.0, 0.0]


def test_style_stats_validation():
    with pytest.raises(DomainError):
        style([0.0], [0.0])
    with pytest.raises(InvalidInputError):
        style([float("inf")], [1.0])
    with pytest.raises(ShapeError):
        style([0.0, 1.0], [1.0])
