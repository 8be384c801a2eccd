import numpy as np
import pytest
import torch

from famix.bank import encode_bank
from famix.encoders import StubEncoder, build_desk_encoder
from famix.errors import ConfigurationError, DomainError
from famix.mining import (
    MiningLog,
    mine_global,
    mine_style_banks,
    pin_objective,
    pin_optimize,
    pin_optimize_batch,
    select_balanced_patches,
)
from famix.prompts import PromptSet, PromptSpec, parse_prompt_set, resolve_prompt_set, shipped_prompt_set
from famix.stats import channel_stats, dominant_classes, spatial_stats

NAMES = ["road", "building", "vegetation", "sky"]


@pytest.fixture(scope="module")
def stub():
    return StubEncoder(channels=16, embed_dim=12, seed=0)


def central_differences(fn, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat = grad.view(-1)
    for k in range(x.numel()):
        e = torch.zeros_like(x).view(-1)
        e[k] = h
        e = e.view_as(x)
        flat[k] = (fn(x + e) - fn(x - e)) / (2 * h)
    return grad


def test_pin_gradient_matches_finite_differences(stub):
    g = torch.Generator().manual_seed(0)
    patch = torch.randn(1, 16, 8, 8, generator=g, dtype=torch.float64) * 0.7 + 0.2
    text = stub.embed_text(["Ethereal Mist style road"])
    mu0, sigma0 = spatial_stats(patch)
    normalized = (patch - mu0[..., None, None]) / sigma0[..., None, None]
    loss = pin_objective(stub, normalized, text)
    mu = (mu0 + 0.3 * torch.randn(mu0.shape, generator=g, dtype=torch.float64)).requires_grad_(True)
    sigma = (sigma0 * 1.2).requires_grad_(True)
    g_mu, g_sigma = torch.autograd.grad(loss(mu, sigma).sum(), (mu, sigma))
    with torch.no_grad():
        fd_mu = central_differences(lambda v: loss(v, sigma).sum(), mu.detach())
        fd_sigma = central_differences(lambda v: loss(mu, v).sum(), sigma.detach())
    for analytic, numeric in ((g_mu, fd_mu), (g_sigma, fd_sigma)):
        rel = (analytic - numeric).norm() / numeric.norm()
        assert rel < 1e-3


def test_pin_zero_steps_is_identity(stub):
    patch = torch.randn(16, 4, 4, dtype=torch.float64)
    res = pin_optimize(patch, PromptSpec("Urban Grit", "road"), stub, steps=0)
    s = channel_stats(patch)
    assert torch.equal(res.style.mu, s.mu) and torch.equal(res.style.sigma, s.sigma)
    assert res.final_cosine_distance == res.initial_cosine_distance
    assert res.iterations_run == 0


def test_pin_non_increasing_and_deterministic(stub):
    patch = torch.randn(16, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    spec = PromptSpec("Cosmic Voyage", "sky")
    a = pin_optimize(patch, spec, stub, steps=30, step_size=1.0)
    b = pin_optimize(patch, spec, stub, steps=30, step_size=1.0)
    assert np.all(np.diff(a.trace) <= 0)
    assert a.final_cosine_distance < a.initial_cosine_distance
    assert 0 <= a.final_cosine_distance <= 2
    assert a.trace == b.trace
    assert torch.equal(a.style.mu, b.style.mu) and torch.equal(a.style.sigma, b.style.sigma)
    assert (a.style.sigma >= 1e-6).all()


def test_pin_errors(stub):
    patch = torch.randn(16, 4, 4, dtype=torch.float64)
    with pytest.raises(DomainError):
        pin_optimize(patch, PromptSpec("x", "y"), stub, steps=-1)
    with pytest.raises(ConfigurationError):
        pin_optimize_batch(patch[None], torch.zeros(1, 5, dtype=torch.float64), stub)


def test_pin_leaves_encoder_untouched(stub):
    before = stub.checksum()
    pin_optimize(torch.randn(16, 4, 4, dtype=torch.float64), PromptSpec("a", "b"), stub, steps=5)
    assert stub.checksum() == before


def test_select_balanced_patches():
    f = [torch.full((1, 2, 2), float(i)) for i in range(4)]
    y = [np.full((2, 2), c) for c in (0, 1, 0, 1)]
    chosen = select_balanced_patches(zip(f, y))
    assert sorted(chosen) == [0, 1]
    assert chosen[0].flatten()[0] == 0 and chosen[1].flatten()[0] == 1
    assert len(select_balanced_patches(zip(f, [np.full((2, 2), 3)] * 4))) == 1
    assert select_balanced_patches(zip(f, [np.full((2, 2), 255)] * 4)) == {}


def scripted_stream(batches, n=2, c=16, h=8, scale=2, classes=4, seed=0):
    """Feature/label batches where each batch's label grid is spelled out."""
    rng = np.random.default_rng(seed)
    out = []
    for grid in batches:
        grid = np.asarray(grid)  # (n, g, g)
        g = grid.shape[-1]
        ph = h // g * scale
        y = np.kron(grid, np.ones((ph, ph), dtype=np.int64))
        f = torch.from_numpy(rng.normal(size=(grid.shape[0], c, h, h)))
        out.append((f, y))
    return out


def test_bank_growth_equals_distinct_dominant_classes(stub):
    batches = [
        [[[0, 1], [0, 1]], [[1, 1], [0, 0]]],
        [[[2, 2], [2, 255]], [[255, 255], [255, 255]]],
        [[[255, 3], [1, 0]], [[2, 2], [2, 2]]],
    ]
    stream = scripted_stream(batches)
    mlog = MiningLog()
    bank = mine_style_banks(stream, shipped_prompt_set("R1").head(3), NAMES, stub, m=4, steps=2,
                            seed=0, mining_log=mlog)
    expected = [len(set(np.unique(b)) - {255}) for b in map(np.asarray, batches)]
    assert mlog.added_per_batch == expected == [2, 1, 4]
    assert bank.counts() == [2, 2, 2, 1]
    for (f, y), added in zip(stream, expected):
        dom = dominant_classes(y, 4, 4)
        assert len(set(dom.ravel()) - {-1}) == added


def test_mining_one_batch_two_classes_and_singleton_prompts(stub):
    stream = scripted_stream([[[[0, 1], [1, 0]]]], n=1)
    bank = mine_style_banks(stream, PromptSet(("Pastel Dreams",)), NAMES, stub, m=4, steps=1)
    assert bank.counts() == [1, 1, 0, 0]
    prompts = [bank.entries[k][0].prompt for k in (0, 1)]
    assert prompts == ["Pastel Dreams style road", "Pastel Dreams style building"]


def test_every_class_every_batch(stub):
    grid = [[[0, 1], [2, 3]]]
    stream = scripted_stream([grid] * 5, n=1)
    bank = mine_style_banks(stream, shipped_prompt_set("R1"), NAMES, stub, m=4, steps=1, seed=1)
    assert bank.counts() == [5, 5, 5, 5]


def test_mining_is_byte_identical_under_seed(stub):
    stream = scripted_stream([[[[0, 1], [2, 3]]], [[[3, 3], [1, 255]]]], n=1, seed=4)
    run = lambda: encode_bank(mine_style_banks(stream, shipped_prompt_set("R1"), NAMES, stub, m=4, steps=4, seed=9))
    assert run() == run()


def test_mining_prompt_ablations(stub):
    stream = scripted_stream([[[[0, 0], [0, 0]]]], n=1)
    cn_only = mine_style_banks(stream, shipped_prompt_set("R1"), NAMES, stub, m=4, steps=1, use_fragment=False)
    assert cn_only.entries[0][0].prompt == "road"
    no_cn = mine_style_banks(stream, PromptSet(("ioscjspa",), "RCP"), NAMES, stub, m=4, steps=1,
                             use_class_name=False)
    assert no_cn.entries[0][0].prompt == "ioscjspa style"


def test_mining_rejects_empty_prompts(stub):
    with pytest.raises(ConfigurationError):
        mine_style_banks([], None, NAMES, stub, m=4)
    with pytest.raises(ConfigurationError):
        PromptSet(())


def test_mine_global(stub):
    stream = scripted_stream([[[[0, 1], [2, 3]]] * 3], n=3)
    mlog = MiningLog()
    bank = mine_global(stream, PromptSet(("Ethereal Mist",)), stub, steps=2, mining_log=mlog)
    assert bank.is_global and bank.num_classes == 1
    assert len(bank) == 3 and mlog.added_per_batch == [3]
    assert bank.entries[0][0].prompt == "Ethereal Mist style driving"


def test_prompt_rendering_injective():
    frags = shipped_prompt_set("R1").entries[:15]
    rendered = {PromptSpec(f, c).rendered for f in frags for c in NAMES}
    assert len(rendered) == len(frags) * len(NAMES)
    assert PromptSpec("Retro Futurism", "building").rendered == "Retro Futurism style building"


def test_shipped_prompt_sets():
    r1, r2 = shipped_prompt_set("R1"), shipped_prompt_set("R2")
    assert r1.variant == "RSP" and r2.variant == "RCP"
    assert r1.entries[:2] == ("Ethereal Mist", "Cyberpunk Cityscape")
    assert r2.entries[0] == "ioscjspa" and len(r2) == 20
    assert len(r1) >= 20 and len(set(r1.entries)) == len(r1)
    assert resolve_prompt_set("R1:5").cardinality == 5


def test_prompt_file_round_trip(tmp_path):
    from famix.prompts import read_prompt_set, write_prompt_set

    ps = PromptSet(("Nature in Infrared", "8-Bit Pixel Adventures"), "RSP")
    write_prompt_set(ps, tmp_path / "p.txt")
    assert read_prompt_set(tmp_path / "p.txt") == ps
    with pytest.raises(ConfigurationError):
        parse_prompt_set("no header\nfoo\n")
    with pytest.raises(ConfigurationError):
        parse_prompt_set("variant: RSP\nfoo\nfoo\n")


def test_desk_encoder_contract():
    enc = build_desk_encoder(0)
    images = torch.rand(2, 3, 64, 64)
    feats = enc.low_level(images)
    assert feats.shape == (2, enc.feature_channels, 16, 16)
    v = enc.embed_features(feats[:, :, :4, :4])
    t = enc.embed_text(["Ethereal Mist style road"])
    assert v.shape == (2, enc.embed_dim) and t.shape == (1, enc.embed_dim)
    assert build_desk_encoder(0).checksum() == enc.checksum()
    assert build_desk_encoder(1).checksum() != enc.checksum()
