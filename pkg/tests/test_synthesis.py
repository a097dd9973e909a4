import hashlib
import json

import numpy as np
import pytest
import torch

from domainstyle.data import sample_latents
from domainstyle.losses import diversity_loss
from domainstyle.synthesis import (
    GRID_FILL,
    interpolate_styles,
    latent_style,
    reference_style,
    render_grid,
    sample_sources,
    save_grid,
    translate_latent,
    translate_reference,
)
from domainstyle.training import ModelBundle


@pytest.fixture(scope="module")
def bundle():
    from domainstyle.config import default_config

    return ModelBundle.build(default_config("toy"))


@pytest.fixture
def cfg(toy_cfg):
    return toy_cfg


@pytest.fixture(scope="module")
def images(shapes_ds):
    return torch.stack([x for x, _ in sample_sources(shapes_ds, per_domain=1)])


def _live_checksum(bundle):
    h = hashlib.sha256()
    for net in bundle.nets.values():
        for p in net.parameters():
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def test_latent_deterministic(bundle, cfg, images):
    z = sample_latents(3, cfg.latent_dim, np.random.default_rng(0))
    a = translate_latent(bundle, cfg, images, 1, z)
    b = translate_latent(bundle, cfg, images, 1, z)
    assert torch.equal(a, b)
    assert a.shape == images.shape


def test_compositional_identity(bundle, cfg, images):
    z = sample_latents(3, cfg.latent_dim, np.random.default_rng(1))
    y = torch.tensor([0, 2, 1])
    with torch.no_grad():
        direct = bundle.ema["generator"](images, bundle.ema["mapping"](z, y))
    assert torch.equal(translate_latent(bundle, cfg, images, y, z), direct)


def test_ema_isolation(cfg, images):
    from domainstyle.config import default_config

    b = ModelBundle.build(default_config("toy"))
    z = sample_latents(3, cfg.latent_dim, np.random.default_rng(2))
    before = translate_latent(b, cfg, images, 0, z)
    with torch.no_grad():
        for p in b.G.parameters():
            p.add_(0.5)
        for p in b.F.parameters():
            p.mul_(-1)
    assert torch.equal(translate_latent(b, cfg, images, 0, z), before)


def test_diversity_consistency(bundle, cfg, images):
    rng = np.random.default_rng(3)
    z1 = sample_latents(3, cfg.latent_dim, rng)
    z2 = sample_latents(3, cfg.latent_dim, rng)
    a = translate_latent(bundle, cfg, images, 2, z1)
    b = translate_latent(bundle, cfg, images, 2, z2)
    assert (a - b).abs().mean().item() == pytest.approx(diversity_loss(a, b).item(), rel=0, abs=0)


def test_reference_code_shared(bundle, cfg, images):
    ref = images[:1]
    s = reference_style(bundle, cfg, ref, 1)
    assert s.shape == (1, 64)
    out = translate_reference(bundle, cfg, images, ref, 1)
    with torch.no_grad():
        expected = bundle.ema["generator"](images, s.expand(len(images), -1))
    assert torch.equal(out, expected)
    assert torch.equal(translate_reference(bundle, cfg, images, ref, 1), out)


def test_out_of_range_domain(bundle, cfg, images):
    z = sample_latents(3, cfg.latent_dim, np.random.default_rng(0))
    with pytest.raises(IndexError):
        translate_latent(bundle, cfg, images, 3, z)


def test_interpolation(bundle, cfg, images):
    z = sample_latents(2, cfg.latent_dim, np.random.default_rng(4))
    s = latent_style(bundle, cfg, z, 0)
    s_a, s_b = s[:1].expand(3, -1), s[1:].expand(3, -1)
    frames = interpolate_styles(bundle, images, s_a, s_b, 5)
    assert len(frames) == 5
    with torch.no_grad():
        assert torch.equal(frames[0], bundle.ema["generator"](images, s_a))
        assert torch.equal(frames[-1], bundle.ema["generator"](images, s_b))
    two = interpolate_styles(bundle, images, s_a, s_b, 2)
    assert torch.equal(two[0], frames[0]) and torch.equal(two[1], frames[-1])
    same = interpolate_styles(bundle, images, s_a, s_a, 4)
    assert all(torch.equal(f, same[0]) for f in same)
    with pytest.raises(ValueError):
        interpolate_styles(bundle, images, s_a, s_b, 1)
    with pytest.raises(ValueError, match="style shapes"):
        interpolate_styles(bundle, images, s_a, s_b[:, :10], 3)


def test_grid_layout(bundle, cfg, images, shapes_ds, tmp_path):
    refs = sample_sources(shapes_ds, per_domain=2, split="train")[:4]
    sources = [images[0], images[1], images[2]]
    grid = render_grid(bundle, cfg, sources, refs, layout="reference")
    S = cfg.image_size
    assert grid.shape == (4 * S, 5 * S, 3)
    assert (grid[:S, :S] == GRID_FILL).all()
    expected = translate_reference(bundle, cfg, images[1:2], refs[2][0][None], refs[2][1], as_uint8=True)[0]
    assert np.array_equal(grid[2 * S:3 * S, 3 * S:4 * S], expected)
    path = save_grid(grid, tmp_path / "g.png", [{"source": "a.png"}])
    assert path.is_file()
    assert json.loads(path.with_suffix(".json").read_text()) == {"cells": [{"source": "a.png"}]}


def test_grid_needs_styles(bundle, cfg, images):
    with pytest.raises(ValueError):
        render_grid(bundle, cfg, [images[0]], [], layout="latent")
    with pytest.raises(ValueError):
        render_grid(bundle, cfg, [], [(images[0], 0)])


def test_synthesis_leaves_live_parameters(bundle, cfg, images, shapes_ds):
    before = _live_checksum(bundle)
    z = sample_latents(3, cfg.latent_dim, np.random.default_rng(5))
    translate_latent(bundle, cfg, images, 0, z)
    translate_reference(bundle, cfg, images, images[:1], 2)
    interpolate_styles(bundle, images, latent_style(bundle, cfg, z, 0), latent_style(bundle, cfg, z, 1), 3)
    render_grid(bundle, cfg, list(images), [(z[:1], 1)], layout="latent")
    assert _live_checksum(bundle) == before
