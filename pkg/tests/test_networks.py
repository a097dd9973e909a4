from dataclasses import replace

import pytest
import torch
from torch import nn

from domainstyle.networks import (
    AdaIN,
    Discriminator,
    Generator,
    MappingNetwork,
    StyleEncoder,
    adain,
    build_networks,
    initialize,
)


def _nets(cfg):
    torch.manual_seed(0)
    return build_networks(cfg)


def test_adain_identity_affine_normalizes():
    x = torch.randn(2, 5, 6, 6) * 3 + 2
    out = adain(x, torch.ones(2, 5), torch.zeros(2, 5))
    mean = out.mean(dim=(2, 3))
    var = out.var(dim=(2, 3), unbiased=False)
    assert torch.allclose(mean, torch.zeros_like(mean), atol=1e-5)
    assert torch.allclose(var, torch.ones_like(var), atol=1e-3)


def test_adain_zero_scale_gives_shift():
    x = torch.randn(2, 3, 4, 4)
    shift = torch.randn(2, 3)
    out = adain(x, torch.zeros(2, 3), shift)
    assert torch.allclose(out, shift[:, :, None, None].expand_as(out))


def test_adain_constant_channel_is_finite():
    x = torch.full((1, 2, 4, 4), 7.0)
    out = adain(x, torch.ones(1, 2), torch.zeros(1, 2))
    assert torch.isfinite(out).all()
    # (x - mean) is float32 rounding noise, scaled by 1/sqrt(1e-5)
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-4)


def test_adain_rejects_non_finite():
    x = torch.randn(1, 2, 4, 4)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        adain(x, torch.ones(1, 2), torch.zeros(1, 2))


def test_adain_zero_style_is_instance_norm_after_init():
    layer = initialize(AdaIN(8, 4))
    x = torch.randn(3, 4, 5, 5)
    out = layer(x, torch.zeros(3, 8))
    assert torch.equal(out, torch.nn.functional.instance_norm(x, eps=1e-5))


@pytest.mark.parametrize("size", [32, 48, 64])
def test_generator_shape_round_trip(size):
    torch.manual_seed(0)
    G = initialize(Generator(size, 64, base_channels=8, max_channels=32))
    x = torch.rand(2, 3, size, size) * 2 - 1
    out = G(x, torch.randn(2, 64))
    assert out.shape == x.shape
    assert out.abs().max() < 1


def test_generator_rejects_bad_style(toy_cfg):
    G = _nets(toy_cfg)["generator"]
    with pytest.raises(ValueError, match="style"):
        G(torch.zeros(1, 3, 32, 32), torch.zeros(1, 63))


def test_generator_block_counts(toy_cfg):
    G = _nets(toy_cfg)["generator"]
    assert len(G.down) == 4 and len(G.up) == 4
    assert len(G.middle) + len(G.middle_styled) == 4


def test_extra_down_block_knob(toy_cfg):
    G = _nets(replace(toy_cfg, image_size=64, num_down_blocks=5))["generator"]
    assert len(G.down) == len(G.up) == 5
    assert G(torch.zeros(1, 3, 64, 64), torch.zeros(1, 64)).shape == (1, 3, 64, 64)


def test_bottleneck_must_keep_two_positions():
    with pytest.raises(ValueError, match="2x2"):
        Generator(16, 64, base_channels=8, max_channels=16, num_down=4)


def test_generator_is_deterministic(toy_cfg):
    G = _nets(toy_cfg)["generator"]
    x, s = torch.randn(2, 3, 32, 32), torch.randn(2, 64)
    assert torch.equal(G(x, s), G(x, s))


def test_concat_conditioning_has_no_adain(toy_cfg):
    cfg = replace(toy_cfg, ablation=replace(toy_cfg.ablation, conditioning="concat", recon_mode="none"))
    G = _nets(cfg)["generator"]
    assert not any(isinstance(m, AdaIN) for m in G.modules())
    assert G.stem.in_channels == 3 + cfg.num_domains
    onehot = torch.eye(cfg.num_domains)[:2]
    assert G(torch.zeros(2, 3, 32, 32), onehot).shape == (2, 3, 32, 32)


def test_mapping_branches_and_batching(toy_cfg):
    F = _nets(toy_cfg)["mapping"]
    assert len(F.branches) == 3
    z = torch.randn(6, 16)
    y = torch.tensor([0, 1, 2, 2, 1, 0])
    batched = F(z, y)
    assert batched.shape == (6, 64)
    looped = torch.cat([F(z[i : i + 1], y[i : i + 1]) for i in range(6)])
    assert torch.equal(batched, looped)
    same = F(z[:1].repeat(2, 1), torch.tensor([0, 1]))
    assert not torch.allclose(same[0], same[1])


def test_mapping_rejects_bad_label(toy_cfg):
    F = _nets(toy_cfg)["mapping"]
    with pytest.raises(IndexError):
        F(torch.randn(1, 16), torch.tensor([3]))


def test_encoder_heads_and_batching(toy_cfg):
    E = _nets(toy_cfg)["encoder"]
    assert len(E.heads) == 3
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    y = torch.tensor([2, 0, 1, 2])
    out = E(x, y)
    assert out.shape == (4, 64)
    looped = torch.cat([E(x[i : i + 1], y[i : i + 1]) for i in range(4)])
    assert torch.allclose(out, looped, atol=1e-5)
    two = E(x[:1].repeat(2, 1, 1, 1), torch.tensor([0, 1]))
    assert not torch.allclose(two[0], two[1])


def test_encoder_trunk_depth(toy_cfg):
    E = _nets(toy_cfg)["encoder"]
    D = _nets(toy_cfg)["discriminator"]
    assert len(E.blocks) == 6 and len(D.blocks) == 6


def test_discriminator_logit_selection(toy_cfg):
    D = _nets(toy_cfg)["discriminator"]
    x = torch.rand(3, 3, 32, 32) * 2 - 1
    all_logits, cls = D.logits(x)
    assert cls is None and all_logits.shape == (3, 3)
    y = torch.tensor([2, 0, 1])
    assert torch.equal(D(x, y), all_logits[torch.arange(3), y])
    assert all_logits[0, 0] != all_logits[0, 1]
    with pytest.raises(IndexError):
        D(x, torch.tensor([0, 1, 3]))


def test_acgan_discriminator(toy_cfg):
    cfg = replace(toy_cfg, ablation=replace(toy_cfg.ablation, discriminator_head="acgan"))
    D = _nets(cfg)["discriminator"]
    adv, cls = D.logits(torch.zeros(2, 3, 32, 32))
    assert adv.shape == (2, 1) and cls.shape == (2, 3)


def test_initialization_biases(toy_cfg):
    nets = _nets(toy_cfg)
    adain_scale = {id(m.scale.bias) for net in nets.values() for m in net.modules() if isinstance(m, AdaIN)}
    assert adain_scale
    for net in nets.values():
        for name, p in net.named_parameters():
            if not name.endswith("bias"):
                continue
            if id(p) in adain_scale:
                assert torch.equal(p, torch.ones_like(p)), name
            else:
                assert torch.equal(p, torch.zeros_like(p)), name


def test_he_weight_variance():
    torch.manual_seed(0)
    layer = initialize(nn.Sequential(nn.Linear(512, 512)))[0]
    assert abs(layer.weight.var().item() - 2 / 512) < 0.2 * 2 / 512
    conv = initialize(nn.Sequential(nn.Conv2d(64, 64, 3)))[0]
    assert abs(conv.weight.var().item() - 2 / (64 * 9)) < 0.2 * 2 / (64 * 9)


def test_branch_isolation(toy_cfg):
    nets = _nets(toy_cfg)
    y = torch.tensor([1, 1])
    F, E, D = nets["mapping"], nets["encoder"], nets["discriminator"]
    (F(torch.randn(2, 16), y).sum() + E(torch.randn(2, 3, 32, 32), y).sum()
     + D(torch.randn(2, 3, 32, 32), y).sum()).backward()
    for heads in (F.branches, E.heads, D.heads):
        for k, head in enumerate(heads):
            grads = [p.grad for p in head.parameters()]
            if k == 1:
                assert any(g is not None and g.abs().sum() > 0 for g in grads)
            else:
                assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
