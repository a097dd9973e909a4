"""Generator, mapping network, style encoder and multi-task discriminator."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ExperimentConfig

IN_EPS = 1e-5
LRELU_SLOPE = 0.2
NUM_MIDDLE_BLOCKS = 4
NUM_TRUNK_BLOCKS = 6


def cond_dim(cfg: ExperimentConfig) -> int:
    """Length of the conditioning vector the generator consumes."""
    mode = cfg.ablation.recon_mode
    if mode == "latent":
        return cfg.latent_dim + cfg.num_domains
    if mode == "none":
        return cfg.num_domains
    return cfg.style_dim


def code_dim(cfg: ExperimentConfig) -> int:
    """Length of the per-domain code the style encoder emits."""
    return cfg.latent_dim if cfg.ablation.recon_mode == "latent" else cfg.style_dim


class NonFiniteFeaturesError(ValueError, FloatingPointError):
    """Non-finite activations reached a normalization layer."""


def adain(x: Tensor, scale: Tensor, shift: Tensor, eps: float = IN_EPS) -> Tensor:
    """Instance-normalize ``x`` per sample and channel, then ``scale * x + shift``."""
    if not torch.isfinite(x).all():
        raise NonFiniteFeaturesError("adain received non-finite features")
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError("adain needs at least 2 spatial positions per channel")
    normed = F.instance_norm(x, eps=eps)
    return scale[:, :, None, None] * normed + shift[:, :, None, None]


class AdaIN(nn.Module):
    def __init__(self, style_dim: int, num_features: int):
        super().__init__()
        self.scale = nn.Linear(style_dim, num_features)
        self.shift = nn.Linear(style_dim, num_features)

    def forward(self, x: Tensor, s: Tensor) -> Tensor:
        return adain(x, self.scale(s), self.shift(s))


class ResBlk(nn.Module):
    """Pre-activation residual unit, optionally instance-normalized and downsampling."""

    def __init__(self, dim_in: int, dim_out: int, normalize: bool = False, downsample: bool = False):
        super().__init__()
        self.normalize = normalize
        self.downsample = downsample
        self.conv1 = nn.Conv2d(dim_in, dim_in, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        if normalize:
            self.norm1 = nn.InstanceNorm2d(dim_in, affine=True, eps=IN_EPS)
            self.norm2 = nn.InstanceNorm2d(dim_in, affine=True, eps=IN_EPS)
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, bias=False) if dim_in != dim_out else None

    def _shortcut(self, x: Tensor) -> Tensor:
        if self.shortcut is not None:
            x = self.shortcut(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        return x

    def _residual(self, x: Tensor) -> Tensor:
        if self.normalize:
            x = self.norm1(x)
        x = self.conv1(F.leaky_relu(x, LRELU_SLOPE))
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.normalize:
            x = self.norm2(x)
        return self.conv2(F.leaky_relu(x, LRELU_SLOPE))

    def forward(self, x: Tensor) -> Tensor:
        return (self._shortcut(x) + self._residual(x)) / math.sqrt(2)


class AdainResBlk(nn.Module):
    """Pre-activation residual unit with AdaIN normalization, optionally upsampling."""

    def __init__(self, dim_in: int, dim_out: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm1 = AdaIN(style_dim, dim_in)
        self.norm2 = AdaIN(style_dim, dim_out)
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, bias=False) if dim_in != dim_out else None

    def _shortcut(self, x: Tensor) -> Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.shortcut is not None:
            x = self.shortcut(x)
        return x

    def _residual(self, x: Tensor, s: Tensor) -> Tensor:
        x = F.leaky_relu(self.norm1(x, s), LRELU_SLOPE)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv1(x)
        x = F.leaky_relu(self.norm2(x, s), LRELU_SLOPE)
        return self.conv2(x)

    def forward(self, x: Tensor, s: Tensor) -> Tensor:
        return (self._shortcut(x) + self._residual(x, s)) / math.sqrt(2)


class UpResBlk(ResBlk):
    """Instance-normalized residual unit with nearest upsampling (concat conditioning)."""

    def __init__(self, dim_in: int, dim_out: int, upsample: bool = False):
        super().__init__(dim_in, dim_out, normalize=True)
        self.upsample = upsample

    def _shortcut(self, x: Tensor) -> Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return super()._shortcut(x)

    def _residual(self, x: Tensor) -> Tensor:
        x = F.leaky_relu(self.norm1(x), LRELU_SLOPE)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv1(x)
        x = F.leaky_relu(self.norm2(x), LRELU_SLOPE)
        return self.conv2(x)


def _channel_plan(base: int, cap: int, n: int) -> list[int]:
    return [min(base * 2**i, cap) for i in range(n + 1)]


class Generator(nn.Module):
    """Encoder-decoder translator: IN downsampling, AdaIN (or concat) decoding.

    With ``conditioning="concat"`` the conditioning vector is broadcast as extra
    input channels and the network holds no AdaIN layer at all.
    """

    def __init__(
        self,
        image_size: int = 256,
        style_dim: int = 64,
        base_channels: int = 64,
        max_channels: int = 512,
        num_down: int = 4,
        conditioning: str = "adain",
    ):
        super().__init__()
        if image_size % 2**num_down or image_size // 2**num_down < 2:
            raise ValueError(f"image_size {image_size} must be a multiple of 2**{num_down} leaving >= 2x2 features")
        self.style_dim = style_dim
        self.conditioning = conditioning
        in_ch = 3 + (style_dim if conditioning == "concat" else 0)
        chans = _channel_plan(base_channels, max_channels, num_down)

        self.stem = nn.Conv2d(in_ch, chans[0], 3, 1, 1)
        self.down = nn.ModuleList(
            ResBlk(chans[i], chans[i + 1], normalize=True, downsample=True) for i in range(num_down)
        )
        bottom = chans[-1]
        n_enc_mid = NUM_MIDDLE_BLOCKS // 2
        self.middle = nn.ModuleList(
            ResBlk(bottom, bottom, normalize=True) for _ in range(n_enc_mid)
        )
        if conditioning == "adain":
            self.middle_styled = nn.ModuleList(
                AdainResBlk(bottom, bottom, style_dim) for _ in range(NUM_MIDDLE_BLOCKS - n_enc_mid)
            )
            self.up = nn.ModuleList(
                AdainResBlk(chans[i + 1], chans[i], style_dim, upsample=True)
                for i in reversed(range(num_down))
            )
        elif conditioning == "concat":
            self.middle_styled = nn.ModuleList(
                UpResBlk(bottom, bottom) for _ in range(NUM_MIDDLE_BLOCKS - n_enc_mid)
            )
            self.up = nn.ModuleList(
                UpResBlk(chans[i + 1], chans[i], upsample=True) for i in reversed(range(num_down))
            )
        else:
            raise ValueError(f"unknown conditioning {conditioning!r}")
        self.head_norm = nn.InstanceNorm2d(chans[0], affine=True, eps=IN_EPS)
        self.head = nn.Conv2d(chans[0], 3, 1)

    def forward(self, x: Tensor, s: Tensor) -> Tensor:
        if s.dim() != 2 or s.shape[1] != self.style_dim:
            raise ValueError(f"style codes must have shape (batch, {self.style_dim}), got {tuple(s.shape)}")
        if s.shape[0] != x.shape[0]:
            raise ValueError("need one style code per image")
        if self.conditioning == "concat":
            cond = s[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
            x = torch.cat([x, cond], dim=1)
        h = self.stem(x)
        for blk in self.down:
            h = blk(h)
        for blk in self.middle:
            h = blk(h)
        for blk in [*self.middle_styled, *self.up]:
            h = blk(h, s) if self.conditioning == "adain" else blk(h)
        h = F.leaky_relu(self.head_norm(h), LRELU_SLOPE)
        return torch.tanh(self.head(h))


class MappingNetwork(nn.Module):
    """Shared 4-layer MLP trunk followed by one 4-layer branch per domain."""

    def __init__(self, latent_dim: int = 16, style_dim: int = 64, num_domains: int = 2, hidden_dim: int = 512):
        super().__init__()
        layers = []
        for i in range(4):
            layers += [nn.Linear(latent_dim if i == 0 else hidden_dim, hidden_dim), nn.ReLU()]
        self.shared = nn.Sequential(*layers)
        self.branches = nn.ModuleList()
        for _ in range(num_domains):
            self.branches.append(nn.Sequential(
                nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
                nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
                nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
                nn.Linear(hidden_dim, style_dim),
            ))

    @property
    def num_domains(self) -> int:
        return len(self.branches)

    def forward(self, z: Tensor, y: Tensor) -> Tensor:
        _check_labels(y, self.num_domains)
        if len(z) != len(y):
            raise ValueError("need one label per latent code")
        # row by row: BLAS picks different kernels for 1-row and n-row products,
        # and batched output must equal per-element evaluation bit for bit
        rows = [self.branches[int(yi)](self.shared(zi[None])) for zi, yi in zip(z, y)]
        if not rows:
            return z.new_zeros((0, self.branches[0][-1].out_features))
        return torch.cat(rows)


def _trunk(image_size: int, base: int, cap: int) -> tuple[nn.ModuleList, int]:
    num_pool = min(NUM_TRUNK_BLOCKS, max(int(math.log2(image_size)) - 2, 0))
    blocks = nn.ModuleList()
    ch = base
    for i in range(NUM_TRUNK_BLOCKS):
        out = min(ch * 2, cap)
        blocks.append(ResBlk(ch, out, downsample=i < num_pool))
        ch = out
    final = image_size // 2**num_pool
    return blocks, ch * final * final


class StyleEncoder(nn.Module):
    """Six shared residual blocks, then one linear head per domain on the flattened map."""

    def __init__(self, image_size: int = 256, style_dim: int = 64, num_domains: int = 2,
                 base_channels: int = 64, max_channels: int = 512):
        super().__init__()
        self.stem = nn.Conv2d(3, base_channels, 3, 1, 1)
        self.blocks, flat = _trunk(image_size, base_channels, max_channels)
        self.heads = nn.ModuleList(nn.Linear(flat, style_dim) for _ in range(num_domains))

    @property
    def num_domains(self) -> int:
        return len(self.heads)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        _check_labels(y, self.num_domains)
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h)
        h = F.leaky_relu(h, LRELU_SLOPE).flatten(1)
        out = torch.stack([head(h) for head in self.heads], dim=1)
        return out[torch.arange(len(y)), y]


class Discriminator(nn.Module):
    """Shared residual trunk with K real/fake heads, or (acgan) one head plus a K-way classifier."""

    def __init__(self, image_size: int = 256, num_domains: int = 2, base_channels: int = 64,
                 max_channels: int = 512, head: str = "multitask"):
        super().__init__()
        if head not in ("multitask", "acgan"):
            raise ValueError(f"unknown discriminator head {head!r}")
        self.head_type = head
        self.num_domains = num_domains
        self.stem = nn.Conv2d(3, base_channels, 3, 1, 1)
        self.blocks, flat = _trunk(image_size, base_channels, max_channels)
        n_heads = num_domains if head == "multitask" else 1
        self.heads = nn.ModuleList(nn.Linear(flat, 1) for _ in range(n_heads))
        self.classifier = nn.Linear(flat, num_domains) if head == "acgan" else None

    def features(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h)
        return F.leaky_relu(h, LRELU_SLOPE).flatten(1)

    def logits(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        """All real/fake logits ``(N, heads)`` and, in acgan mode, class logits ``(N, K)``."""
        h = self.features(x)
        adv = torch.cat([head(h) for head in self.heads], dim=1)
        cls = self.classifier(h) if self.classifier is not None else None
        return adv, cls

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        _check_labels(y, self.num_domains)
        adv, _ = self.logits(x)
        if self.head_type == "acgan":
            return adv[:, 0]
        return adv[torch.arange(len(y)), y]


def _check_labels(y: Tensor, k: int) -> None:
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= k):
        raise IndexError(f"domain label out of range [0, {k}): {y.tolist()}")


def initialize(net: nn.Module) -> nn.Module:
    """He-normal weights, zero biases, except AdaIN scale biases which start at one."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in net.modules():
        if isinstance(m, AdaIN):
            nn.init.ones_(m.scale.bias)
    return net


def build_networks(cfg: ExperimentConfig) -> dict[str, nn.Module]:
    ab = cfg.ablation
    nets = {
        "generator": Generator(cfg.image_size, cond_dim(cfg), cfg.base_channels, cfg.max_channels,
                               cfg.num_down_blocks, ab.conditioning),
        "mapping": MappingNetwork(cfg.latent_dim, cfg.style_dim, cfg.num_domains, cfg.hidden_dim),
        "encoder": StyleEncoder(cfg.image_size, code_dim(cfg), cfg.num_domains,
                                cfg.base_channels, cfg.max_channels),
        "discriminator": Discriminator(cfg.image_size, cfg.num_domains, cfg.base_channels,
                                       cfg.max_channels, ab.discriminator_head),
    }
    for net in nets.values():
        initialize(net)
    return nets
