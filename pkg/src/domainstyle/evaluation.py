"""Fréchet distance and perceptual-diversity protocols over all ordered domain pairs.

Both protocols translate each test image of a source domain into a target
domain with ``num_styles`` styles (latent codes or test-set references of the
target). FID compares the translated set with the target's training images;
the diversity score averages the perceptual distance over all output pairs
that share an input. Features come from a pluggable extractor.

Translation runs on float64 copies of the EMA networks so that batched and
one-at-a-time evaluation agree to rounding.
"""

from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig
from .data import DomainDataset, denormalize, load_image, load_uint8
from .training import ModelBundle, style_from_image, style_from_latent

NUM_STYLES = 10
_METRIC_KEYS = {"fid": 0, "lpips": 1}


class FeatureExtractor(Protocol):
    name: str

    def pooled(self, images: np.ndarray) -> np.ndarray:
        """uint8 ``(n, H, W, 3)`` -> float64 ``(n, d)``."""

    def layers(self, images: np.ndarray) -> list[np.ndarray]:
        """uint8 ``(n, H, W, 3)`` -> one float64 ``(n, C, h, w)`` array per layer."""


class RandomCNNExtractor:
    """Small fixed-seed random CNN; a deterministic stand-in for pretrained extractors."""

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32, 64)):
        self.name = f"random_cnn(seed={seed},channels={'-'.join(map(str, channels))})"
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1).double()
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64)
                                  * (2.0 / (c_in * 9)) ** 0.5)
                conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen, dtype=torch.float64))
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs).requires_grad_(False)

    def _run(self, images: np.ndarray) -> list[torch.Tensor]:
        x = torch.tensor(np.ascontiguousarray(images), dtype=torch.float64).permute(0, 3, 1, 2) / 127.5 - 1.0
        feats = []
        with torch.no_grad():
            for conv in self.convs:
                x = torch.relu(conv(x))
                feats.append(x)
        return feats

    def layers(self, images: np.ndarray) -> list[np.ndarray]:
        return [f.numpy() for f in self._run(images)]

    def pooled(self, images: np.ndarray) -> np.ndarray:
        return self._run(images)[-1].mean(dim=(2, 3)).numpy()


# -- Fréchet distance -----------------------------------------------------------

@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def compute_stats(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of ``(n, d)`` features."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    n = feats.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 feature vectors, got {n}")
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mean, (cov + cov.T) / 2, n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    # Tr((AB)^1/2) = Tr((A^1/2 B A^1/2)^1/2), the inner product being symmetric PSD
    ra = _psd_sqrt(a)
    m = ra @ b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    diff = a.mean - b.mean
    # both orders averaged so the result is symmetric bit for bit
    tr_sqrt = 0.5 * (_trace_sqrt_product(a.cov, b.cov) + _trace_sqrt_product(b.cov, a.cov))
    d = float(diff @ diff) + float(np.trace(a.cov)) + float(np.trace(b.cov)) - 2.0 * tr_sqrt
    return max(d, 0.0)


# -- perceptual distance ----------------------------------------------------------

def _unit(f: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    return f / (np.sqrt((f * f).sum(axis=-3, keepdims=True)) + eps)


def feature_distance(layers1: Sequence[np.ndarray], layers2: Sequence[np.ndarray]) -> float:
    """Per layer: channel-unit-normalize, mean |difference| over channels and positions; sum layers."""
    total = 0.0
    for f1, f2 in zip(layers1, layers2):
        total += float(np.abs(_unit(f1) - _unit(f2)).mean())
    return total


def perceptual_distance(img1: np.ndarray, img2: np.ndarray, extractor: FeatureExtractor) -> float:
    """Distance between two uint8 ``(H, W, 3)`` images."""
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    l1 = extractor.layers(img1[None])
    l2 = extractor.layers(img2[None])
    return feature_distance([f[0] for f in l1], [f[0] for f in l2])


# -- protocols ----------------------------------------------------------------------

def eval_networks(bundle: ModelBundle) -> dict[str, nn.Module]:
    return {name: copy.deepcopy(net).double().eval() for name, net in bundle.ema.items()}


def domain_pairs(k: int) -> list[tuple[int, int]]:
    return [(s, t) for s in range(k) for t in range(k) if s != t]


def pair_rng(seed: int, metric: str, pair_index: int) -> np.random.Generator:
    """Per-pair stream; independent of how pairs are scheduled."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_METRIC_KEYS[metric], pair_index)))


def _check_dataset(ds: DomainDataset) -> None:
    for name, paths in zip(ds.domains, ds.test_index):
        if not paths:
            raise ValueError(f"domain {name!r} has an empty test set")


@torch.no_grad()
def _translate_set(nets, cfg, ds, x, tgt, mode, rng, num_styles) -> np.ndarray:
    """``num_styles`` uint8 translations of one source image ``x`` (3, S, S) into ``tgt``."""
    y = torch.full((num_styles,), tgt, dtype=torch.long)
    if mode == "latent":
        z = torch.from_numpy(rng.standard_normal((num_styles, cfg.latent_dim)))
        s = style_from_latent(nets, z, y, cfg)
    elif mode == "reference":
        refs = ds.test_index[tgt]
        picks = rng.choice(len(refs), size=num_styles, replace=len(refs) < num_styles)
        x_ref = torch.stack([load_image(refs[i], ds.image_size) for i in picks]).double()
        s = style_from_image(nets, x_ref, y, cfg)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    xs = x.double().unsqueeze(0).expand(num_styles, -1, -1, -1)
    return denormalize(nets["generator"](xs, s))


def _train_stats(ds: DomainDataset, domain: int, extractor: FeatureExtractor) -> GaussianStats:
    images = np.stack([load_uint8(p, ds.image_size) for p in ds.train_index[domain]])
    return compute_stats(extractor.pooled(images))


def _pair_key(ds: DomainDataset, s: int, t: int) -> str:
    return f"{ds.domains[s]}→{ds.domains[t]}"


def fid_protocol(
    bundle: ModelBundle,
    cfg: ExperimentConfig,
    ds: DomainDataset,
    mode: str,
    extractor: FeatureExtractor,
    seed: int = 0,
    num_styles: int = NUM_STYLES,
) -> dict:
    _check_dataset(ds)
    nets = eval_networks(bundle)
    per_pair, counts = {}, {}
    train_stats = {}
    for index, (src, tgt) in enumerate(domain_pairs(ds.num_domains)):
        rng = pair_rng(seed, "fid", index)
        feats = []
        for path in ds.test_index[src]:
            out = _translate_set(nets, cfg, ds, load_image(path, ds.image_size), tgt, mode, rng, num_styles)
            feats.append(extractor.pooled(out))
        feats = np.concatenate(feats)
        if tgt not in train_stats:
            train_stats[tgt] = _train_stats(ds, tgt, extractor)
        key = _pair_key(ds, src, tgt)
        per_pair[key] = frechet_distance(compute_stats(feats), train_stats[tgt])
        counts[key] = len(feats)
    return _result("fid", mode, per_pair, seed, extractor, {"translations": counts})


def lpips_protocol(
    bundle: ModelBundle,
    cfg: ExperimentConfig,
    ds: DomainDataset,
    mode: str,
    extractor: FeatureExtractor,
    seed: int = 0,
    num_styles: int = NUM_STYLES,
) -> dict:
    _check_dataset(ds)
    nets = eval_networks(bundle)
    per_pair, counts = {}, {}
    n_pairs = num_styles * (num_styles - 1) // 2
    for index, (src, tgt) in enumerate(domain_pairs(ds.num_domains)):
        rng = pair_rng(seed, "lpips", index)
        per_input = []
        for path in ds.test_index[src]:
            out = _translate_set(nets, cfg, ds, load_image(path, ds.image_size), tgt, mode, rng, num_styles)
            layers = extractor.layers(out)
            dists = [
                feature_distance([f[i] for f in layers], [f[j] for f in layers])
                for i, j in itertools.combinations(range(num_styles), 2)
            ]
            per_input.append(float(np.mean(dists)))
        key = _pair_key(ds, src, tgt)
        per_pair[key] = float(np.mean(per_input))
        counts[key] = len(per_input)
    debug = {"pairs_per_input": n_pairs, "inputs": counts}
    return _result("lpips", mode, per_pair, seed, extractor, debug)


def _result(metric, mode, per_pair, seed, extractor, debug) -> dict:
    return {
        "metric": metric,
        "mode": mode,
        "per_pair": per_pair,
        "mean": float(np.mean(list(per_pair.values()))),
        "seed": seed,
        "extractor_name": extractor.name,
        "debug": debug,
    }


def write_metrics(result: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


@torch.no_grad()
def latent_diversity(bundle: ModelBundle, cfg: ExperimentConfig, ds: DomainDataset,
                     num_pairs: int = 20, seed: int = 0) -> float:
    """Mean diversity term over ``num_pairs`` latent pairs, on EMA networks and test images."""
    from .losses import diversity_loss

    rng = np.random.default_rng(seed)
    xs = torch.stack([load_image(p, ds.image_size) for paths in ds.test_index for p in paths])
    nets = bundle.ema
    values = []
    for _ in range(num_pairs):
        y = torch.from_numpy(rng.integers(0, cfg.num_domains, size=len(xs)))
        z1 = torch.from_numpy(rng.standard_normal((len(xs), cfg.latent_dim))).float()
        z2 = torch.from_numpy(rng.standard_normal((len(xs), cfg.latent_dim))).float()
        out1 = nets["generator"](xs, style_from_latent(nets, z1, y, cfg))
        out2 = nets["generator"](xs, style_from_latent(nets, z2, y, cfg))
        values.append(float(diversity_loss(out1, out2)))
    return float(np.mean(values))
