"""Folder-per-domain datasets, seeded batch sampling and pixel conversion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DomainDataset:
    root: Path
    domains: tuple[str, ...]
    train_index: tuple[tuple[Path, ...], ...]
    test_index: tuple[tuple[Path, ...], ...]
    image_size: int = 256

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def train_pairs(self) -> list[tuple[int, Path]]:
        return [(label, p) for label, paths in enumerate(self.train_index) for p in paths]


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # (n, 3, H, W) in [-1, 1]
    labels: torch.Tensor  # (n,) int64
    paths: tuple[Path, ...] = ()
    flips: tuple[bool, ...] = ()

    def __len__(self) -> int:
        return self.pixels.shape[0]


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:  # PIL raises a zoo of exception types
        return False


def scan_dataset(root: str | Path, test_fraction: float = 0.1, image_size: int = 256) -> DomainDataset:
    """Index ``root/<domain>/*.{png,jpg}``.

    Domains are labelled in sorted folder-name order. Per domain, the last
    ``ceil(test_fraction * N)`` files in sorted order are held out as test.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"path not found: {root}")
    if not 0 <= test_fraction < 1:
        raise DatasetError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    domains = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if len(domains) < 2:
        raise DatasetError(f"fewer than 2 domains under {root} (found {len(domains)})")

    train, test = [], []
    for name in domains:
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        good = []
        for p in files:
            if _decodable(p):
                good.append(p)
            else:
                log.warning("skipping undecodable image %s", p)
        if not good:
            raise DatasetError(f"domain {name!r} has no decodable images")
        n_test = math.ceil(test_fraction * len(good))
        n_test = min(n_test, len(good) - 1)
        split = len(good) - n_test
        train.append(tuple(good[:split]))
        test.append(tuple(good[split:]))
    return DomainDataset(root, tuple(domains), tuple(train), tuple(test), image_size)


@lru_cache(maxsize=4096)
def _load_resized(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8).copy()
    arr.setflags(write=False)
    return arr


def load_uint8(path: str | Path, size: int) -> np.ndarray:
    """Decoded, resized, read-only ``(size, size, 3)`` uint8 image (cached)."""
    return _load_resized(Path(path), size)


def to_pixels(images: np.ndarray) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> float32 (..., 3, H, W) in [-1, 1]."""
    arr = torch.tensor(np.ascontiguousarray(images), dtype=torch.float32)
    return (arr / 127.5 - 1.0).movedim(-1, -3).contiguous()


def load_image(path: str | Path, size: int, flip: bool = False) -> torch.Tensor:
    arr = _load_resized(Path(path), size)
    if flip:
        arr = arr[:, ::-1]
    return to_pixels(arr)


def _make_batch(items, size: int, flip_rng: np.random.Generator) -> ImageBatch:
    flips = flip_rng.random(len(items)) < 0.5
    pixels = torch.stack([load_image(p, size, bool(f)) for (_, p), f in zip(items, flips)])
    labels = torch.tensor([label for label, _ in items], dtype=torch.long)
    return ImageBatch(pixels, labels, tuple(p for _, p in items), tuple(bool(f) for f in flips))


def sample_train_batch(
    ds: DomainDataset, n: int, rng: np.random.Generator, flip_rng: np.random.Generator | None = None
) -> ImageBatch:
    """Draw ``n`` (domain, image) pairs uniformly with replacement, flip at p=0.5.

    Flips come from ``flip_rng`` when given, otherwise from ``rng``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pairs = ds.train_pairs()
    picks = rng.integers(0, len(pairs), size=n)
    return _make_batch([pairs[i] for i in picks], ds.image_size, flip_rng or rng)


def sample_reference_pair(
    ds: DomainDataset, n: int, rng: np.random.Generator
) -> tuple[ImageBatch, ImageBatch, torch.Tensor]:
    for name, paths in zip(ds.domains, ds.train_index):
        if len(paths) < 2:
            raise DatasetError(f"domain {name!r} needs at least 2 train images for reference pairs")
    targets = rng.integers(0, ds.num_domains, size=n)
    first, second = [], []
    for y in targets:
        paths = ds.train_index[y]
        i, j = rng.choice(len(paths), size=2, replace=False)
        first.append((int(y), paths[i]))
        second.append((int(y), paths[j]))
    ref1 = _make_batch(first, ds.image_size, rng)
    ref2 = _make_batch(second, ds.image_size, rng)
    return ref1, ref2, torch.as_tensor(targets, dtype=torch.long)


def sample_latents(n: int, latent_dim: int, rng: np.random.Generator) -> torch.Tensor:
    """``(n, latent_dim)`` standard-normal codes; one row per latent code."""
    return torch.from_numpy(rng.standard_normal((n, latent_dim))).float()


def sample_targets(n: int, num_domains: int, rng: np.random.Generator) -> torch.Tensor:
    return torch.from_numpy(rng.integers(0, num_domains, size=n)).long()


def denormalize(pixels: torch.Tensor | np.ndarray) -> np.ndarray:
    """[-1, 1] pixels (channel-first) -> uint8 images (channel-last), rounding half up."""
    arr = pixels.detach().cpu().double().numpy() if torch.is_tensor(pixels) else np.asarray(pixels, float)
    arr = np.clip(arr, -1.0, 1.0)
    arr = np.floor((arr + 1.0) * 127.5 + 0.5).astype(np.uint8)
    if arr.ndim >= 3 and arr.shape[-3] == 3:
        arr = np.moveaxis(arr, -3, -1)
    return np.ascontiguousarray(arr)


def save_png(image: np.ndarray, path: str | Path) -> None:
    # fixed PNG encoder settings keep repeated runs byte-identical
    Image.fromarray(image, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def make_shapes_dataset(
    root: str | Path,
    num_domains: int = 3,
    per_domain: int = 24,
    size: int = 32,
    seed: int = 0,
) -> Path:
    """Write a synthetic colored-shape dataset: one shape/hue family per domain.

    Shapes vary in position, scale and shade; backgrounds vary in gray level.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    palette = [(220, 40, 40), (40, 200, 60), (50, 80, 230), (230, 200, 30), (200, 50, 210)]
    kinds = ["ellipse", "rectangle", "triangle", "ellipse", "rectangle"]
    for d in range(num_domains):
        folder = root / f"domain{d}"
        folder.mkdir(parents=True, exist_ok=True)
        base = np.array(palette[d % len(palette)])
        for i in range(per_domain):
            bg = int(rng.integers(0, 90))
            im = Image.new("RGB", (size, size), (bg, bg, bg))
            draw = ImageDraw.Draw(im)
            r = rng.uniform(0.2, 0.4) * size
            cx, cy = rng.uniform(r, size - r, size=2)
            shade = np.clip(base * rng.uniform(0.6, 1.15) + rng.integers(-30, 30, 3), 0, 255)
            color = tuple(int(c) for c in shade)
            box = [cx - r, cy - r, cx + r, cy + r]
            kind = kinds[d % len(kinds)]
            if kind == "ellipse":
                draw.ellipse(box, fill=color)
            elif kind == "rectangle":
                draw.rectangle(box, fill=color)
            else:
                draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
            im.save(folder / f"{i:04d}.png")
    return root
