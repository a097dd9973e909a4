"""Inference with the EMA networks: latent/reference translation, interpolation, grids."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .config import ExperimentConfig
from .data import DomainDataset, denormalize, load_image, save_png
from .training import ModelBundle, style_from_image, style_from_latent

GRID_FILL = 128


def _targets(y_target, n: int, cfg: ExperimentConfig) -> Tensor:
    y = torch.as_tensor(y_target, dtype=torch.long).reshape(-1)
    if y.numel() == 1:
        y = y.expand(n)
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= cfg.num_domains):
        raise IndexError(f"target domain out of range [0, {cfg.num_domains}): {y.tolist()}")
    return y


@torch.no_grad()
def latent_style(bundle: ModelBundle, cfg: ExperimentConfig, z: Tensor, y_target) -> Tensor:
    return style_from_latent(bundle.ema, z, _targets(y_target, len(z), cfg), cfg)


@torch.no_grad()
def reference_style(bundle: ModelBundle, cfg: ExperimentConfig, x_ref: Tensor, y_target) -> Tensor:
    return style_from_image(bundle.ema, x_ref, _targets(y_target, len(x_ref), cfg), cfg)


@torch.no_grad()
def generate(bundle: ModelBundle, x: Tensor, s: Tensor) -> Tensor:
    return bundle.ema["generator"](x, s)


@torch.no_grad()
def translate_latent(bundle: ModelBundle, cfg: ExperimentConfig, x: Tensor, y_target, z: Tensor,
                     as_uint8: bool = False):
    """``G_ema(x, F_ema(z, y_target))``; one latent row per image."""
    out = generate(bundle, x, latent_style(bundle, cfg, z, y_target))
    return denormalize(out) if as_uint8 else out


@torch.no_grad()
def translate_reference(bundle: ModelBundle, cfg: ExperimentConfig, x: Tensor, x_ref: Tensor, y_target,
                        as_uint8: bool = False):
    """``G_ema(x, E_ema(x_ref, y_target))``; a single reference is shared by every ``x``."""
    s = reference_style(bundle, cfg, x_ref, y_target)
    if len(s) == 1 and len(x) > 1:
        s = s.expand(len(x), -1)
    out = generate(bundle, x, s)
    return denormalize(out) if as_uint8 else out


@torch.no_grad()
def interpolate_styles(bundle: ModelBundle, x: Tensor, s_a: Tensor, s_b: Tensor, steps: int) -> list[Tensor]:
    """Frames ``G_ema(x, (1-t) s_a + t s_b)`` for ``steps`` evenly spaced ``t`` in [0, 1]."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if s_a.shape != s_b.shape:
        raise ValueError(f"style shapes differ: {tuple(s_a.shape)} vs {tuple(s_b.shape)}")
    frames = []
    for i in range(steps):
        t = i / (steps - 1)
        # exact endpoints match direct translation bit for bit; the lerp form keeps s_a == s_b exact
        s = s_a if i == 0 else s_b if i == steps - 1 else s_a + t * (s_b - s_a)
        frames.append(generate(bundle, x, s))
    return frames


def sample_sources(ds: DomainDataset, per_domain: int = 1, split: str = "test") -> list[tuple[Tensor, int]]:
    index = ds.test_index if split == "test" else ds.train_index
    out = []
    for label, paths in enumerate(index):
        for p in paths[:per_domain]:
            out.append((load_image(p, ds.image_size), label))
    return out


@torch.no_grad()
def render_grid(
    bundle: ModelBundle,
    cfg: ExperimentConfig,
    sources: Sequence[Tensor | tuple[Tensor, int]],
    styles: Sequence[tuple[Tensor, int]],
    layout: str = "reference",
) -> np.ndarray:
    """Translate every source with every style into a ``(rows+1) x (cols+1)`` cell grid.

    ``styles`` holds ``(latent_or_reference, target_domain)`` pairs: a latent
    row ``(1, latent_dim)`` under ``layout="latent"``, a reference image
    ``(3, S, S)`` under ``layout="reference"``. Sources run down the first
    column, references (or gray cells for latents) along the first row, and the
    corner is gray. Returns a uint8 ``(H, W, 3)`` image.
    """
    if not sources:
        raise ValueError("render_grid needs at least one source image")
    if not styles:
        raise ValueError("render_grid needs at least one style")
    if layout not in ("reference", "latent"):
        raise ValueError(f"unknown layout {layout!r}")
    xs = torch.stack([s[0] if isinstance(s, tuple) else s for s in sources])
    size = xs.shape[-1]
    rows, cols = len(xs), len(styles)
    grid = np.full(((rows + 1) * size, (cols + 1) * size, 3), GRID_FILL, dtype=np.uint8)
    grid[size:, :size] = denormalize(xs).reshape(rows * size, size, 3)
    for j, (code, y) in enumerate(styles):
        c0 = (j + 1) * size
        if layout == "reference":
            ref = code if code.dim() == 4 else code.unsqueeze(0)
            grid[:size, c0:c0 + size] = denormalize(ref[0])
            out = translate_reference(bundle, cfg, xs, ref, y)
        else:
            z = code.reshape(1, -1).expand(rows, -1)
            out = translate_latent(bundle, cfg, xs, y, z)
        grid[size:, c0:c0 + size] = denormalize(out).reshape(rows * size, size, 3)
    return grid


def save_grid(grid: np.ndarray, path: str | Path, cells: list[dict] | None = None) -> Path:
    """Write the grid PNG and, when ``cells`` is given, a side-car ``.json`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_png(grid, path)
    if cells is not None:
        path.with_suffix(".json").write_text(json.dumps({"cells": cells}, indent=2, sort_keys=True))
    return path
