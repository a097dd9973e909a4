"""Optimization loop: latent- and reference-guided updates, EMA, logging."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import losses
from .config import ExperimentConfig, check_config
from .data import (
    DomainDataset,
    ImageBatch,
    sample_latents,
    sample_reference_pair,
    sample_targets,
    sample_train_batch,
)
from .losses import LossReport
from .networks import build_networks

log = logging.getLogger(__name__)

NET_NAMES = ("generator", "mapping", "encoder", "discriminator")
EMA_NAMES = ("generator", "mapping", "encoder")
STREAM_NAMES = ("data", "flips", "latents", "targets", "references")
LOG_FIELDS = ("iter", "mode", *LossReport.SCALARS)


class ModelBundle:
    """Live networks, their EMA shadows (no discriminator shadow) and the iteration count."""

    def __init__(self, nets: dict[str, nn.Module], ema: dict[str, nn.Module] | None = None, iteration: int = 0):
        self.nets = nets
        if ema is None:
            ema = {name: copy.deepcopy(nets[name]) for name in EMA_NAMES}
        for net in ema.values():
            net.requires_grad_(False)
        self.ema = ema
        self.iteration = iteration

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "ModelBundle":
        torch.manual_seed(cfg.seed)
        return cls(build_networks(cfg))

    @property
    def G(self) -> nn.Module:
        return self.nets["generator"]

    @property
    def F(self) -> nn.Module:
        return self.nets["mapping"]

    @property
    def E(self) -> nn.Module:
        return self.nets["encoder"]

    @property
    def D(self) -> nn.Module:
        return self.nets["discriminator"]


def build_optimizers(bundle: ModelBundle, cfg: ExperimentConfig) -> dict[str, torch.optim.Adam]:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return {
        name: torch.optim.Adam(bundle.nets[name].parameters(),
                               lr=cfg.lr_f if name == "mapping" else cfg.lr_gde, betas=betas)
        for name in NET_NAMES
    }


class RngStreams:
    """Independent named generators fanned out from one root seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.streams = {
            name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            for i, name in enumerate(STREAM_NAMES)
        }

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.streams[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self.streams.items()}

    def set_state(self, state: dict) -> None:
        for name, st in state.items():
            self.streams[name].bit_generator.state = st


# -- style sources -------------------------------------------------------------

def _one_hot(y: Tensor, cfg: ExperimentConfig, like: Tensor) -> Tensor:
    return F.one_hot(y, cfg.num_domains).to(like.dtype)


def style_from_latent(nets, z: Tensor, y: Tensor, cfg: ExperimentConfig) -> Tensor:
    """Conditioning vector for latent-guided synthesis under the configured recon mode."""
    mode = cfg.ablation.recon_mode
    if mode == "style":
        return nets["mapping"](z, y)
    if mode == "latent":
        return torch.cat([z, _one_hot(y, cfg, z)], dim=1)
    return _one_hot(y, cfg, z)


def style_from_image(nets, x: Tensor, y: Tensor, cfg: ExperimentConfig) -> Tensor:
    """Conditioning vector extracted from images ``x`` of domains ``y``."""
    mode = cfg.ablation.recon_mode
    if mode == "style":
        return nets["encoder"](x, y)
    if mode == "latent":
        return torch.cat([nets["encoder"](x, y), _one_hot(y, cfg, x)], dim=1)
    return _one_hot(y, cfg, x)


def _code_part(cond: Tensor, cfg: ExperimentConfig) -> Tensor:
    # the learnable code inside a conditioning vector (latent mode appends a one-hot)
    if cfg.ablation.recon_mode == "latent":
        return cond[:, : cfg.latent_dim]
    return cond


# -- one update -----------------------------------------------------------------

def _discriminator_update(bundle, optims, x, y, fake, y_target, cfg) -> tuple[float, float, float]:
    D = bundle.D
    x_req = x.detach().requires_grad_(True)
    adv_real, cls_real = D.logits(x_req)
    real_logit = adv_real[:, 0] if D.head_type == "acgan" else adv_real[torch.arange(len(y)), y]
    r1 = losses.r1_from_output(real_logit, x_req, cfg.r1_gamma) if cfg.r1_gamma > 0 else real_logit.sum() * 0
    fake_logit = D(fake.detach(), y_target)
    adv = losses.adv_loss_d(real_logit, fake_logit)
    if cls_real is not None:
        adv = adv + losses.classification_loss(cls_real, y)
    total, adv_v, r1_v = losses.assemble_discriminator_objective({"adv": adv, "r1": r1})
    optims["discriminator"].zero_grad(set_to_none=True)
    total.backward()
    optims["discriminator"].step()
    return adv_v, r1_v, float(torch.sigmoid(real_logit.detach()).mean())


def _generator_update(bundle, optims, x, y, y_target, cond1, cond2_fn, target_code, cfg) -> LossReport:
    nets = bundle.nets
    G, D = bundle.G, bundle.D
    D.requires_grad_(False)
    try:
        fake = G(x, cond1)
        adv_all, cls_fake = D.logits(fake)
        fake_logit = adv_all[:, 0] if D.head_type == "acgan" else adv_all[torch.arange(len(y)), y_target]
        adv = losses.adv_loss_g(fake_logit)
        if cls_fake is not None:
            adv = adv + losses.classification_loss(cls_fake, y_target)
        parts = {"adv": adv}

        mode = cfg.ablation.recon_mode
        if mode != "none":
            recon = nets["encoder"](fake, y_target)
            key = "latent" if mode == "latent" else "sty"
            loss_fn = losses.latent_recon_loss if mode == "latent" else losses.style_recon_loss
            parts[key] = loss_fn(target_code, recon)
        if cfg.ablation.use_ds:
            fake2 = G(x, cond2_fn())
            parts["ds"] = losses.diversity_loss(fake, fake2)
        s_hat = style_from_image(nets, x, y, cfg)
        parts["cyc"] = losses.cycle_loss(x, G(fake, s_hat))

        total, report = losses.assemble_generator_objective(parts, cfg, bundle.iteration)
        for name in EMA_NAMES:
            optims[name].zero_grad(set_to_none=True)
        total.backward()
        for name in EMA_NAMES:
            optims[name].step()
    finally:
        D.requires_grad_(True)
    return report


def train_step_latent(bundle, optims, batch: ImageBatch, z1: Tensor, z2: Tensor, y_target: Tensor,
                      cfg: ExperimentConfig) -> LossReport:
    """Discriminator update then G/F/E update with styles mapped from ``z1``/``z2``."""
    x, y = batch.pixels, batch.labels
    with torch.no_grad():
        fake = bundle.G(x, style_from_latent(bundle.nets, z1, y_target, cfg))
    adv_d, r1, d_real = _discriminator_update(bundle, optims, x, y, fake, y_target, cfg)

    cond1 = style_from_latent(bundle.nets, z1, y_target, cfg)
    report = _generator_update(
        bundle, optims, x, y, y_target, cond1,
        lambda: style_from_latent(bundle.nets, z2, y_target, cfg),
        _code_part(cond1, cfg),
        cfg,
    )
    return _finish(report, adv_d, r1, d_real)


def train_step_reference(bundle, optims, batch: ImageBatch, ref1: Tensor, ref2: Tensor, y_target: Tensor,
                         cfg: ExperimentConfig) -> LossReport:
    """As :func:`train_step_latent`, with styles encoded from reference images."""
    x, y = batch.pixels, batch.labels
    with torch.no_grad():
        fake = bundle.G(x, style_from_image(bundle.nets, ref1, y_target, cfg))
    adv_d, r1, d_real = _discriminator_update(bundle, optims, x, y, fake, y_target, cfg)

    cond1 = style_from_image(bundle.nets, ref1, y_target, cfg)
    report = _generator_update(
        bundle, optims, x, y, y_target, cond1,
        lambda: style_from_image(bundle.nets, ref2, y_target, cfg),
        _code_part(cond1, cfg),
        cfg,
    )
    return _finish(report, adv_d, r1, d_real)


def _finish(report: LossReport, adv_d: float, r1: float, d_real: float) -> LossReport:
    report.adv_d, report.r1, report.d_real = adv_d, r1, d_real
    report.total_d = adv_d + r1
    if not report.is_finite():
        bad = next(k for k, v in report.as_row().items() if not np.isfinite(v))
        raise losses.NonFiniteLossError(bad, report.as_row()[bad])
    return report


@torch.no_grad()
def update_ema(bundle: ModelBundle, decay: float) -> ModelBundle:
    """``shadow <- decay * shadow + (1 - decay) * live`` for G, F and E."""
    for name in EMA_NAMES:
        live = dict(bundle.nets[name].named_parameters())
        for pname, shadow in bundle.ema[name].named_parameters():
            shadow.mul_(decay).add_(live[pname], alpha=1.0 - decay)
        live_buf = dict(bundle.nets[name].named_buffers())
        for bname, buf in bundle.ema[name].named_buffers():
            buf.copy_(live_buf[bname])
    return bundle


# -- the loop ------------------------------------------------------------------

@dataclass
class StepRecord:
    iteration: int
    mode: str
    report: LossReport

    def row(self) -> dict:
        return {"iter": self.iteration, "mode": self.mode, **self.report.as_row()}


@dataclass
class Trainer:
    cfg: ExperimentConfig
    bundle: ModelBundle
    optims: dict
    rng: RngStreams
    history: list[StepRecord] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: ExperimentConfig) -> "Trainer":
        check_config(cfg)
        bundle = ModelBundle.build(cfg)
        return cls(cfg, bundle, build_optimizers(bundle, cfg), RngStreams(cfg.seed))

    def run_iteration(self, ds: DomainDataset) -> tuple[LossReport, LossReport | None]:
        cfg, rng, n = self.cfg, self.rng, self.cfg.batch_size
        it = self.bundle.iteration

        batch = sample_train_batch(ds, n, rng["data"], rng["flips"])
        y_trg = sample_targets(n, cfg.num_domains, rng["targets"])
        z1 = sample_latents(n, cfg.latent_dim, rng["latents"])
        z2 = sample_latents(n, cfg.latent_dim, rng["latents"])
        rep_lat = train_step_latent(self.bundle, self.optims, batch, z1, z2, y_trg, cfg)
        self.history.append(StepRecord(it, "latent", rep_lat))

        rep_ref = None
        if cfg.ablation.recon_mode != "none":
            batch = sample_train_batch(ds, n, rng["data"], rng["flips"])
            ref1, ref2, y_ref = sample_reference_pair(ds, n, rng["references"])
            rep_ref = train_step_reference(self.bundle, self.optims, batch, ref1.pixels, ref2.pixels, y_ref, cfg)
            self.history.append(StepRecord(it, "reference", rep_ref))

        update_ema(self.bundle, cfg.ema_decay)
        self.bundle.iteration += 1
        return rep_lat, rep_ref

    def fit(
        self,
        ds: DomainDataset,
        out_dir: str | Path | None = None,
        until: int | None = None,
        on_iteration: Callable[["Trainer"], None] | None = None,
        domains: tuple[str, ...] | None = None,
    ) -> ModelBundle:
        """Train up to iteration ``until`` (default ``total_iters``).

        With ``out_dir`` set, losses go to ``losses.csv`` and sample grids plus
        ``latest.npz`` checkpoints are written every ``cfg.sample_every``
        iterations and on a clean stop.
        """
        from .checkpoint import save_checkpoint

        until = self.cfg.total_iters if until is None else until
        writer = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            (out_dir / "samples").mkdir(parents=True, exist_ok=True)
            log_path = out_dir / "losses.csv"
            fresh = not log_path.exists() or self.bundle.iteration == 0
            log_file = open(log_path, "w" if fresh else "a", newline="")
            writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
            if fresh:
                writer.writeheader()
        try:
            while self.bundle.iteration < until:
                start = len(self.history)
                self.run_iteration(ds)
                if writer is not None:
                    writer.writerows(rec.row() for rec in self.history[start:])
                done = self.bundle.iteration
                if out_dir is not None and (done % self.cfg.sample_every == 0 or done == until):
                    log_file.flush()
                    self.write_samples(ds, out_dir / "samples" / f"iter_{done:06d}.png")
                    save_checkpoint(out_dir / "latest.npz", self, domains or ds.domains)
                    log.info("iteration %d: %s", done, self.history[-1].report.as_row())
                if on_iteration is not None:
                    on_iteration(self)
        finally:
            if writer is not None:
                log_file.close()
        return self.bundle

    def write_samples(self, ds: DomainDataset, path: Path) -> None:
        from .synthesis import render_grid, sample_sources, save_grid

        sources = sample_sources(ds, per_domain=1)
        # dedicated generator: sample grids never perturb the training streams
        z = sample_latents(self.cfg.num_domains, self.cfg.latent_dim, np.random.default_rng(self.cfg.seed))
        styles = [(z[i : i + 1], i) for i in range(self.cfg.num_domains)]
        grid = render_grid(self.bundle, self.cfg, sources, styles, layout="latent")
        save_grid(grid, path)


def fit(bundle: ModelBundle, ds: DomainDataset, cfg: ExperimentConfig, out_dir=None) -> ModelBundle:
    trainer = Trainer(cfg, bundle, build_optimizers(bundle, cfg), RngStreams(cfg.seed))
    return trainer.fit(ds, out_dir)
