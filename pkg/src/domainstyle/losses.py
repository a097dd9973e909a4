"""Training objectives and their assembly into the generator/discriminator totals.

Reduction conventions: code-vector losses (style, latent) take the L1 norm per
row and average over the batch; image losses (diversity, cycle) average over
every element so their scale does not depend on resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import ExperimentConfig


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


def adv_loss_d(real_logit: Tensor, fake_logit: Tensor) -> Tensor:
    """Non-saturating discriminator loss.

    Callers score a detached generator output, so the fake term trains D only.
    """
    return (F.softplus(-real_logit) + F.softplus(fake_logit)).mean()


def adv_loss_g(fake_logit: Tensor) -> Tensor:
    return F.softplus(-fake_logit).mean()


def r1_from_output(out: Tensor, x: Tensor, gamma: float) -> Tensor:
    """R1 term from logits ``out`` already computed on ``x`` (which requires grad)."""
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return out.sum() * 0.0
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


def r1_penalty(d: Callable[[Tensor, Tensor], Tensor], x_real: Tensor, y: Tensor, gamma: float) -> Tensor:
    """``gamma/2 * E ||grad_x D_y(x)||^2`` on real samples.

    A batch that does not track gradients is detached and marked here. The
    graph is kept so the penalty itself can be backpropagated.
    """
    x = x_real if x_real.requires_grad else x_real.detach().requires_grad_(True)
    return r1_from_output(d(x, y), x, gamma)


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def style_recon_loss(s_target: Tensor, s_recon: Tensor) -> Tensor:
    _same_shape(s_target, s_recon)
    return (s_target - s_recon).abs().flatten(1).sum(1).mean()


def latent_recon_loss(z: Tensor, z_recon: Tensor) -> Tensor:
    _same_shape(z, z_recon)
    return (z - z_recon).abs().flatten(1).sum(1).mean()


def diversity_loss(img1: Tensor, img2: Tensor) -> Tensor:
    # enters the generator objective with a minus sign; no denominator
    _same_shape(img1, img2)
    return (img1 - img2).abs().mean()


def cycle_loss(x: Tensor, x_reconstructed: Tensor) -> Tensor:
    _same_shape(x, x_reconstructed)
    return (x - x_reconstructed).abs().mean()


def classification_loss(class_logits: Tensor, labels: Tensor) -> Tensor:
    return F.cross_entropy(class_logits, labels)


def lambda_ds_at(it: int, cfg: ExperimentConfig) -> float:
    """Diversity weight linearly decayed from ``cfg.lambda_ds`` to 0 at ``ds_decay_iters``."""
    if it < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lambda_ds * max(0.0, 1.0 - it / cfg.ds_decay_iters)


@dataclass
class LossReport:
    adv_d: float = 0.0
    adv_g: float = 0.0
    r1: float = 0.0
    sty: float = 0.0
    ds: float = 0.0
    cyc: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0
    lambda_ds: float = 0.0
    d_real: float = 0.0  # mean sigmoid of the real logits, a discriminator-accuracy proxy
    extras: dict = field(default_factory=dict)

    SCALARS = ("adv_d", "adv_g", "r1", "sty", "ds", "cyc", "total_g", "total_d", "lambda_ds", "d_real")

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SCALARS}

    def to_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_row().values())


def _value(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def check_finite(parts: Mapping[str, object]) -> None:
    for name, part in parts.items():
        v = _value(part)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)


def assemble_generator_objective(
    parts: Mapping[str, object], cfg: ExperimentConfig, it: int
) -> tuple[object, LossReport]:
    """Combine ``adv``, ``sty``, ``ds``, ``cyc`` (and ``latent``) into the G total.

    Returns ``(total, report)``: ``total`` keeps the autograd graph when the
    parts are tensors; ``report.total_g`` is recomputed from the report's own
    float entries. In ``recon_mode="latent"`` the ``latent`` part fills the
    ``sty`` slot; in ``"none"`` that slot is zero. The diversity term is gated
    by ``ablation.use_ds``.
    """
    check_finite(parts)
    ab = cfg.ablation
    lam_ds = lambda_ds_at(it, cfg) if ab.use_ds else 0.0
    if ab.recon_mode == "latent":
        recon = parts.get("latent", 0.0)
    elif ab.recon_mode == "none":
        recon = 0.0
    else:
        recon = parts.get("sty", 0.0)
    adv = parts.get("adv", 0.0)
    ds = parts.get("ds", 0.0) if ab.use_ds else 0.0
    cyc = parts.get("cyc", 0.0)

    total = adv + cfg.lambda_sty * recon - lam_ds * ds + cfg.lambda_cyc * cyc
    report = LossReport(adv_g=_value(adv), sty=_value(recon), ds=_value(ds), cyc=_value(cyc), lambda_ds=lam_ds)
    report.total_g = report.adv_g + cfg.lambda_sty * report.sty - report.lambda_ds * report.ds \
        + cfg.lambda_cyc * report.cyc
    return total, report


def assemble_discriminator_objective(parts: Mapping[str, object]) -> tuple[object, float, float]:
    """D total = adversarial (+ classification) + R1. Returns ``(total, adv_d, r1)``."""
    check_finite(parts)
    adv = parts.get("adv", 0.0)
    r1 = parts.get("r1", 0.0)
    return adv + r1, _value(adv), _value(r1)
