"""Objective terms for the critic and the encoder-decoder generator.

All functions are pure: they take network outputs (or a critic callable for
the gradient penalty) and return scalar tensors. Reductions are means over
batch and elements, except the attribute terms which sum binary
cross-entropies over attributes before averaging over the batch.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .domain import LossWeights


class NonFiniteLossError(FloatingPointError):
    """A loss or gradient evaluated to NaN or infinity."""

    def __init__(self, component: str, report=None):
        super().__init__(f"non-finite value in {component}")
        self.component = component
        self.report = report


def _check_finite(value: torch.Tensor, component: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(component)
    return value


def interpolation_weights(batch: int, seed: int | np.random.Generator | None = None,
                          dtype=torch.float32) -> torch.Tensor:
    """One uniform mixing weight per sample, shaped (B, 1, 1, 1)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return torch.as_tensor(rng.random(batch), dtype=dtype).view(batch, 1, 1, 1)


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
                     fake: torch.Tensor, seed=None, epsilon: torch.Tensor | None = None,
                     create_graph: bool = True) -> torch.Tensor:
    """Mean over the batch of (||grad critic(mix)||_2 - 1)^2.

    ``critic`` maps a batch to its realism scores (any shape with leading
    batch dim, or a tuple whose first element is that). ``real`` and
    ``fake`` are already joined (image and side concatenated in paired mode).
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    if epsilon is None:
        epsilon = interpolation_weights(real.shape[0], seed, dtype=real.dtype)
    epsilon = epsilon.to(real.dtype).view(-1, *([1] * (real.dim() - 1)))
    # enable_grad: the penalty is defined through an input gradient, so it must
    # be computed even when the caller is evaluating under no_grad
    with torch.enable_grad():
        mixed = (epsilon * real.detach() + (1 - epsilon) * fake.detach()).requires_grad_(True)
        out = critic(mixed)
        if isinstance(out, tuple):
            out = out[0]
        grad = None
        if out.requires_grad:
            grad, = torch.autograd.grad(out.sum(), mixed, create_graph=create_graph,
                                        allow_unused=True)
    if grad is None:  # critic ignores its input
        grad = torch.zeros_like(mixed)
    _check_finite(grad, "gradient_penalty gradient")
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def critic_loss(d_real_src, d_fake_src, gp, weights: LossWeights) -> torch.Tensor:
    return d_fake_src.mean() - d_real_src.mean() + weights.lambda_gp * gp


def generator_adversarial_loss(d_fake_src) -> torch.Tensor:
    return -d_fake_src.mean()


def attribute_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Sum of per-attribute binary cross-entropies, averaged over the batch."""
    if logits.shape != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    per = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="none")
    return per.sum(dim=-1).mean()


def cls_real(cls_logits, y_source) -> torch.Tensor:
    return attribute_bce(cls_logits, y_source)


def cls_fake(cls_logits_on_fake, y_target) -> torch.Tensor:
    return attribute_bce(cls_logits_on_fake, y_target)


def identity_loss(x_translated, x) -> torch.Tensor:
    if x_translated.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_translated.shape)} vs {tuple(x.shape)}")
    return (x_translated - x).abs().mean()


_LOG_FLOOR = 1e-12


def parsing_loss(p_real: torch.Tensor, p_fake: torch.Tensor,
                 log_p_fake: torch.Tensor | None = None) -> torch.Tensor:
    """Pixel-wise cross-entropy of ``p_fake`` against argmax labels of ``p_real``.

    Posteriors have shape (B, K, H, W). Pass ``log_p_fake`` when available to
    avoid taking the log of saturated probabilities.
    """
    if p_real.shape != p_fake.shape:
        raise ValueError(f"posterior shapes differ: {tuple(p_real.shape)} vs {tuple(p_fake.shape)}")
    labels = p_real.detach().argmax(dim=1, keepdim=True)
    if log_p_fake is None:
        log_p_fake = p_fake.clamp_min(_LOG_FLOOR).log()
    return -log_p_fake.gather(1, labels).mean()


def bidirectional_loss(x, s, x_hat, s_hat, z_forward, z_fake):
    """Image-level cycle term and latent-level consistency term."""
    if x.shape != x_hat.shape:
        raise ValueError(f"x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    if z_forward.shape != z_fake.shape:
        raise ValueError(f"latent {tuple(z_forward.shape)} vs {tuple(z_fake.shape)}")
    image_term = (x - x_hat).abs().mean()
    if s is not None:
        if s_hat is None or s.shape != s_hat.shape:
            raise ValueError("side reconstruction missing or mis-shaped")
        image_term = image_term + (s - s_hat).abs().mean()
    latent_term = (z_forward - z_fake).abs().mean()
    return image_term, latent_term


def total_generator_loss(adversarial, bidirectional, cls_fake_value, identity, parsing,
                         weights: LossWeights):
    return (adversarial + weights.lambda_bi * bidirectional + weights.lambda_cls * cls_fake_value
            + weights.lambda_id * identity + weights.lambda_p * parsing)


def total_discriminator_loss(critic_part, cls_real_value, weights: LossWeights):
    return critic_part + weights.lambda_cls * cls_real_value


@dataclass
class LossReport:
    """Scalar snapshot of every objective term for one training cycle."""

    gan_critic: float = math.nan
    gan_generator: float = math.nan
    gradient_penalty: float = math.nan
    cls_real: float = math.nan
    cls_fake: float = math.nan
    identity: float = math.nan
    parsing: float = math.nan
    bidirectional_image: float = math.nan
    bidirectional_latent: float = math.nan
    total_g: float = math.nan
    total_d: float = math.nan
    d_loss_real: float = math.nan
    d_loss_fake: float = math.nan

    def update(self, **values) -> "LossReport":
        for k, v in values.items():
            setattr(self, k, float(v))
        return self

    def recompute_totals(self, weights: LossWeights) -> tuple[float, float]:
        """Totals recomputed from components, for consistency checks."""
        total_d = (self.gan_critic + weights.lambda_gp * self.gradient_penalty
                   + weights.lambda_cls * self.cls_real)
        total_g = (self.gan_generator
                   + weights.lambda_bi * (self.bidirectional_image + self.bidirectional_latent)
                   + weights.lambda_cls * self.cls_fake + weights.lambda_id * self.identity
                   + weights.lambda_p * self.parsing)
        return total_g, total_d

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


LOG_PREFIX = ["step", "d_steps", "epoch", "lr"]


class LossLog:
    """Append-only CSV log, one row per generator step."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_PREFIX + LossReport.columns())

    def append(self, step: int, d_steps: int, epoch: int, lr: float, report: LossReport):
        row = {"step": step, "d_steps": d_steps, "epoch": epoch, "lr": lr, **report.as_dict()}
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in LOG_PREFIX + LossReport.columns()])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v
