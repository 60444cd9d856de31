"""Reconstruction, guidance and adversarial objectives.

The combined training objective is the l1 reconstruction term plus the
guidance term (decoder feature pulled toward the clean-image encoder
feature on the missing region) and the adversarial term, each with its own
tradeoff weight. Reductions default to means so the weights keep their
meaning across resolutions; ``sum_reduction`` restores plain sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Tradeoff weights; defaults match the training recipe."""

    lambda_g: float = 0.01
    lambda_adv: float = 0.002

    def __post_init__(self):
        for name in ("lambda_g", "lambda_adv"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    """Scalar loss values of one training step."""

    l1: float
    guidance: float
    g_adv: float
    d_loss: float
    total: float

    def __post_init__(self):
        for name in ("l1", "guidance", "g_adv", "d_loss", "total"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite loss component {name}")

    @staticmethod
    def build(l1, guidance, g_adv, d_loss, weights):
        total = l1 + weights.lambda_g * guidance + weights.lambda_adv * g_adv
        return LossReport(l1=l1, guidance=guidance, g_adv=g_adv, d_loss=d_loss,
                          total=total)

    def csv_row(self, step):
        return (f"{step},{self.l1:.10g},{self.guidance:.10g},{self.g_adv:.10g},"
                f"{self.d_loss:.10g},{self.total:.10g}")


CSV_HEADER = "step,l1,guidance,g_adv,d_loss,total"


def guidance_loss(dec_feat, gt_enc_feat, missing, sum_reduction=False):
    """Squared feature distance summed over the missing set.

    Positions outside the missing set contribute nothing; by default the sum
    is divided by the number of missing positions.
    """
    if dec_feat.data.shape != gt_enc_feat.data.shape:
        raise ValueError(f"feature shapes differ: {dec_feat.data.shape} "
                         f"vs {gt_enc_feat.data.shape}")
    mm = np.asarray(missing, dtype=bool)
    if mm.shape != dec_feat.data.shape[-2:]:
        raise ValueError(f"missing map {mm.shape} does not match features "
                         f"{dec_feat.data.shape[-2:]}")
    count = int(mm.sum())
    if count == 0:
        return ad.constant(np.zeros((), dtype=dec_feat.data.dtype))
    diff = ad.sub(dec_feat, gt_enc_feat)
    masked = ad.mask_mul(ad.mul(diff, diff), mm.astype(dec_feat.data.dtype))
    total = ad.sum_all(masked)
    if sum_reduction:
        return total
    n = dec_feat.data.shape[0] if dec_feat.data.ndim == 4 else 1
    return ad.scale(total, 1.0 / (count * n))


def l1_loss(output, gt, sum_reduction=False):
    """Absolute reconstruction error (mean over elements by default)."""
    if output.data.shape != gt.data.shape:
        raise ValueError(f"image shapes differ: {output.data.shape} vs {gt.data.shape}")
    diff = ad.absolute(ad.sub(output, gt))
    return ad.sum_all(diff) if sum_reduction else ad.mean_all(diff)


def _mean_log(prob):
    return ad.mean_all(ad.log(ad.clamp_min(prob, LOG_FLOOR)))


def adversarial_losses(discriminator, real, fake, saturating=False):
    """Discriminator and generator terms of the adversarial objective.

    The discriminator descends ``-log D(real) - log(1 - D(fake))`` with the
    fake image detached so its update cannot reach the generator. The
    generator by default descends the non-saturating ``-log D(fake)``;
    ``saturating`` switches to the literal ``log(1 - D(fake))``.
    """
    if real.data.shape != fake.data.shape:
        raise ValueError(f"real/fake shapes differ: {real.data.shape} vs {fake.data.shape}")
    d_real = discriminator.forward(real)
    d_fake_det = discriminator.forward(fake.detach())
    d_loss = ad.add(ad.neg(_mean_log(d_real)), ad.neg(_mean_log(ad.one_minus(d_fake_det))))
    d_fake = discriminator.forward(fake)
    if saturating:
        g_loss = _mean_log(ad.one_minus(d_fake))
    else:
        g_loss = ad.neg(_mean_log(d_fake))
    return {"d_loss": d_loss, "g_loss": g_loss}


def total_objective(l1, guidance, g_adv, weights):
    """Weighted sum of the three generator terms, as a tape scalar."""
    for part in (l1, guidance, g_adv):
        if not np.all(np.isfinite(part.data)):
            raise ValueError("non-finite loss part")
    total = ad.add(l1, ad.scale(guidance, weights.lambda_g))
    return ad.add(total, ad.scale(g_adv, weights.lambda_adv))
