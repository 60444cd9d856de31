"""Mask generation, input preparation and the adversarial training loop.

Each step builds the mask pyramid for the sample, updates the discriminator
on its classification loss (the generated image detached), then updates the
generator on the combined objective. Batch size is one; a fixed seed makes
the whole run, checkpoints included, reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .data import fit_min_side, random_crop
from .losses import (CSV_HEADER, LossReport, LossWeights, adversarial_losses,
                     guidance_loss, l1_loss, total_objective)
from .masks import propagate_mask

MASK_KINDS = ("central", "random")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    mask_kind: str = "central"
    seed: int = 0
    crop_size: int = 32
    resize_min: int = 32
    fill: float = 0.0
    sum_reduction: bool = False
    saturating: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.mask_kind not in MASK_KINDS:
            raise ValueError(f"mask_kind must be one of {MASK_KINDS}")
        if not -1.0 <= self.fill <= 1.0:
            raise ValueError("fill must lie in [-1, 1]")
        for name in ("lr", "beta1", "beta2", "adam_eps"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        return self


@dataclass(frozen=True)
class Sample:
    """One training instance: clean image, mask, and the pre-filled input."""

    gt_image: np.ndarray      # (3,H,W) in [-1,1]
    mask: np.ndarray          # (H,W) uint8, 1 = missing
    masked_input: np.ndarray  # gt outside the mask, fill value inside


def make_central_mask(size):
    """Centered square covering a quarter of the image area."""
    if size < 8:
        raise ValueError("mask size must be >= 8")
    mask = np.zeros((size, size), dtype=np.uint8)
    side = size // 2
    start = (size - side) // 2
    mask[start:start + side, start:start + side] = 1
    return mask


def make_random_mask(size, rng, max_tries=50):
    """Union of 1-4 random rectangles with coverage clamped to [10%, 40%]."""
    if size < 8:
        raise ValueError("mask size must be >= 8")
    area = size * size
    for _ in range(max_tries):
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 5))):
            h = int(rng.integers(size // 8, size // 2 + 1))
            w = int(rng.integers(size // 8, size // 2 + 1))
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            mask[top:top + h, left:left + w] = 1
        coverage = mask.sum() / area
        if 0.10 <= coverage <= 0.40:
            return mask
    return make_central_mask(size)  # always within bounds


def prepare_input(gt, mask, fill=0.0):
    """Splice the fill value into the missing region of the clean image."""
    gt = np.asarray(gt)
    mask = np.asarray(mask, dtype=np.uint8)
    if gt.ndim != 3 or gt.shape[1:] != mask.shape:
        raise ValueError(f"image {gt.shape} does not match mask {mask.shape}")
    masked = np.where(mask[None].astype(bool), np.asarray(fill, dtype=gt.dtype), gt)
    return Sample(gt_image=gt, mask=mask, masked_input=masked)


def composite(output, sample):
    """Generated values inside the mask, original pixels outside, bit-exact."""
    hole = sample.mask[None].astype(bool)
    return np.where(hole, np.asarray(output), sample.gt_image)


def train_step(generator, discriminator, sample, cfg, rng=None):
    """One discriminator update followed by one generator update."""
    dt = generator.cfg.np_dtype
    pyramid = propagate_mask(sample.mask, generator.cfg.shift_layer,
                             generator.cfg.threshold)
    x = ad.constant(sample.masked_input.astype(dt)[None])
    gt = ad.constant(sample.gt_image.astype(dt)[None])

    fwd = generator.forward(x, pyramid, gt_image=gt, rng=rng)
    fake = fwd.output

    # discriminator first: its loss sees the fake image as a constant
    adv_d = adversarial_losses(discriminator, gt, fake, saturating=cfg.saturating)
    discriminator.zero_grad()
    ad.backward(adv_d["d_loss"])
    ad.adam_step(discriminator.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                 beta2=cfg.beta2, eps=cfg.adam_eps)

    # generator update against the freshly stepped discriminator
    adv_g = adversarial_losses(discriminator, gt, fake, saturating=cfg.saturating)
    rec = l1_loss(fake, gt, sum_reduction=cfg.sum_reduction)
    guide = guidance_loss(fwd.dec_feat, fwd.gt_enc_feat,
                          pyramid.level(generator.cfg.shift_layer).missing,
                          sum_reduction=cfg.sum_reduction)
    total = total_objective(rec, guide, adv_g["g_loss"], cfg.weights)
    if not np.isfinite(total.data):
        raise ad.NonFiniteError(
            f"non-finite objective: l1={rec.item()} guidance={guide.item()} "
            f"g_adv={adv_g['g_loss'].item()}"
        )
    generator.zero_grad()
    discriminator.zero_grad()
    ad.backward(total)
    ad.adam_step(generator.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                 beta2=cfg.beta2, eps=cfg.adam_eps)

    return LossReport.build(l1=rec.item(), guidance=guide.item(),
                            g_adv=adv_g["g_loss"].item(),
                            d_loss=adv_d["d_loss"].item(), weights=cfg.weights)


def _augment(image, rng):
    if rng.random() < 0.5:
        return image[:, :, ::-1].copy()
    return image


def draw_sample(image, cfg, rng):
    """Resize/crop/flip an image and attach a mask of the configured kind."""
    img = fit_min_side(image, cfg.resize_min)
    img = random_crop(img, cfg.crop_size, rng)
    img = _augment(img, rng)
    if cfg.mask_kind == "central":
        mask = make_central_mask(cfg.crop_size)
    else:
        mask = make_random_mask(cfg.crop_size, rng)
    return prepare_input(img, mask, fill=cfg.fill)


def train(generator, discriminator, dataset, cfg, out_dir, log=print):
    """Full run: seeded shuffling, per-step reports, per-epoch checkpoints."""
    cfg.validate()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "losses.csv"
    csv_path.write_text(CSV_HEADER + "\n")

    rng = np.random.default_rng(cfg.seed)
    step = 0
    with csv_path.open("a") as csv:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(dataset))
            for idx in order:
                sample = draw_sample(dataset.load(int(idx)), cfg, rng)
                report = train_step(generator, discriminator, sample, cfg, rng=rng)
                step += 1
                csv.write(report.csv_row(step) + "\n")
            checkpoint.save_models(ckpt_dir / f"epoch_{epoch}.snet",
                                   generator, discriminator)
            log(f"epoch {epoch}/{cfg.epochs}: step={step} "
                f"l1={report.l1:.4f} guidance={report.guidance:.4f} "
                f"d={report.d_loss:.4f} total={report.total:.4f}")
    return step
