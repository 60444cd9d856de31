"""Image quality metrics and feature-space visualization.

PSNR, SSIM and mean squared error operate on images scaled to [0, 1].
``invert_feature`` reconstructs an image whose encoder feature matches a
target on the missing region, by projected gradient descent with a
backtracking step so the objective never increases.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PSNR_CAP = 100.0


class DivergenceError(RuntimeError):
    """The inversion objective increased for too many consecutive steps."""


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    mean_l2: float

    def csv_row(self, name):
        return f"{name},{self.psnr:.6f},{self.ssim:.6f},{self.mean_l2:.8f}"


CSV_HEADER = "filename,psnr,ssim,mean_l2"


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mean_l2(a, b):
    """Mean squared error over pixels in [0, 1]."""
    a, b = _check_pair(a, b)
    return float(((a - b) ** 2).mean())


def psnr(a, b):
    """10*log10(1/MSE) in dB, capped at 100 for (near-)identical images."""
    mse = mean_l2(a, b)
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_kernel(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    xs = np.arange(size) - half
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    k /= k.sum()
    return k


def _filter_valid(img, kernel):
    """Separable 2-d correlation, valid region only."""
    k = kernel.size
    h, w = img.shape
    rows = np.zeros((h, w - k + 1))
    for j in range(k):
        rows += kernel[j] * img[:, j:j + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += kernel[i] * rows[i:i + h - k + 1, :]
    return out


def _to_gray(img):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=0)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"expected (C,H,W) or (H,W) image, got shape {arr.shape}")


def ssim(a, b, k1=0.01, k2=0.03, win_size=11, sigma=1.5):
    """Mean local structural similarity on the grayscale pair, range 1."""
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < win_size:
        raise ValueError(f"image {ga.shape} smaller than the {win_size}x{win_size} window")
    kern = _gaussian_kernel(win_size, sigma)
    mu_a = _filter_valid(ga, kern)
    mu_b = _filter_valid(gb, kern)
    var_a = _filter_valid(ga * ga, kern) - mu_a ** 2
    var_b = _filter_valid(gb * gb, kern) - mu_b ** 2
    cov = _filter_valid(ga * gb, kern) - mu_a * mu_b
    c1 = k1 ** 2
    c2 = k2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def metric_report(a, b):
    return MetricReport(psnr=psnr(a, b), ssim=ssim(a, b), mean_l2=mean_l2(a, b))


# ---------------------------------------------------------------------------
# feature inversion


def _masked_objective(encode, image_t, target, missing):
    feat = encode(image_t)
    diff = ad.sub(feat, target)
    sq = ad.mul(diff, diff)
    return ad.sum_all(ad.mask_mul(sq, missing.astype(feat.data.dtype)))


def invert_feature(encode, target_feat, missing, image_shape, iters=200,
                   step=0.1, init=None, callback=None, patience=50):
    """Image whose encoder feature matches ``target_feat`` on the missing set.

    ``encode`` maps an image tensor of ``image_shape`` to the feature map
    being matched. Starts from mid-gray (all zeros in [-1, 1] space) unless
    ``init`` is given, keeps pixels in [-1, 1], and backtracks the step
    until each move does not increase the objective.
    """
    target = target_feat if isinstance(target_feat, ad.Tensor) else ad.constant(target_feat)
    target = target.detach()
    missing = np.asarray(missing, dtype=bool)
    if init is None:
        img = np.zeros(image_shape, dtype=np.float64)
    else:
        img = np.array(init, dtype=np.float64, copy=True)
        if img.shape != tuple(image_shape):
            raise ValueError(f"init shape {img.shape} != image_shape {tuple(image_shape)}")

    rises = 0
    image_t = ad.Tensor(img, requires_grad=True)
    obj = _masked_objective(encode, image_t, target, missing)
    current = obj.item()
    if callback:
        callback(0, current)
    for it in range(1, iters + 1):
        image_t.zero_grad()
        ad.backward(obj)
        grad = image_t.grad
        if grad is None or not np.any(grad):
            break
        trial_step = step
        accepted = False
        for _ in range(40):
            candidate = np.clip(img - trial_step * grad, -1.0, 1.0)
            cand_t = ad.Tensor(candidate, requires_grad=True)
            cand_obj = _masked_objective(encode, cand_t, target, missing)
            if cand_obj.item() <= current:
                accepted = True
                break
            trial_step *= 0.5
        if not accepted:
            rises += 1
            if rises >= patience:
                raise DivergenceError(
                    f"objective failed to decrease for {patience} consecutive iterations"
                )
            if callback:
                callback(it, current)
            continue
        rises = 0
        img, image_t, obj = candidate, cand_t, cand_obj
        prev, current = current, cand_obj.item()
        if callback:
            callback(it, current)
        if prev - current <= 1e-15 * max(1.0, abs(prev)):
            break
    return img


def bench_inference(generator, n_runs=5):
    """Median wall-clock milliseconds of a full generator forward pass."""
    from .masks import propagate_mask
    from .training import make_central_mask, prepare_input

    size = generator.cfg.input_size
    rng = np.random.default_rng(0)
    gt = rng.uniform(-1, 1, size=(3, size, size)).astype(generator.cfg.np_dtype)
    sample = prepare_input(gt, make_central_mask(size))
    pyramid = propagate_mask(sample.mask, generator.cfg.shift_layer,
                             generator.cfg.threshold)
    x = sample.masked_input[None]

    times = []
    for _ in range(max(1, n_runs) + 1):  # first pass warms caches, then timed runs
        start = time.perf_counter()
        with ad.no_grad():
            generator.forward(ad.constant(x), pyramid)
        times.append((time.perf_counter() - start) * 1e3)
    return float(np.median(times[1:]) if len(times) > 1 else times[0])
