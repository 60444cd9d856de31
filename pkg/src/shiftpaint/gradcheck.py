"""Central finite-difference verification of every analytic gradient.

Each check builds a scalar objective, takes the tape gradient, then probes
coordinates with the symmetric difference (f(x+h) - f(x-h)) / 2h in 64-bit
and compares elementwise with |analytic - fd| / (|fd| + 1e-8). Large
tensors are probed on a random coordinate subsample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import LossWeights, adversarial_losses, guidance_loss, l1_loss, total_objective
from .masks import propagate_mask
from .networks import GeneratorConfig, build_discriminator, build_generator
from .shift import apply_shift, nn_search
from .training import make_central_mask, prepare_input

DEFAULT_H = 1e-4
DEFAULT_RTOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    probed: int = 0
    unmeasurable: int = 0

    @property
    def ok(self):
        if self.probed and 3 * self.unmeasurable > self.probed:
            return False  # too many invalid measurements to call it checked
        return self.max_rel_error < self.tolerance

    def line(self):
        status = "ok" if self.ok else "FAIL"
        extra = f" (skipped {self.unmeasurable} kink-straddling probes)" if self.unmeasurable else ""
        return f"{status:4s} {self.name:<42s} max_rel={self.max_rel_error:.3e}{extra}"


def _central_diff(make_loss, flat, i, h):
    old = flat[i]
    flat[i] = old + h
    lp = make_loss().item()
    flat[i] = old - h
    lm = make_loss().item()
    flat[i] = old
    return (lp - lm) / (2.0 * h)


def max_rel_error(make_loss, tensors, h=DEFAULT_H, max_coords=None, rng=None,
                  rtol=DEFAULT_RTOL, counters=None):
    """Worst relative error between tape and finite-difference gradients.

    The central difference is only a derivative estimate where the loss is
    smooth across the probe window; piecewise-linear activations make a few
    coordinates straddle a kink at any fixed h. When the primary comparison
    fails, the estimate is recomputed at h/4: if the two estimates disagree
    with each other the measurement is invalid and the coordinate is skipped
    (and counted). A wrong analytic gradient keeps a stable estimate and
    still fails.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    loss = make_loss()
    for t in tensors:
        t.zero_grad()
    ad.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]

    worst = 0.0
    probed = 0
    unmeasurable = 0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        gflat = grad.reshape(-1)
        for i in coords:
            probed += 1
            fd = _central_diff(make_loss, flat, i, h)
            rel = abs(gflat[i] - fd) / (abs(fd) + 1e-8)
            if rel >= rtol:
                # an estimate that cannot reproduce itself to rtol/4 under
                # window shrinking cannot adjudicate rtol
                fd_small = _central_diff(make_loss, flat, i, h / 4.0)
                if abs(fd - fd_small) > 0.25 * rtol * (abs(fd) + abs(fd_small) + 1e-8):
                    unmeasurable += 1
                    continue
            worst = max(worst, rel)
        t.zero_grad()
    if counters is not None:
        counters["probed"] = probed
        counters["unmeasurable"] = unmeasurable
    return worst


def _rand_t(rng, shape, scale=1.0):
    return ad.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _rand_away(rng, shape, margin=0.05):
    """Random values kept ``margin`` away from zero (safe to probe across kinks)."""
    vals = rng.standard_normal(shape)
    return ad.Tensor(vals + np.sign(vals) * margin, requires_grad=True)


def _proj(rng, shape):
    # fixed random weighting makes sum-objectives sensitive to every output
    return ad.constant(rng.standard_normal(shape))


def _layer_checks(seed):
    rng = np.random.default_rng(seed)
    checks = []

    x = _rand_t(rng, (2, 3, 6, 6))
    w = _rand_t(rng, (4, 3, 4, 4))
    b = _rand_t(rng, (4,))
    p = _proj(rng, (2, 4, 3, 3))
    checks.append(("conv2d(stride2,pad1,bias)", lambda: ad.sum_all(
        ad.mul(ad.conv2d(x, w, stride=2, pad=1, bias=b), p)), [x, w, b]))

    x1 = _rand_t(rng, (1, 2, 5, 5))
    w1 = _rand_t(rng, (3, 2, 3, 3))
    p1 = _proj(rng, (1, 3, 3, 3))
    checks.append(("conv2d(stride1,pad0)", lambda: ad.sum_all(
        ad.mul(ad.conv2d(x1, w1), p1)), [x1, w1]))

    u = _rand_t(rng, (1, 4, 3, 3))
    wt = _rand_t(rng, (4, 2, 4, 4))
    bt = _rand_t(rng, (2,))
    pt = _proj(rng, (1, 2, 6, 6))
    checks.append(("conv2d_transpose(stride2,pad1)", lambda: ad.sum_all(
        ad.mul(ad.conv2d_transpose(u, wt, stride=2, pad=1, bias=bt), pt)), [u, wt, bt]))

    xn = _rand_t(rng, (2, 3, 4, 4))
    pn = _proj(rng, (2, 3, 4, 4))
    checks.append(("instance_norm", lambda: ad.sum_all(
        ad.mul(ad.instance_norm(xn), pn)), [xn]))

    xa = _rand_away(rng, (11,))
    pa = _proj(rng, (11,))
    checks.append(("relu", lambda: ad.sum_all(ad.mul(ad.relu(xa), pa)), [xa]))
    checks.append(("leaky_relu(0.2)", lambda: ad.sum_all(
        ad.mul(ad.leaky_relu(xa, 0.2), pa)), [xa]))
    checks.append(("tanh", lambda: ad.sum_all(ad.mul(ad.tanh(xa), pa)), [xa]))
    checks.append(("sigmoid", lambda: ad.sum_all(ad.mul(ad.sigmoid(xa), pa)), [xa]))

    ca = _rand_t(rng, (1, 2, 3, 3))
    cb = _rand_t(rng, (1, 3, 3, 3))
    pc = _proj(rng, (1, 5, 3, 3))
    checks.append(("concat_channels", lambda: ad.sum_all(
        ad.mul(ad.concat_channels([ca, cb]), pc)), [ca, cb]))

    # fan-out: one value feeding two consumers must sum both paths
    xf = _rand_t(rng, (1, 2, 3, 3))
    pf = _proj(rng, (1, 4, 3, 3))
    checks.append(("fan_out_sum", lambda: ad.sum_all(
        ad.mul(ad.concat_channels([xf, xf]), pf)), [xf]))

    lb = ad.constant(rng.standard_normal((1, 3, 5, 5)))
    la = ad.Tensor(lb.data + _rand_away(rng, (1, 3, 5, 5)).data, requires_grad=True)
    checks.append(("l1_loss", lambda: l1_loss(la, lb), [la]))

    gd = _rand_t(rng, (1, 4, 4, 4))
    gt = ad.constant(rng.standard_normal((1, 4, 4, 4)))
    mm = np.zeros((4, 4), dtype=bool)
    mm[1:3, 1:3] = True
    checks.append(("guidance_loss", lambda: guidance_loss(gd, gt, mm), [gd]))

    return checks


def _shift_net_check(seed):
    """Two-layer toy net containing the frozen shift rearrangement."""
    rng = np.random.default_rng(seed)
    x = _rand_t(rng, (1, 2, 8, 8))
    w1 = _rand_t(rng, (4, 2, 4, 4), scale=0.3)
    w2 = _rand_t(rng, (4, 3, 4, 4), scale=0.3)
    mm = np.zeros((4, 4), dtype=bool)
    mm[1:3, 1:3] = True
    feat = ad.conv2d(x, w1, stride=2, pad=1)
    frozen = nn_search(feat.data[0], feat.data[0], mm)
    proj = _proj(rng, (1, 3, 8, 8))

    def make_loss():
        f = ad.leaky_relu(ad.conv2d(x, w1, stride=2, pad=1), 0.2)
        shifted = apply_shift(f, frozen)
        out = ad.tanh(ad.conv2d_transpose(shifted, w2, stride=2, pad=1))
        return ad.sum_all(ad.mul(out, proj))

    return "shift_toy_net(frozen)", make_loss, [x, w1, w2]


def _adv_output_check(seed):
    """Generator-side adversarial gradient with respect to the fake image."""
    rng = np.random.default_rng(seed)
    disc = build_discriminator(32, base_channels=4, rng=rng)
    real = ad.constant(rng.uniform(-1, 1, (1, 3, 32, 32)))
    fake = ad.Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)), requires_grad=True)

    def make_loss():
        return adversarial_losses(disc, real, fake)["g_loss"]

    return "g_adv_wrt_generator_output", make_loss, [fake]


def _full_generator_check(seed, max_coords=6):
    """Desk 16x16 generator, frozen assignment, params and input probed."""
    rng = np.random.default_rng(seed)
    cfg = GeneratorConfig(input_size=16, depth=4, base_channels=4, shift_layer=2)
    gen = build_generator(cfg, rng=rng)
    gt = rng.uniform(-1, 1, (3, 16, 16))
    sample = prepare_input(gt, make_central_mask(16))
    pyramid = propagate_mask(sample.mask, cfg.shift_layer, cfg.threshold)
    # a uniformly-zero fill with bias-free convs puts interior pre-activations
    # exactly on the leaky-relu kink, where no finite difference is a valid
    # derivative estimate; dithering the probe point moves off the kink set
    # without touching the wiring being checked
    probe_input = sample.masked_input + rng.uniform(-0.1, 0.1, sample.masked_input.shape)
    x = ad.Tensor(probe_input[None], requires_grad=True)
    gt_t = ad.constant(gt[None])
    first = gen.forward(x, pyramid, gt_image=gt_t)
    frozen = first.assignment
    # the guidance target is a constant by design (no gradient flows into
    # it), so the probed function must hold it fixed exactly like the
    # assignment
    gt_feat = first.gt_enc_feat.detach()
    proj = _proj(rng, (1, 3, 16, 16))

    def make_loss():
        # projection-weighted output plus the guidance term exercises both
        # the image path and the decoder tap; no |.| kinks along the way
        fwd = gen.forward(x, pyramid, assignment_override=frozen)
        guide = guidance_loss(fwd.dec_feat, gt_feat,
                              pyramid.level(cfg.shift_layer).missing)
        styled = ad.sum_all(ad.mul(fwd.output, proj))
        return ad.add(styled, ad.scale(guide, 0.5))

    tensors = [x] + [p.t for p in gen.parameters()]
    return "full_generator_16(frozen_shift)", make_loss, tensors, max_coords


def run_suite(seeds=10, rtol=DEFAULT_RTOL, h=DEFAULT_H, log=None):
    """All gradient checks over the given number of seeds."""
    results = []

    def run(name, make_loss, tensors, max_coords=None, seed=0):
        counters = {}
        err = max_rel_error(make_loss, tensors, h=h, max_coords=max_coords,
                            rng=np.random.default_rng(seed + 12345), rtol=rtol,
                            counters=counters)
        res = CheckResult(name=f"{name}[seed={seed}]", max_rel_error=err,
                          tolerance=rtol, probed=counters["probed"],
                          unmeasurable=counters["unmeasurable"])
        results.append(res)
        if log:
            log(res.line())

    for seed in range(seeds):
        for name, make_loss, tensors in _layer_checks(seed):
            run(name, make_loss, tensors, seed=seed)
        name, make_loss, tensors = _shift_net_check(seed)
        run(name, make_loss, tensors, seed=seed)

    for seed in range(min(3, seeds)):
        name, make_loss, tensors = _adv_output_check(seed)
        run(name, make_loss, tensors, max_coords=12, seed=seed)

    for seed in range(seeds):
        name, make_loss, tensors, max_coords = _full_generator_check(seed)
        run(name, make_loss, tensors, max_coords=max_coords, seed=seed)

    return results


def suite_passed(results):
    return all(r.ok for r in results)
