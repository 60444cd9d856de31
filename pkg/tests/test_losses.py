import math

import numpy as np
import pytest

from shiftpaint import autodiff as ad
from shiftpaint.losses import (LossReport, LossWeights, adversarial_losses,
                               guidance_loss, l1_loss, total_objective)
from shiftpaint.networks import build_discriminator


class ConstantDiscriminator:
    """Stub emitting a fixed probability map regardless of input."""

    def __init__(self, value, shape=(1, 1, 2, 2)):
        self.value = value
        self.shape = shape

    def forward(self, image):
        return ad.constant(np.full(self.shape, self.value))


class TestGuidanceLoss:
    def test_identical_features_zero(self):
        f = ad.constant(np.random.default_rng(0).standard_normal((1, 3, 4, 4)))
        missing = np.ones((4, 4), dtype=bool)
        assert guidance_loss(f, f, missing).item() == 0.0

    def test_empty_missing_set_zero(self):
        rng = np.random.default_rng(1)
        a = ad.constant(rng.standard_normal((1, 3, 4, 4)))
        b = ad.constant(rng.standard_normal((1, 3, 4, 4)))
        assert guidance_loss(a, b, np.zeros((4, 4), dtype=bool)).item() == 0.0

    def test_hand_computed_single_position(self):
        # one missing position, vectors (1,2) vs (0,0): squared distance 5
        a = np.zeros((1, 2, 2, 2))
        b = np.zeros((1, 2, 2, 2))
        a[0, :, 0, 1] = [1.0, 2.0]
        missing = np.zeros((2, 2), dtype=bool)
        missing[0, 1] = True
        value = guidance_loss(ad.constant(a), ad.constant(b), missing).item()
        assert value == pytest.approx(5.0)

    def test_sum_reduction_scales_by_count(self):
        rng = np.random.default_rng(2)
        a = ad.constant(rng.standard_normal((1, 3, 4, 4)))
        b = ad.constant(rng.standard_normal((1, 3, 4, 4)))
        missing = np.zeros((4, 4), dtype=bool)
        missing[1:3, 1:3] = True
        total = guidance_loss(a, b, missing, sum_reduction=True).item()
        mean = guidance_loss(a, b, missing).item()
        assert total == pytest.approx(mean * 4)

    def test_invariant_to_values_outside_missing(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((1, 3, 4, 4))
        b = rng.standard_normal((1, 3, 4, 4))
        missing = np.zeros((4, 4), dtype=bool)
        missing[2, 2] = True
        base = guidance_loss(ad.constant(a), ad.constant(b), missing).item()
        a2 = a.copy()
        a2[0, :, 0, 0] += 100.0  # a known position
        assert guidance_loss(ad.constant(a2), ad.constant(b), missing).item() == base

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            guidance_loss(ad.constant(np.zeros((1, 2, 4, 4))),
                          ad.constant(np.zeros((1, 3, 4, 4))),
                          np.zeros((4, 4), dtype=bool))


class TestL1Loss:
    def test_identical_zero(self):
        img = ad.constant(np.random.default_rng(0).uniform(-1, 1, (1, 3, 8, 8)))
        assert l1_loss(img, img).item() == 0.0

    def test_constant_offset_mean(self):
        a = ad.constant(np.zeros((1, 3, 4, 4)))
        b = ad.constant(np.full((1, 3, 4, 4), -0.37))
        assert l1_loss(a, b).item() == pytest.approx(0.37)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(-1, 1, (1, 3, 5, 5))
        b = rng.uniform(-1, 1, (1, 3, 5, 5))
        expected = float(np.abs(a - b).mean())
        assert l1_loss(ad.constant(a), ad.constant(b)).item() == pytest.approx(expected)
        expected_sum = float(np.abs(a - b).sum())
        assert l1_loss(ad.constant(a), ad.constant(b),
                       sum_reduction=True).item() == pytest.approx(expected_sum)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-1, 1, (1, 3, 4, 4))
        b = a.copy()
        b[0, 0, 0, 0] += 1e-6
        assert l1_loss(ad.constant(a), ad.constant(b)).item() > 0.0


class TestAdversarialLosses:
    def test_uncertain_discriminator_closed_form(self):
        disc = ConstantDiscriminator(0.5)
        rng = np.random.default_rng(0)
        real = ad.constant(rng.uniform(-1, 1, (1, 3, 8, 8)))
        fake = ad.constant(rng.uniform(-1, 1, (1, 3, 8, 8)))
        out = adversarial_losses(disc, real, fake)
        assert out["d_loss"].item() == pytest.approx(2.0 * math.log(2.0), rel=1e-12)
        assert out["g_loss"].item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_perfect_discriminator_d_loss_vanishes(self):
        class PerfectDisc:
            def forward(self, image):
                val = 1.0 if float(image.data.sum()) > 0 else 1e-9
                return ad.constant(np.full((1, 1, 2, 2), val))

        real = ad.constant(np.full((1, 3, 4, 4), 0.5))
        fake = ad.constant(np.full((1, 3, 4, 4), -0.5))
        out = adversarial_losses(PerfectDisc(), real, fake)
        assert out["d_loss"].item() == pytest.approx(0.0, abs=1e-8)

    def test_log_clamp_keeps_losses_finite(self):
        for value in (0.0, 1.0):
            disc = ConstantDiscriminator(value)
            rng = np.random.default_rng(1)
            real = ad.constant(rng.uniform(-1, 1, (1, 3, 4, 4)))
            fake = ad.constant(rng.uniform(-1, 1, (1, 3, 4, 4)))
            out = adversarial_losses(disc, real, fake)
            assert math.isfinite(out["d_loss"].item())
            assert math.isfinite(out["g_loss"].item())

    def test_saturating_form(self):
        disc = ConstantDiscriminator(0.25)
        rng = np.random.default_rng(2)
        real = ad.constant(rng.uniform(-1, 1, (1, 3, 4, 4)))
        fake = ad.constant(rng.uniform(-1, 1, (1, 3, 4, 4)))
        non_sat = adversarial_losses(disc, real, fake)["g_loss"].item()
        sat = adversarial_losses(disc, real, fake, saturating=True)["g_loss"].item()
        assert non_sat == pytest.approx(-math.log(0.25))
        assert sat == pytest.approx(math.log(0.75))

    def test_g_loss_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        disc = build_discriminator(32, 4, rng=rng)
        real = ad.constant(rng.uniform(-1, 1, (1, 3, 32, 32)))
        fake = ad.Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)), requires_grad=True)

        def loss():
            return adversarial_losses(disc, real, fake)["g_loss"]

        ad.backward(loss())
        grad = fake.grad.copy()
        flat = fake.data.reshape(-1)
        h = 1e-4
        coords = rng.choice(flat.size, size=12, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            lp = loss().item()
            flat[i] = old - h
            lm = loss().item()
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            assert abs(grad.reshape(-1)[i] - fd) / (abs(fd) + 1e-8) < 1e-4

    def test_detached_fake_protects_generator(self):
        rng = np.random.default_rng(6)
        disc = build_discriminator(32, 4, rng=rng)
        fake = ad.Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)), requires_grad=True)
        real = ad.constant(rng.uniform(-1, 1, (1, 3, 32, 32)))
        out = adversarial_losses(disc, real, fake)
        ad.backward(out["d_loss"])
        assert fake.grad is None


class TestTotalObjective:
    def test_zero_weights_reduce_to_l1(self):
        rng = np.random.default_rng(0)
        a = ad.constant(rng.uniform(-1, 1, (1, 3, 4, 4)))
        b = ad.constant(rng.uniform(-1, 1, (1, 3, 4, 4)))
        rec = l1_loss(a, b)
        guide = ad.constant(np.asarray(3.0))
        adv = ad.constant(np.asarray(7.0))
        total = total_objective(rec, guide, adv, LossWeights(0.0, 0.0))
        assert total.item() == pytest.approx(rec.item())

    def test_weighted_sum(self):
        rec = ad.constant(np.asarray(1.0))
        guide = ad.constant(np.asarray(10.0))
        adv = ad.constant(np.asarray(100.0))
        total = total_objective(rec, guide, adv, LossWeights(0.01, 0.002))
        assert total.item() == pytest.approx(1.0 + 0.1 + 0.2)

    @pytest.mark.parametrize("lam", [1.0, 0.1, 0.01, 0.001])
    def test_guidance_weight_sweep_accepted(self, lam):
        w = LossWeights(lambda_g=lam, lambda_adv=0.002)
        total = total_objective(ad.constant(np.asarray(1.0)),
                                ad.constant(np.asarray(2.0)),
                                ad.constant(np.asarray(0.0)), w)
        assert total.item() == pytest.approx(1.0 + 2.0 * lam)

    def test_non_finite_part_rejected(self):
        prev = __import__("shiftpaint.autodiff", fromlist=["set_finite_checks"]).set_finite_checks(False)
        try:
            bad = ad.constant(np.asarray(1.0))
            bad.data = np.asarray(np.inf)
            with pytest.raises(ValueError, match="non-finite"):
                total_objective(bad, ad.constant(np.asarray(0.0)),
                                ad.constant(np.asarray(0.0)), LossWeights())
        finally:
            __import__("shiftpaint.autodiff", fromlist=["set_finite_checks"]).set_finite_checks(prev)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_g=-0.1)


class TestLossReport:
    def test_total_invariant(self):
        w = LossWeights(0.01, 0.002)
        rep = LossReport.build(l1=0.5, guidance=2.0, g_adv=3.0, d_loss=1.0, weights=w)
        assert rep.total == pytest.approx(0.5 + 0.02 + 0.006, rel=1e-9)

    def test_non_finite_component_rejected(self):
        with pytest.raises(ValueError):
            LossReport(l1=float("nan"), guidance=0, g_adv=0, d_loss=0, total=0)

    def test_csv_row(self):
        rep = LossReport(l1=0.5, guidance=1.0, g_adv=2.0, d_loss=3.0, total=0.524)
        assert rep.csv_row(7).startswith("7,0.5,1,2,3,")
