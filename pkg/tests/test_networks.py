import numpy as np
import pytest

from shiftpaint import autodiff as ad
from shiftpaint import checkpoint
from shiftpaint.masks import EmptyKnownRegionError, propagate_mask
from shiftpaint.networks import (GeneratorConfig, build_discriminator,
                                 build_generator)
from shiftpaint.training import make_central_mask, prepare_input

DESK = dict(input_size=32, depth=5, base_channels=8, shift_layer=2)


def desk_generator(seed=0, **kw):
    cfg = GeneratorConfig(**{**DESK, **kw})
    return build_generator(cfg, rng=np.random.default_rng(seed))


def desk_forward(gen, seed=1, with_gt=False):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(-1, 1, (3, gen.cfg.input_size, gen.cfg.input_size))
    sample = prepare_input(gt, make_central_mask(gen.cfg.input_size))
    pyramid = propagate_mask(sample.mask, gen.cfg.shift_layer, gen.cfg.threshold)
    fwd = gen.forward(sample.masked_input[None], pyramid,
                      gt_image=gt[None] if with_gt else None,
                      rng=np.random.default_rng(0))
    return fwd, sample, pyramid


class TestGeneratorConfig:
    def test_paper_scale_ladder(self):
        cfg = GeneratorConfig(input_size=256, depth=8, base_channels=64, shift_layer=3)
        cfg.validate()
        assert cfg.channels() == [64, 128, 256, 512, 512, 512, 512, 512]

    def test_desk_scale_ladder_caps_at_8x(self):
        cfg = GeneratorConfig(**DESK)
        assert cfg.channels() == [8, 16, 32, 64, 64]

    @pytest.mark.parametrize("bad", [
        dict(input_size=48),                      # not a power of two
        dict(input_size=32, depth=4),             # bottleneck not 1x1
        dict(shift_layer=5),                      # must be < depth
        dict(shift_layer=0),
        dict(shift_mode="sideways"),
        dict(slice_zero="bottleneck"),
        dict(shift_mode="off", slice_zero="shift"),
        dict(threshold=2.0),
    ])
    def test_invalid_configs_raise(self, bad):
        with pytest.raises(ValueError):
            GeneratorConfig(**{**DESK, **bad}).validate()


class TestGeneratorStructure:
    def test_paper_scale_layer_counts_and_shift_resolution(self):
        cfg = GeneratorConfig(input_size=256, depth=8, base_channels=64, shift_layer=3)
        gen = build_generator(cfg, rng=np.random.default_rng(0))
        assert len(gen.enc) == 8 and len(gen.dec) == 8
        # the tapped decoder layer mirrors encoder layer 3: 256 channels at 32x32
        assert gen.shift_dec_index == 5
        assert gen.dec[4].data.shape[1] == 256  # fifth deconv emits the tap
        # consumer of the triple concat sees 3 * 256 input channels
        assert gen.dec[5].data.shape[0] == 768

    def test_desk_bottleneck_reaches_1x1(self):
        gen = desk_generator()
        x = np.zeros((1, 3, 32, 32))
        bottleneck = gen.encode_to(5, ad.constant(x))
        assert bottleneck.data.shape == (1, 64, 1, 1)

    def test_desk_shift_tap_at_8x8(self):
        gen = desk_generator()
        fwd, _, _ = desk_forward(gen)
        assert fwd.dec_feat.data.shape == (1, 16, 8, 8)
        assert fwd.enc_feat.data.shape == (1, 16, 8, 8)
        assert fwd.shifted.data.shape == (1, 16, 8, 8)

    def test_channel_ledger_with_shift_on(self):
        gen = desk_generator()
        c_l = gen.cfg.channels()[gen.cfg.shift_layer - 1]
        consumer = gen.dec[gen.shift_dec_index]
        assert consumer.data.shape[0] == 3 * c_l

    def test_channel_ledger_with_shift_off(self):
        gen = desk_generator(shift_mode="off")
        c_l = gen.cfg.channels()[gen.cfg.shift_layer - 1]
        assert gen.dec[gen.shift_dec_index].data.shape[0] == 2 * c_l

    def test_zero_input_output_shape_and_range(self):
        gen = desk_generator()
        pyramid = propagate_mask(make_central_mask(32), 2, gen.cfg.threshold)
        out = gen.forward(np.zeros((1, 3, 32, 32)), pyramid).output.data
        assert out.shape == (1, 3, 32, 32)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_generator_has_no_bias_parameters(self):
        gen = desk_generator()
        assert all(p.name.endswith(".weight") for p in gen.parameters())
        assert len(gen.parameters()) == 10


class TestGeneratorForward:
    def test_empty_mask_shift_is_identity(self):
        gen = desk_generator()
        pyramid = propagate_mask(np.zeros((32, 32), dtype=np.uint8), 2,
                                 gen.cfg.threshold)
        fwd = gen.forward(np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 32)),
                          pyramid)
        assert fwd.shifted is fwd.enc_feat

    def test_fully_missing_raises(self):
        gen = desk_generator()
        pyramid = propagate_mask(np.ones((32, 32), dtype=np.uint8), 2,
                                 threshold=0.0)
        with pytest.raises(EmptyKnownRegionError):
            gen.forward(np.zeros((1, 3, 32, 32)), pyramid)

    def test_gt_branch_is_constant(self):
        gen = desk_generator()
        fwd, _, _ = desk_forward(gen, with_gt=True)
        assert fwd.gt_enc_feat is not None
        assert not fwd.gt_enc_feat.requires_grad
        assert fwd.gt_enc_feat._parents == ()

    def test_random_mode_needs_rng(self):
        gen = desk_generator(shift_mode="random")
        pyramid = propagate_mask(make_central_mask(32), 2, gen.cfg.threshold)
        with pytest.raises(ValueError, match="rng"):
            gen.forward(np.zeros((1, 3, 32, 32)), pyramid)

    def test_random_mode_sources_are_known(self):
        gen = desk_generator(shift_mode="random")
        fwd, _, pyramid = desk_forward(gen)
        known = set(np.flatnonzero(~pyramid.level(2).missing.ravel()).tolist())
        assert set(fwd.assignment.source.tolist()) <= known

    def test_wrong_input_shape_raises(self):
        gen = desk_generator()
        pyramid = propagate_mask(make_central_mask(32), 2, gen.cfg.threshold)
        with pytest.raises(ValueError, match="expected"):
            gen.forward(np.zeros((1, 3, 16, 16)), pyramid)

    def test_decoder_scale_leaves_assignment_unchanged(self):
        gen = desk_generator()
        fwd, sample, pyramid = desk_forward(gen)
        from shiftpaint.shift import nn_search
        level = pyramid.level(2)
        base = nn_search(fwd.dec_feat.data[0], fwd.enc_feat.data[0], level)
        scaled = nn_search(fwd.dec_feat.data[0] * 37.5, fwd.enc_feat.data[0], level)
        assert np.array_equal(base.source, scaled.source)
        assert np.array_equal(base.source, fwd.assignment.source)


class TestAblationWiring:
    def test_slice_zero_shift_equals_truncated_off_net(self):
        # zeroing the shift slice must compute exactly what a shift-off net
        # with the same remaining weights computes
        gen_on = desk_generator(seed=3, slice_zero="shift")
        gen_off = desk_generator(seed=4, shift_mode="off")
        for p_src, p_dst in zip(gen_on.enc, gen_off.enc):
            p_dst.data = p_src.data.copy()
        for k, (p_src, p_dst) in enumerate(zip(gen_on.dec, gen_off.dec)):
            if k == gen_on.shift_dec_index:
                p_dst.data = p_src.data[:p_dst.data.shape[0]].copy()
            else:
                p_dst.data = p_src.data.copy()
        fwd_on, sample, pyramid = desk_forward(gen_on, seed=9)
        fwd_off = gen_off.forward(sample.masked_input[None], pyramid)
        assert np.array_equal(fwd_on.output.data, fwd_off.output.data)

    def test_slice_zero_shift_ignores_assignment_permutation(self):
        gen = desk_generator(seed=5, slice_zero="shift")
        fwd, sample, pyramid = desk_forward(gen, seed=11)
        permuted = fwd.assignment.permuted(np.random.default_rng(1))
        fwd2 = gen.forward(sample.masked_input[None], pyramid,
                           assignment_override=permuted)
        assert np.array_equal(fwd.output.data, fwd2.output.data)

    def test_without_slice_zero_assignment_matters(self):
        gen = desk_generator(seed=5)
        fwd, sample, pyramid = desk_forward(gen, seed=11)
        rng = np.random.default_rng(2)
        permuted = fwd.assignment.permuted(rng)
        attempts = 0
        while np.array_equal(permuted.source, fwd.assignment.source):
            permuted = fwd.assignment.permuted(rng)
            attempts += 1
            assert attempts < 20
        fwd2 = gen.forward(sample.masked_input[None], pyramid,
                           assignment_override=permuted)
        assert not np.array_equal(fwd.output.data, fwd2.output.data)

    def test_shift_off_differs_only_through_shift_path(self):
        # with the shift slice zeroed the net equals the off net; with the
        # slice live the outputs must genuinely differ
        gen = desk_generator(seed=6)
        gen_zero = desk_generator(seed=6, slice_zero="shift")
        for a, b in zip(gen.parameters(), gen_zero.parameters()):
            b.data = a.data.copy()
        fwd_live, sample, pyramid = desk_forward(gen, seed=13)
        fwd_zero = gen_zero.forward(sample.masked_input[None], pyramid)
        assert not np.array_equal(fwd_live.output.data, fwd_zero.output.data)


class TestDiscriminator:
    def test_paper_scale_output_is_30x30(self):
        disc = build_discriminator(256, 64, rng=np.random.default_rng(0))
        assert disc.output_size == 30

    def test_desk_scale_output_is_2x2(self):
        disc = build_discriminator(32, 8, rng=np.random.default_rng(0))
        out = disc.forward(np.random.default_rng(1).uniform(-1, 1, (1, 3, 32, 32)))
        assert out.data.shape == (1, 1, 2, 2)

    def test_outputs_are_probabilities(self):
        disc = build_discriminator(32, 8, rng=np.random.default_rng(2))
        out = disc.forward(np.random.default_rng(3).uniform(-1, 1, (1, 3, 32, 32))).data
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_too_small_input_raises(self):
        with pytest.raises(ValueError):
            build_discriminator(16, 8)
        with pytest.raises(ValueError):
            build_discriminator(8, 8)

    def test_has_bias_parameters(self):
        disc = build_discriminator(32, 8)
        names = [p.name for p in disc.parameters()]
        assert sum(n.endswith(".bias") for n in names) == 5


class TestCheckpointRoundTrip:
    def test_save_load_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.weight": rng.standard_normal((3, 2)).astype(np.float32),
                   "b.bias": rng.standard_normal(5).astype(np.float32)}
        path = tmp_path / "t.snet"
        checkpoint.save(path, tensors)
        loaded = checkpoint.load(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])
        checkpoint.save(tmp_path / "t2.snet", loaded)
        assert (tmp_path / "t.snet").read_bytes() == (tmp_path / "t2.snet").read_bytes()

    def test_truncated_file_is_distinct_error(self, tmp_path):
        path = tmp_path / "t.snet"
        checkpoint.save(path, {"x": np.zeros(4, dtype=np.float32)})
        blob = path.read_bytes()
        (tmp_path / "bad.snet").write_bytes(blob[:-3])
        with pytest.raises(checkpoint.CheckpointError, match="truncated"):
            checkpoint.load(tmp_path / "bad.snet")

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.snet").write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(checkpoint.CheckpointError, match="magic"):
            checkpoint.load(tmp_path / "bad.snet")

    def test_discriminator_rerun_bit_exact_float32(self, tmp_path):
        rng = np.random.default_rng(4)
        disc = build_discriminator(32, 8, dtype="float32", rng=rng)
        x = rng.uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32)
        out1 = disc.forward(x).data.copy()
        checkpoint.save(tmp_path / "d.snet",
                        {f"D.{n}": p.data for n, p in disc.named_parameters()})
        disc2 = build_discriminator(32, 8, dtype="float32",
                                    rng=np.random.default_rng(99))
        checkpoint.load_into(disc2, checkpoint.load(tmp_path / "d.snet"), "D")
        out2 = disc2.forward(x).data
        assert np.array_equal(out1, out2)

    def test_generator_rebuild_from_meta(self, tmp_path):
        gen = desk_generator(seed=8)
        checkpoint.save_models(tmp_path / "g.snet", gen)
        gen2 = checkpoint.load_generator(tmp_path / "g.snet", dtype="float64")
        assert gen2.cfg.input_size == 32 and gen2.cfg.shift_layer == 2
        fwd1, sample, pyramid = desk_forward(gen, seed=21)
        fwd2 = gen2.forward(sample.masked_input[None], pyramid)
        # float32 storage rounds float64 weights; shapes and wiring must agree
        assert fwd2.output.data.shape == fwd1.output.data.shape
