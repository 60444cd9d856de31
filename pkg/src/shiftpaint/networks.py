"""Generator and discriminator assembly.

The generator is a U-Net built entirely from 4x4 stride-2 (de)convolutions:
an encoder halving the resolution down to a 1x1 bottleneck and a mirrored
decoder with channelwise skip concatenations. One decoder layer is tapped:
its feature map guides a nearest-neighbor search over the matching encoder
map, and the rearranged encoder feature joins the decoder/skip slices as a
third input to the next layer. Encoder/decoder layers carry no biases and
instance normalization everywhere except the bottleneck (a 1x1 activation
map would be zeroed) and the outermost layers.

The discriminator is a five-conv patch classifier with a sigmoid map output
(30x30 at 256 input).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .shift import apply_shift, nn_search, random_assignment

SHIFT_MODES = ("nearest", "random", "off")
SLICE_ZERO = ("none", "decoder", "encoder", "shift")

INIT_STD = 0.02


@dataclass
class GeneratorConfig:
    """Scalable shape of the generator; defaults are the desk scale."""

    input_size: int = 32
    depth: int = 5
    base_channels: int = 8
    shift_layer: int = 2
    shift_mode: str = "nearest"
    slice_zero: str = "none"
    threshold: float = 5.0 / 16.0
    dtype: str = "float64"

    def validate(self):
        if self.input_size < 16 or self.input_size & (self.input_size - 1):
            raise ValueError(f"input_size must be a power of two >= 16, got {self.input_size}")
        if (1 << self.depth) != self.input_size:
            raise ValueError(
                f"depth {self.depth} does not reach a 1x1 bottleneck from {self.input_size}"
            )
        if not 1 <= self.shift_layer < self.depth:
            raise ValueError(f"shift_layer must be in [1, {self.depth - 1}]")
        if self.shift_mode not in SHIFT_MODES:
            raise ValueError(f"shift_mode must be one of {SHIFT_MODES}")
        if self.slice_zero not in SLICE_ZERO:
            raise ValueError(f"slice_zero must be one of {SLICE_ZERO}")
        if self.slice_zero == "shift" and self.shift_mode == "off":
            raise ValueError("slice_zero='shift' needs the shift slice present")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def channels(self):
        """Encoder channel ladder: doubling from the base, capped at 8x base."""
        cap = 8 * self.base_channels
        return [min(self.base_channels << k, cap) for k in range(self.depth)]


@dataclass
class GeneratorOutput:
    """Final image plus the feature taps around the shift layer."""

    output: ad.Tensor
    dec_feat: ad.Tensor
    enc_feat: ad.Tensor
    shifted: ad.Tensor | None
    gt_enc_feat: ad.Tensor | None
    assignment: object | None


def _gaussian(rng, shape, dtype):
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


class Generator:
    """U-Net with the shift connection; biases are structurally absent."""

    def __init__(self, cfg, rng=None):
        cfg = replace(cfg).validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = cfg.np_dtype
        chans = cfg.channels()
        depth = cfg.depth
        shift_on = cfg.shift_mode != "off"

        self.enc = []
        in_c = 3
        for i, out_c in enumerate(chans):
            self.enc.append(Parameter(_gaussian(rng, (out_c, in_c, 4, 4), dt),
                                      name=f"enc{i + 1}.weight"))
            in_c = out_c

        # decoder layer k mirrors encoder layer depth-k; the layer right
        # after the shift tap sees three slices instead of two
        self.dec = []
        shift_k = depth - cfg.shift_layer
        in_c = chans[-1]
        for k in range(1, depth + 1):
            out_c = chans[depth - 1 - k] if k < depth else 3
            self.dec.append(Parameter(_gaussian(rng, (in_c, out_c, 4, 4), dt),
                                      name=f"dec{k}.weight"))
            if k < depth:
                skip_c = chans[depth - 1 - k]
                in_c = out_c + skip_c
                if k == shift_k and shift_on:
                    in_c += skip_c
        self.shift_dec_index = shift_k

        if cfg.slice_zero != "none":
            c_l = chans[cfg.shift_layer - 1]
            consumer = self.dec[shift_k]  # weight of the layer after the tap
            n_in = consumer.data.shape[0]
            mask = np.ones((n_in, 1, 1, 1), dtype=dt)
            start = {"decoder": 0, "encoder": c_l, "shift": 2 * c_l}[cfg.slice_zero]
            mask[start:start + c_l] = 0.0
            self._slice_mask = mask
        else:
            self._slice_mask = None

    def parameters(self):
        return self.enc + self.dec

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _encode(self, x, upto=None):
        """Encoder stack: returns per-layer outputs (post-normalization)."""
        depth = self.cfg.depth
        upto = depth if upto is None else upto
        feats = []
        h = x
        for i in range(upto):
            if i > 0:
                h = ad.leaky_relu(h, 0.2)
            h = ad.conv2d(h, self.enc[i].t, stride=2, pad=1)
            if 0 < i < depth - 1:
                h = ad.instance_norm(h)
            feats.append(h)
        return feats

    def encode_to(self, level, image):
        """Encoder feature of ``image`` at the given layer (1-based)."""
        if not 1 <= level <= self.cfg.depth:
            raise ValueError(f"encoder has {self.cfg.depth} layers, asked for {level}")
        return self._encode(image, upto=level)[-1]

    def forward(self, masked_image, pyramid, gt_image=None, rng=None,
                assignment_override=None):
        """Run the net; returns the image and the shift-layer taps.

        ``gt_image``, when given, is pushed through the encoder with no tape
        recording to produce the target feature for the guidance loss.
        ``assignment_override`` freezes the rearrangement (gradient checks,
        ablations); ``rng`` drives the random-source mode.
        """
        cfg = self.cfg
        x = masked_image if isinstance(masked_image, ad.Tensor) else ad.constant(masked_image)
        if x.data.ndim != 4 or x.data.shape[1] != 3 or x.data.shape[2] != cfg.input_size:
            raise ValueError(f"expected (N,3,{cfg.input_size},{cfg.input_size}) input, "
                             f"got {x.data.shape}")

        gt_feat = None
        if gt_image is not None:
            gt_t = gt_image if isinstance(gt_image, ad.Tensor) else ad.constant(gt_image)
            with ad.no_grad():
                gt_feat = self.encode_to(cfg.shift_layer, gt_t.detach())

        encs = self._encode(x)
        depth = cfg.depth
        level = pyramid.level(cfg.shift_layer)

        dec_tap = enc_tap = shifted = None
        assignment = None
        state = ad.relu(encs[-1])
        for k in range(1, depth + 1):
            w = self.dec[k - 1].t
            if k - 1 == self.shift_dec_index and self._slice_mask is not None:
                w = ad.mask_mul(w, self._slice_mask)
            if k == depth:
                state = ad.relu(state)
                out = ad.tanh(ad.conv2d_transpose(state, w, stride=2, pad=1))
                break
            y = ad.instance_norm(ad.conv2d_transpose(state, w, stride=2, pad=1))
            skip = encs[depth - 1 - k]
            if k == self.shift_dec_index:
                dec_tap, enc_tap = y, skip
                parts = [y, skip]
                if cfg.shift_mode != "off":
                    if assignment_override is not None:
                        assignment = assignment_override
                    elif cfg.shift_mode == "random":
                        if rng is None:
                            raise ValueError("shift_mode='random' needs an rng")
                        assignment = random_assignment(pyramid.require_known(cfg.shift_layer), rng)
                    elif level.missing_count:
                        pyramid.require_known(cfg.shift_layer)
                        assignment = nn_search(y.data[0], skip.data[0], level)
                    if assignment is not None:
                        shifted = apply_shift(skip, assignment)
                    else:
                        shifted = skip  # nothing missing: the identity shift
                    parts.append(shifted)
                cat = ad.concat_channels(parts)
            else:
                cat = ad.concat_channels([y, skip])
            state = cat if k == 1 else ad.relu(cat)

        return GeneratorOutput(output=out, dec_feat=dec_tap, enc_feat=enc_tap,
                               shifted=shifted, gt_enc_feat=gt_feat,
                               assignment=assignment)


def build_generator(cfg, rng=None):
    return Generator(cfg, rng=rng)


class Discriminator:
    """Patch classifier: three stride-2 convs, two stride-1, sigmoid map."""

    def __init__(self, input_size, base_channels=64, dtype="float64", rng=None):
        if input_size < 16:
            raise ValueError(f"input_size must be >= 16, got {input_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = np.float32 if dtype == "float32" else np.float64
        self.input_size = input_size
        self.base_channels = base_channels
        self.dtype = dtype

        plan = [
            (base_channels, 2), (base_channels * 2, 2), (base_channels * 4, 2),
            (base_channels * 8, 1), (1, 1),
        ]
        size = input_size
        self.weights, self.biases, self.strides = [], [], []
        in_c = 3
        for i, (out_c, stride) in enumerate(plan):
            size = (size + 2 - 4) // stride + 1
            if size < 1:
                raise ValueError(f"input_size {input_size} collapses at conv {i + 1}")
            self.weights.append(Parameter(_gaussian(rng, (out_c, in_c, 4, 4), dt),
                                          name=f"conv{i + 1}.weight"))
            self.biases.append(Parameter(np.zeros(out_c, dtype=dt),
                                         name=f"conv{i + 1}.bias"))
            self.strides.append(stride)
            in_c = out_c
        self.output_size = size

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, image):
        x = image if isinstance(image, ad.Tensor) else ad.constant(image)
        if x.data.shape[2] != self.input_size:
            raise ValueError(f"discriminator built for {self.input_size}, got {x.data.shape}")
        h = x
        for i in range(5):
            h = ad.conv2d(h, self.weights[i].t, stride=self.strides[i], pad=1,
                          bias=self.biases[i].t)
            if i == 4:
                return ad.sigmoid(h)
            if i > 0:
                h = ad.instance_norm(h)
            h = ad.leaky_relu(h, 0.2)


def build_discriminator(input_size, base_channels=64, dtype="float64", rng=None):
    return Discriminator(input_size, base_channels, dtype=dtype, rng=rng)
