"""Command-line surface: train, inpaint, evaluate, visualize, bench,
gradcheck, toydata.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint, gradcheck, metrics
from .config import dump_config, load_run_config
from .data import generate_toy_dataset, scan_dataset
from .masks import propagate_mask
from .networks import build_discriminator, build_generator
from .ppm import read_mask_ppm, read_ppm, to_pixels, to_tensor, to_unit, write_ppm
from .training import composite, make_central_mask, prepare_input, train


def _add_overrides(parser):
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threshold-T", dest="threshold_T", default=None)
    parser.add_argument("--shift-mode", dest="shift_mode", default=None,
                        choices=["nearest", "random", "off"])
    parser.add_argument("--slice-zero", dest="slice_zero", default=None,
                        choices=["none", "decoder", "encoder", "shift"])
    parser.add_argument("--lambda-g", dest="lambda_g", default=None)
    parser.add_argument("--lambda-adv", dest="lambda_adv", default=None)


def _overrides(args):
    keys = ("seed", "threshold_T", "shift_mode", "slice_zero", "lambda_g", "lambda_adv")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def build_parser():
    parser = argparse.ArgumentParser(prog="shiftpaint",
                                     description="inpainting via learned feature shifting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a directory of PPM images")
    p.add_argument("config", help="key = value config file")
    _add_overrides(p)

    p = sub.add_parser("inpaint", help="fill the masked region of one image")
    p.add_argument("ckpt")
    p.add_argument("image")
    p.add_argument("mask")
    p.add_argument("out")

    p = sub.add_parser("evaluate", help="metrics over a directory of images")
    p.add_argument("ckpt")
    p.add_argument("dir")
    p.add_argument("--csv", default=None, help="write per-image metrics here")
    _add_overrides(p)

    p = sub.add_parser("visualize", help="reconstruct images from feature targets")
    p.add_argument("ckpt")
    p.add_argument("image")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--iters", type=int, default=300)

    p = sub.add_parser("bench", help="time generator forward passes")
    p.add_argument("ckpt")
    p.add_argument("--runs", type=int, default=5)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)

    p = sub.add_parser("toydata", help="generate the synthetic desk corpus")
    p.add_argument("dir")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_train(args):
    cfg = load_run_config(args.config, _overrides(args))
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump_config(cfg))
    dataset = scan_dataset(cfg.data_dir)
    rng = np.random.default_rng(cfg.seed)
    generator = build_generator(cfg.generator_config(), rng=rng)
    discriminator = build_discriminator(cfg.crop_size, cfg.disc_base_channels,
                                        dtype=cfg.dtype, rng=rng)
    steps = train(generator, discriminator, dataset, cfg.train_config(), out_dir)
    print(f"trained {steps} steps; checkpoints in {out_dir / 'ckpt'}")
    return 0


def _load_sample(generator, image_path, mask):
    gt = to_tensor(read_ppm(image_path)).astype(generator.cfg.np_dtype)
    if gt.shape[1] != generator.cfg.input_size or gt.shape[2] != generator.cfg.input_size:
        raise ValueError(f"image is {gt.shape[2]}x{gt.shape[1]}, generator wants "
                         f"{generator.cfg.input_size}")
    return prepare_input(gt, mask)


def _run_generator(generator, sample):
    pyramid = propagate_mask(sample.mask, generator.cfg.shift_layer,
                             generator.cfg.threshold)
    with ad.no_grad():
        fwd = generator.forward(sample.masked_input[None], pyramid)
    return fwd, pyramid


def _cmd_inpaint(args):
    generator = checkpoint.load_generator(args.ckpt)
    mask = read_mask_ppm(args.mask)
    sample = _load_sample(generator, args.image, mask)
    fwd, _ = _run_generator(generator, sample)
    result = composite(fwd.output.data[0], sample)
    write_ppm(args.out, to_pixels(result))
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args):
    generator = checkpoint.load_generator(args.ckpt)
    if args.threshold_T is not None:
        generator.cfg.threshold = float(args.threshold_T)
    dataset = scan_dataset(args.dir, split="heldout")
    rows = []
    reports = []
    for path in dataset.paths:
        mask = make_central_mask(generator.cfg.input_size)
        sample = _load_sample(generator, path, mask)
        fwd, _ = _run_generator(generator, sample)
        result = composite(fwd.output.data[0], sample)
        rep = metrics.metric_report(to_unit(result), to_unit(sample.gt_image))
        reports.append(rep)
        rows.append(rep.csv_row(Path(path).name))
        print(rows[-1])
    mean = metrics.MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        mean_l2=float(np.mean([r.mean_l2 for r in reports])))
    rows.append(mean.csv_row("mean"))
    print(rows[-1])
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(metrics.CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    return 0


def _cmd_visualize(args):
    generator = checkpoint.load_generator(args.ckpt)
    level = generator.cfg.shift_layer
    mask = make_central_mask(generator.cfg.input_size)
    sample = _load_sample(generator, args.image, mask)
    pyramid = propagate_mask(sample.mask, level, generator.cfg.threshold)
    missing = pyramid.level(level).missing
    shape = (1, 3, generator.cfg.input_size, generator.cfg.input_size)

    def encode(img_t):
        return generator.encode_to(level, img_t)

    with ad.no_grad():
        gt_target = encode(ad.constant(sample.gt_image[None])).data
        fwd = generator.forward(sample.masked_input[None], pyramid)
    dec_target = fwd.dec_feat.data

    out_dir = Path(args.out_dir)
    stem = Path(args.image).stem
    for tag, target in (("hgt", gt_target), ("hde", dec_target)):
        img = metrics.invert_feature(encode, target, missing, shape,
                                     iters=args.iters)
        write_ppm(out_dir / f"{stem}_{tag}.ppm", to_pixels(img[0]))
        print(f"wrote {out_dir / f'{stem}_{tag}.ppm'}")
    return 0


def _cmd_bench(args):
    generator = checkpoint.load_generator(args.ckpt)
    ms = metrics.bench_inference(generator, n_runs=args.runs)
    print(f"median forward pass: {ms:.2f} ms over {args.runs} runs "
          f"({generator.cfg.input_size}x{generator.cfg.input_size})")
    return 0


def _cmd_gradcheck(args):
    results = gradcheck.run_suite(seeds=args.seeds, log=print)
    ok = gradcheck.suite_passed(results)
    print(f"{sum(r.ok for r in results)}/{len(results)} gradient checks passed")
    return 0 if ok else 1


def _cmd_toydata(args):
    index = generate_toy_dataset(args.dir, n=args.count, size=args.size,
                                 seed=args.seed)
    print(f"wrote {len(index)} images to {args.dir}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "inpaint": _cmd_inpaint,
    "evaluate": _cmd_evaluate,
    "visualize": _cmd_visualize,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
    "toydata": _cmd_toydata,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
