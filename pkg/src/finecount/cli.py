"""Command-line entry point: synth data, ground truth, training, evaluation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import mapio, viz
from .annotations import (DotAnnotation, ManifestError, Sample,
                          average_image, dataset_stats, load_image,
                          load_manifest, spatial_probability_maps)
from .groundtruth import (KernelSpec, downsample_segmentation,
                          make_segmentation_maps, render_category_densities,
                          downsample_density)
from .synthgen import SceneGenerationError, SceneRanges, generate_manifest
from .training import (Checkpoint, NonFiniteLossError, TrainConfig, evaluate,
                       predictions_for_sample, sample_targets, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kernel_from_args(args) -> KernelSpec:
    mode = "adaptive" if getattr(args, "adaptive", False) else "fixed"
    sigma = args.sigma if getattr(args, "sigma", None) is not None else 4.0
    return KernelSpec(mode=mode, sigma=sigma)


def _build_parser() -> _Parser:
    parser = _Parser(prog="finecount",
                     description="category-aware crowd counting toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, default=[128, 128],
                   metavar=("H", "W"))
    p.add_argument("--n-queue", type=int, nargs=2, default=[3, 7],
                   metavar=("LO", "HI"))
    p.add_argument("--n-walkers", type=int, nargs=2, default=[3, 7],
                   metavar=("LO", "HI"))
    p.add_argument("--spacing", type=float, nargs=2, default=[9.0, 12.0],
                   metavar=("LO", "HI"))
    p.add_argument("--blob-radius", type=float, nargs=2, default=[2.5, 3.5],
                   metavar=("LO", "HI"))
    p.add_argument("--noise", type=float, nargs=2, default=[0.02, 0.05],
                   metavar=("LO", "HI"))

    p = sub.add_parser("make-gt", help="export density and segmentation maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--eta", type=float, default=1e-6)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="TrainConfig JSON file")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lambda", dest="dampening", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--propagation", choices=["hourglass", "gcn", "none"],
                   default=None)
    p.add_argument("--attention", choices=["coatt", "naive", "none"],
                   default=None)
    p.add_argument("--model", choices=["ours", "onenet", "twonets", "segment"],
                   default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--adaptive", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="write the report JSON here")

    p = sub.add_parser("predict", help="run inference on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("visualize", help="render prediction overlay panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=8)

    p = sub.add_parser("stats", help="dataset statistics and analysis maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, nargs=2, default=[64, 64],
                   metavar=("H", "W"))
    return parser


def cmd_gen_synth(args) -> list[Path]:
    ranges = SceneRanges(size=tuple(args.size),
                         n_queue=tuple(args.n_queue),
                         n_walkers=tuple(args.n_walkers),
                         queue_spacing=tuple(args.spacing),
                         blob_radius=tuple(args.blob_radius),
                         noise_level=tuple(args.noise))
    out = Path(args.out)
    generate_manifest(args.n_train, args.n_test, ranges, args.seed, out_dir=out)
    return [out / "train.json", out / "test.json"]


def cmd_make_gt(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    out = mapio.ensure_dir(args.out)
    kernel = _kernel_from_args(args)
    written = []
    for sample in manifest.samples:
        dens = render_category_densities(sample.annotation, kernel)
        seg = make_segmentation_maps(list(dens), epsilon=args.epsilon,
                                     eta=args.eta)
        if args.stride > 1:
            total = dens.sum(axis=0)
            seg = downsample_segmentation(seg, args.stride, total,
                                          epsilon=args.epsilon)
            dens = downsample_density(dens, args.stride)
        for j in range(manifest.k):
            path = out / f"{sample.id}_density_{j + 1}.map"
            mapio.write_map(path, dens[j])
            written.append(path)
        path = out / f"{sample.id}_segmentation.map"
        mapio.write_map(path, seg)
        written.append(path)
    return written


def _load_train_config(args) -> TrainConfig:
    if args.config:
        config = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        config = TrainConfig()
    overrides = {"learning_rate": args.lr, "steps": args.steps,
                 "dampening": args.dampening, "epsilon": args.epsilon,
                 "eta": args.eta, "alpha": args.alpha, "beta": args.beta,
                 "iterations": args.iterations, "propagation": args.propagation,
                 "attention": args.attention, "model": args.model,
                 "seed": args.seed, "crop": args.crop,
                 "checkpoint_every": args.checkpoint_every}
    merged = config.to_dict()
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if args.sigma is not None or args.adaptive:
        merged["kernel"] = _kernel_from_args(args).to_dict()
    return TrainConfig.from_dict(merged)


def cmd_train(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    config = _load_train_config(args)
    out = mapio.ensure_dir(args.out)
    ckpt_path = out / "checkpoint.ckpt"
    log_path = out / "train_log.csv"
    result = train(manifest, config, checkpoint_path=ckpt_path,
                   log_path=log_path)
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config.to_dict(), indent=1))
    last = result.log[-1]
    print(f"step {last['step']}: total {last['total']:.4f} "
          f"(counting {last['counting']:.4f}, segmentation "
          f"{last['segmentation']:.4f}, fine-grained {last['fine_grained']:.4f})")
    return [ckpt_path, log_path, config_path]


def cmd_eval(args) -> list[Path]:
    checkpoint = Checkpoint.load(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = evaluate(checkpoint, manifest)
    print(report.table())
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=1))
        return [path]
    return []


def cmd_predict(args) -> list[Path]:
    checkpoint = Checkpoint.load(args.checkpoint)
    model = checkpoint.build_model()
    model.eval()
    image = load_image(args.image)
    ann = DotAnnotation.from_points([], image.shape[:2], checkpoint.arch.k)
    sample = Sample(id=Path(args.image).stem, image=image, annotation=ann)
    fine, density, seg = predictions_for_sample(model, sample,
                                                checkpoint.config)
    out = mapio.ensure_dir(args.out)
    written = []
    path = out / "overall_density.map"
    mapio.write_map(path, density)
    written.append(path)
    if seg is not None:
        path = out / "segmentation.map"
        mapio.write_map(path, seg)
        written.append(path)
    for j in range(checkpoint.arch.k):
        path = out / f"category_{j + 1}_density.map"
        mapio.write_map(path, fine[j])
        written.append(path)
    counts = ", ".join(f"cat {j + 1}: {fine[j].sum():.2f}"
                       for j in range(checkpoint.arch.k))
    print(f"overall: {density.sum():.2f} ({counts})")
    return written


def cmd_visualize(args) -> list[Path]:
    checkpoint = Checkpoint.load(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if manifest.k != checkpoint.arch.k:
        raise ManifestError(f"checkpoint has k={checkpoint.arch.k} but "
                            f"manifest has k={manifest.k}")
    model = checkpoint.build_model()
    model.eval()
    out = mapio.ensure_dir(args.out)
    written = []
    for sample in manifest.samples[:args.limit]:
        fine, density, seg = predictions_for_sample(model, sample,
                                                    checkpoint.config)
        gt_fine, _, _ = sample_targets(sample, checkpoint.config)
        panel = viz.comparison_panel(sample.image, gt_fine, fine, seg)
        path = out / f"{sample.id}_panel.png"
        panel.save(path)
        written.append(path)
    return written


def cmd_stats(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    out = mapio.ensure_dir(args.out)
    report = dataset_stats(manifest)
    print(f"images        {report.n_images}")
    print(f"counts        min {report.min_count}  avg {report.avg_count:.2f}  "
          f"max {report.max_count}  total {report.total_count}")
    shares = ", ".join(f"{name} {share:.1f}%" for name, share in
                       zip(manifest.category_names, report.category_shares))
    print(f"class shares  {shares}")
    print(f"avg res       {report.avg_resolution[0]:.0f}x"
          f"{report.avg_resolution[1]:.0f}")
    written = [out / "stats.json"]
    written[0].write_text(json.dumps(report.to_dict(), indent=1))
    maps, log_ratio = spatial_probability_maps(manifest, tuple(args.grid))
    for j in range(manifest.k):
        path = out / f"probability_cat{j + 1}.png"
        viz.grayscale_png(maps[j], path)
        written.append(path)
    if log_ratio is not None:
        path = out / "log_ratio.png"
        viz.diverging_png(log_ratio, path)
        written.append(path)
    avg = average_image(manifest, tuple(args.grid))
    path = out / "average_image.png"
    viz.grayscale_png(avg if avg.ndim == 2 else avg.mean(axis=2), path)
    written.append(path)
    return written


_HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "make-gt": cmd_make_gt,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "visualize": cmd_visualize,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        written = _HANDLERS[args.command](args)
    except (ManifestError, SceneGenerationError, FileNotFoundError,
            json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NonFiniteLossError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
