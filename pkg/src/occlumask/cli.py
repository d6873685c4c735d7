"""Command line interface.

Exit codes: 0 success, 1 configuration / usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import get_policy
from .detections import (
    DEFAULT_CATEGORIES,
    DEFAULT_MIN_SCORE,
    Detection,
    DetectionParseError,
    DetectionSet,
    filter_occluders,
    load_detections,
    rescale,
    serialize_detections,
)
from .harness.data import augment_samples, read_dataset, write_dataset
from .harness.experiment import (
    ConfigError,
    ExperimentConfig,
    load_sprites,
    parse_sweep_values,
    run_eval,
    sweep,
)
from .harness.synthetic import generate_synthetic_landmarks
from .harness.tables import pivot_backbone, pivot_detector, pivot_mask_ratio, render_aligned
from .head import TrainConfig, save_head, train_head
from .imagecore import DecodeError, resize
from .occlusion import DEFAULT_MASK_RATIO, PatchGrid, mask_for
from .sprites import builtin_sprites
from .tensorio import ContainerError, read_features, write_features
from .vit import WeightsError, extract, init_weights, load_weights, preset, save_weights

logger = logging.getLogger("occlumask")

SWEEP_DEFAULTS = {
    "mask_ratio": "30,50,70,100",
    "backbone": "toy-s,toy-b,toy-l",
    "detector_source": "oracle,oracle-box,degraded",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _categories(text: str) -> tuple[str, ...]:
    return tuple(c.strip() for c in text.split(",") if c.strip())


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["output_dir"] = args.out
    return cfg.replace(**overrides) if overrides else cfg


def _write(out_dir, name: str, text: str):
    if out_dir is None:
        return
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / name).write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_gen_synthetic(args):
    seed = 0 if args.seed is None else args.seed
    _, samples = generate_synthetic_landmarks(args.classes, args.train_per_class,
                                              args.test_per_class, args.image_size, seed)
    manifest = write_dataset(args.out, samples)
    print(f"wrote {manifest.count('train')} train / {manifest.count('test')} test images to {args.out}")


def cmd_gen_augmented(args):
    policy = get_policy(args.policy)
    sprites = load_sprites(args.sprites) if args.sprites else builtin_sprites(policy.sprite_kind)
    base = read_dataset(args.data, split=args.split)
    seed = 0 if args.seed is None else args.seed
    variants = augment_samples(base, sprites, policy, seed, args.threads or 1)
    write_dataset(args.out, variants)
    root = Path(args.out).resolve()
    combined = {}
    for s in variants:
        items = tuple(
            Detection(det.category, det.score, det.box,
                      mask_path=str(root / f"masks/{s.image_id}_{j}.pgm") if det.mask is not None else None)
            for j, det in enumerate(s.groundtruth.items)
        )
        combined[s.image_id] = DetectionSet(s.groundtruth.source_width, s.groundtruth.source_height, items)
    (root / "detections.json").write_bytes(serialize_detections(combined, relative_to=str(root)))
    print(f"wrote {len(variants)} {policy.name} variants of {len(base)} images to {args.out}")


def _vit(args):
    cfg = preset(args.backbone, args.image_size)
    if args.weights:
        with open(args.weights, "rb") as fh:
            return cfg, load_weights(fh.read(), cfg)
    return cfg, init_weights(cfg, 0 if args.seed is None else args.seed)


def cmd_extract_features(args):
    if args.out is None:
        raise ConfigError("--out is required")
    cfg, weights = _vit(args)
    if args.save_weights:
        Path(args.save_weights).write_bytes(save_weights(weights))
    samples = read_dataset(args.data, split=args.split)
    detections = load_detections(args.detections) if args.detections else {}
    grid = cfg.grid
    feats = []
    masked_total = 0
    for s in samples:
        keep = None
        if args.detections:
            ds = detections.get(s.image_id)
            if ds is not None:
                ds = rescale(filter_occluders(ds, _categories(args.categories), args.min_score),
                             grid.image_w, grid.image_h)
                _, masked = mask_for(ds, grid, args.mask_ratio, not args.boxes_only)
                masked_total += len(masked)
                keep = masked.keep(grid.num_patches) if len(masked) else None
        feats.append(extract(resize(s.image, cfg.image_size, cfg.image_size), keep, weights, cfg))
    labels = np.array([s.label for s in samples])
    Path(args.out).write_bytes(write_features(np.stack(feats), labels))
    print(f"wrote {len(samples)} x {cfg.embed_dim} features to {args.out} "
          f"({masked_total} patches dropped)")


def cmd_train_head(args):
    if args.out is None:
        raise ConfigError("--out is required")
    feats, labels = read_features(Path(args.features).read_bytes())
    k = args.classes or int(labels.max()) + 1
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.momentum,
                      0 if args.seed is None else args.seed)
    history = []
    head = train_head(feats, labels, k, cfg, history)
    Path(args.out).write_bytes(save_head(head))
    print(f"trained {k}-class head on {len(labels)} samples; final loss {history[-1]:.4f}")


def cmd_eval(args):
    cfg = _load_config(args)
    table = run_eval(cfg)
    text = table.render_text()
    _write(cfg.output_dir, "eval.tsv", table.to_tsv())
    _write(cfg.output_dir, "eval.txt", text)
    sys.stdout.write(text)
    if "missing_detections" in table.notes:
        print(f"images without detections: {table.notes['missing_detections']}")


def cmd_sweep(args):
    cfg = _load_config(args)
    values = parse_sweep_values(args.dimension, args.values or SWEEP_DEFAULTS[args.dimension])
    table = sweep(cfg, args.dimension, values)
    if args.dimension == "mask_ratio":
        header, body = pivot_mask_ratio(table, values)
    elif args.dimension == "backbone":
        header, body = pivot_backbone(table, values)
    else:
        header, body = pivot_detector(table, values)
    wide = render_aligned(header, body)
    _write(cfg.output_dir, f"sweep_{args.dimension}.tsv", table.to_tsv())
    _write(cfg.output_dir, f"sweep_{args.dimension}.txt", wide)
    sys.stdout.write(wide)


def cmd_mask(args):
    grid = PatchGrid(args.image_size, args.image_size, args.patch)
    sets = load_detections(args.detections)
    lines = []
    for image_id, ds in sets.items():
        ds = rescale(filter_occluders(ds, _categories(args.categories), args.min_score),
                     grid.image_w, grid.image_h)
        cov, masked = mask_for(ds, grid, args.mask_ratio, not args.boxes_only)
        lines.append(json.dumps({
            "image_id": image_id,
            "mask_ratio": args.mask_ratio,
            "masked_indices": list(masked.indices),
            "coverage": cov.covered.tolist(),
        }))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    masking = argparse.ArgumentParser(add_help=False)
    masking.add_argument("--mask-ratio", type=int, default=DEFAULT_MASK_RATIO)
    masking.add_argument("--categories", default=",".join(sorted(DEFAULT_CATEGORIES)))
    masking.add_argument("--min-score", type=float, default=DEFAULT_MIN_SCORE)
    masking.add_argument("--boxes-only", action="store_true",
                         help="ignore instance masks and rasterize boxes")

    backbone = argparse.ArgumentParser(add_help=False)
    backbone.add_argument("--backbone", default="toy")
    backbone.add_argument("--image-size", type=int, default=None)
    backbone.add_argument("--weights", default=None, help="VITW weights file")

    parser = _Parser(prog="occlumask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", parents=[common], help="render a synthetic landmark set")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--train-per-class", type=int, default=40)
    p.add_argument("--test-per-class", type=int, default=10)
    p.add_argument("--image-size", type=int, default=112)
    p.set_defaults(func=cmd_gen_synthetic, needs_out=True)

    p = sub.add_parser("gen-augmented", parents=[common], help="composite occluders onto a set")
    p.add_argument("--data", required=True, help="base dataset directory")
    p.add_argument("--split", default="test")
    p.add_argument("--policy", default="augmented1", choices=["augmented1", "augmented2"])
    p.add_argument("--sprites", default=None, help="directory with 20 .pam sprites")
    p.set_defaults(func=cmd_gen_augmented, needs_out=True)

    p = sub.add_parser("extract-features", parents=[common, backbone, masking],
                       help="backbone features to a FEAT file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--detections", default=None, help="detections JSON; enables masking")
    p.add_argument("--save-weights", default=None, help="also write the weights used")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train-head", parents=[common], help="train a linear head on FEAT")
    p.add_argument("--features", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("eval", parents=[common], help="masked vs unmasked evaluation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="sweep one experiment dimension")
    p.add_argument("dimension", choices=sorted(SWEEP_DEFAULTS))
    p.add_argument("values", nargs="?", default=None, help="comma separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mask", parents=[common, masking], help="per-image patch masks as JSON lines")
    p.add_argument("--detections", required=True)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--patch", type=int, default=16)
    p.set_defaults(func=cmd_mask)
    return parser


DATA_ERRORS = (DecodeError, DetectionParseError, ContainerError, WeightsError, OSError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "needs_out", False) and args.out is None:
        parser.error("--out is required")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
