"""Command-line entry point: preprocess, augment, train, infer, evaluate.

Exit codes: 0 success, 2 configuration errors, 3 data errors,
4 numeric failures.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import crf as crf_mod
from . import dataset as ds
from . import model as model_mod
from . import preprocess as pp
from . import train as train_mod
from .config import PipelineConfig
from .errors import (BadCertainty, BadSpec, BadWidthScale, CmesegError,
                     ConfigError, CorruptCheckpoint, DimsMismatch,
                     EmptyDataset, ExtentMismatch, ImageTooSmall,
                     InputTooSmall, LengthMismatch, MissingMask,
                     NoForwardState, NoRetinaFound, NotNormalized,
                     ShapeMismatch, TooLarge)
from .metrics import build_report
from .ops import Tensor

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (ConfigError, BadSpec, BadWidthScale, BadCertainty)
_DATA_ERRORS = (EmptyDataset, MissingMask, ExtentMismatch, NoRetinaFound,
                ImageTooSmall, DimsMismatch, CorruptCheckpoint,
                LengthMismatch, ShapeMismatch, InputTooSmall, NotNormalized,
                FileNotFoundError)
_NUMERIC_ERRORS = (TooLarge, NoForwardState, FloatingPointError)


class NumericFailure(CmesegError):
    """Non-finite values where finite numbers were required."""


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config \
        else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    samples = ds.load_manifest(args.in_dir)
    out_root = Path(args.out)
    failures = []
    processed = []
    for s in samples:
        try:
            img = pp.denoise(s.load_image(), cfg.denoise)
            cropped, (r0, r1) = pp.crop_retina(img)
            rgb = pp.gray_to_rgb(cropped)
        except (NoRetinaFound, ImageTooSmall) as e:
            failures.append((s.source_key, str(e)))
            continue
        d = out_root / s.patient_id / str(s.slice_index)
        d.mkdir(parents=True, exist_ok=True)
        ds.save_rgb(d / "image.png", rgb)
        ds.save_mask(d / "mask_g1.png", s.load_mask(1)[r0:r1])
        if s.mask_g2_path is not None:
            ds.save_mask(d / "mask_g2.png", s.load_mask(2)[r0:r1])
        (d / "offsets.txt").write_text(f"row_start={r0}\nrow_end={r1}\n")
        processed.append(s.source_key)
    print(f"preprocessed {len(processed)} images -> {out_root}")
    if failures:
        for key, reason in failures:
            print(f"failed {key}: {reason}", file=sys.stderr)
        return EXIT_DATA
    return 0


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    samples = ds.load_manifest(args.in_dir)
    records = ds.augment(samples, cfg.augment)
    out_root = Path(args.out)
    lines = []
    for rec in records:
        img, mask = rec.load_planes()
        d = out_root / rec.source.patient_id / str(rec.index)
        d.mkdir(parents=True, exist_ok=True)
        ds.save_gray(d / "image.png", img)
        ds.save_mask(d / "mask_g1.png", mask)
        lines.append(f"index={rec.index} source={rec.source_key} "
                     f"original={rec.transform is None}")
    (out_root / "provenance.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(records)} augmented samples -> {out_root}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data_root = args.data or cfg.dataset_root
    if not data_root:
        raise ConfigError("no dataset root: pass --data or set "
                          "dataset_root in the config")
    out_root = Path(args.out or cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    samples = ds.load_manifest(data_root)
    records = ds.augment(samples, cfg.augment)
    train_set, val_set = ds.split(records, cfg.val_fraction, cfg.seed)
    if not train_set:
        raise EmptyDataset("training split is empty")
    net = model_mod.build_fcn8(cfg.model.scale(), cfg.model.num_classes,
                               seed=cfg.seed)
    log_path = out_root / "train_log.txt"
    with open(log_path, "w") as log_file:
        def log_fn(line):
            print(line)
            log_file.write(line + "\n")
            log_file.flush()

        result = train_mod.train(net, train_set, val_set, cfg.train,
                                 log_fn=log_fn)
    if not all(np.isfinite(e.train_loss) for e in result.log):
        raise NumericFailure("training loss became non-finite")
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint \
        else out_root / "checkpoint.ckpt"
    model_mod.save_checkpoint(net, ckpt, extras={
        "epoch": result.best_epoch,
        "lr": train_mod.lr_at_epoch(cfg.train, max(result.best_epoch, 0))})
    print(f"saved checkpoint -> {ckpt} (best epoch {result.best_epoch}, "
          f"val dice {result.best_val_dice:.4f})")
    return 0


def _infer_inputs(in_dir):
    """Dataset trees map to mirrored outputs, flat dirs to stem names."""
    root = Path(in_dir)
    tree = sorted(root.glob("*/*/image.png"))
    if tree:
        return [(p, Path(p.parent.parent.name) / p.parent.name / "mask.png",
                 Path(p.parent.parent.name) / p.parent.name / "heatmap.png")
                for p in tree]
    flat = sorted(p for p in root.glob("*.png"))
    if not flat:
        raise EmptyDataset(f"no input images under {root}")
    return [(p, Path(f"{p.stem}_mask.png"), Path(f"{p.stem}_heatmap.png"))
            for p in flat]


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    net = model_mod.build_fcn8(cfg.model.scale(), cfg.model.num_classes,
                               seed=cfg.seed)
    model_mod.load_checkpoint(args.checkpoint, net)
    use_crf = args.crf == "on"
    out_root = Path(args.out)
    for src, mask_rel, heat_rel in _infer_inputs(args.in_dir):
        gray = ds.load_gray(src)
        image = Tensor(pp.gray_to_rgb(gray)[None])
        _, heat = model_mod.forward(net, image)
        if not np.isfinite(heat.data).all():
            raise NumericFailure(f"non-finite heatmap for {src}")
        labeling = np.argmax(heat.data[0], axis=0)
        if use_crf:
            if cfg.soft_unary:
                unary = crf_mod.unary_from_probs(heat)
            else:
                unary = crf_mod.unary_from_labels(
                    labeling, cfg.crf.gt_certainty, cfg.model.num_classes)
            _, labeling = crf_mod.mean_field_infer(unary, cfg.crf, gray)
        out_path = out_root / mask_rel
        out_path.parent.mkdir(parents=True, exist_ok=True)
        ds.save_mask(out_path, (labeling == 1).astype(np.uint8))
        if args.heatmaps:
            ds.save_gray(out_root / heat_rel, heat.data[0, 1])
    print(f"wrote predictions -> {out_root}")
    return 0


def cmd_evaluate(args) -> int:
    truth = ds.load_manifest(args.truth)
    pred_root = Path(args.pred)
    missing = []
    auto, g1, g2, pids, keys = [], [], [], [], []
    for s in truth:
        pred_path = pred_root / s.patient_id / str(s.slice_index) / "mask.png"
        if not pred_path.is_file():
            missing.append(str(pred_path))
            continue
        auto.append(ds.load_mask(pred_path))
        g1.append(s.load_mask(1))
        g2.append(s.load_mask(2) if s.mask_g2_path is not None else None)
        pids.append(s.patient_id)
        keys.append(str(s.slice_index))
    if missing:
        for m in missing:
            print(f"missing prediction: {m}", file=sys.stderr)
        return EXIT_DATA
    grader2 = g2 if all(m is not None for m in g2) and g2 else None
    report = build_report(auto, g1, pids, grader2_masks=grader2,
                          image_keys=keys)
    text = report.to_text()
    Path(args.out).write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmeseg",
        description="Retinal-OCT edema segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="JSON pipeline config")
        if seed:
            p.add_argument("--seed", type=int,
                           help="override the config seed")

    p = sub.add_parser("preprocess", help="denoise, crop, and RGB-stack a "
                                          "dataset tree")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("augment", help="materialize the augmented dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("train", help="train and write the best checkpoint")
    p.add_argument("--data", help="preprocessed dataset root")
    p.add_argument("--out", help="output directory")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crf", choices=("on", "off"), default="off")
    p.add_argument("--heatmaps", action="store_true",
                   help="also write probability heatmaps")
    common(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against a "
                                        "dataset tree")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    common(p, config=False, seed=False)
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _CONFIG_ERRORS as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure,) + _NUMERIC_ERRORS as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
