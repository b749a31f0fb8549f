"""Command-line surface: gen / train / eval / infer / metrics."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (apply_ablations, default_run_config, load_run_config,
                     model_config_from_run)
from .data import (fit_to_size, gen_synthetic, list_dataset, load_image,
                   load_mask, load_pair, save_mask, _resize_image)
from .errors import MaGuPError
from .metrics import evaluate_dataset
from .model import SegModel, evaluate_model, train_stage


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magup",
        description="Weak-boundary segmentation: synthetic data, two-stage "
        "training, inference, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, help="override sample count")
    p.add_argument("--size", type=int, help="override image size")
    p.add_argument("--seed", type=int, help="override generator seed")

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--init", help="checkpoint to continue from")
    p.add_argument("--ablate", default="",
                   help="comma-separated: msd,1dmamba,2dmamba,bdc")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--lr", type=float, help="override learning rate")
    p.add_argument("--seed", type=int, help="override training seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", help="also write the report as CSV")

    p = sub.add_parser("infer", help="segment one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG")

    p = sub.add_parser("metrics", help="score a directory of predictions")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--csv", help="also write the report as CSV")
    return parser


def _load_config(path):
    return load_run_config(path) if path else default_run_config()


def _run_gen(args) -> None:
    cfg = _load_config(args.config).synth
    if args.count is not None:
        cfg.count = args.count
    if args.size is not None:
        cfg.image_size = args.size
    if args.seed is not None:
        cfg.seed = args.seed
    records = gen_synthetic(cfg, args.out)
    print(f"wrote {len(records)} image/mask pairs under {args.out}")


def _run_train(args) -> None:
    cfg = _load_config(args.config)
    names = [s.strip() for s in args.ablate.split(",") if s.strip()]
    if names:
        apply_ablations(cfg, names)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.lr is not None:
        cfg.train.lr = args.lr
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.train.stage = args.stage
    samples = [load_pair(r) for r in list_dataset(args.data)]
    if args.init:
        model, _ = load_checkpoint(args.init)
    else:
        model = SegModel(model_config_from_run(cfg))
    history = train_stage(model, samples, cfg.train)
    save_checkpoint(model, args.out)
    # 17 significant digits round-trip a double exactly, so two runs match
    # on this line if and only if their final losses are bit-equal
    print(
        f"stage {args.stage}: {len(history['losses'])} steps, "
        f"final loss {history['final_loss']:.17g}; wrote {args.out}"
    )


def _run_eval(args) -> None:
    model, _ = load_checkpoint(args.ckpt)
    samples = [load_pair(r) for r in list_dataset(args.data)]
    report = evaluate_model(model, samples)
    print(report.to_table(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())


def _run_infer(args) -> None:
    model, _ = load_checkpoint(args.ckpt)
    image = load_image(args.image)
    original_hw = image.shape[:2]
    size = model.cfg.encoder.image_size
    if original_hw != (size, size):
        image = _resize_image(image, (size, size))
    pred = model.infer(image)
    if original_hw != (size, size):
        pred = _resize_image(pred[:, :, None], original_hw)[:, :, 0]
    save_mask(args.out, pred)
    print(f"wrote {args.out}")


def _run_metrics(args) -> None:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    pairs = []
    for pred_path in sorted(pred_dir.glob("*.png")):
        gt_path = gt_dir / pred_path.name
        pred = _decode_gray(pred_path)
        gt = load_mask(gt_path)
        if pred.shape != gt.shape:
            pred = _resize_image(pred[:, :, None], gt.shape)[:, :, 0]
        pairs.append((pred, gt))
    report = evaluate_dataset(pairs)
    print(report.to_table(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())


def _decode_gray(path):
    from .data import _decode

    return _decode(path, "L").astype(float) / 255.0


_COMMANDS = {
    "gen": _run_gen,
    "train": _run_train,
    "eval": _run_eval,
    "infer": _run_infer,
    "metrics": _run_metrics,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except MaGuPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
