"""Command-line front end: generate, pretrain, finetune, eval, reconstruct.

Exit codes: 0 success, 2 usage, 3 data, 4 numeric abort, 5 config mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    ContainerError,
    DataError,
    SynthSpec,
    center_crop,
    load_array,
    load_checkpoint,
    load_dataset,
    save_array,
    save_checkpoint,
    synth_generate,
)
from .downstream import ConfigMismatch, FinetuneConfig, classify, init_finetune, segment, transfer_weights
from .embeddings import PatchGrid
from .mae import MAEConfig, MaskPlan, init_mae, make_mask, make_targets, mae_decode, mae_encode, reconstruct_full, visible_count
from .metrics import MetricReport, evaluate_classification, evaluate_segmentation
from .train import NumericalAbort, TrainConfig, build_layer_groups, layer_scales, train_loop
from .vit import ViTConfig

log = logging.getLogger("selfmae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5

# Fine-tuning lr per task when --lr is not given.
FINETUNE_LR = {"cls": 1e-3, "seg": 8e-4}


class UsageError(Exception):
    pass


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--crop", type=int, default=None, help="cubic/square crop edge; default is the full data size")


def _add_train_flags(p: argparse.ArgumentParser, lr: float | None) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--steps", type=int, default=None, help="total optimizer steps; overrides --epochs")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--wd", type=float, default=0.05)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-flip", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfmae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--task", choices=("cls", "seg"), default="seg")
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--size", type=int, default=48)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--prevalence", type=float, default=0.5)
    g.add_argument("--test-fraction", type=float, default=0.25)
    g.add_argument("--patch", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="MAE pre-training")
    _add_train_flags(p, 1.5e-4)
    _add_model_flags(p)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--decoder-dim", type=int, default=None)
    p.add_argument("--decoder-depth", type=int, default=2)
    p.add_argument("--norm-targets", dest="norm_targets", action="store_true", default=True)
    p.add_argument("--no-norm-targets", dest="norm_targets", action="store_false")

    f = sub.add_parser("finetune", help="classification or segmentation fine-tuning")
    _add_train_flags(f, None)
    _add_model_flags(f)
    f.add_argument("--task", choices=("cls", "seg"), required=True)
    f.add_argument("--init", default=None, help="MAE checkpoint; absent means random init")
    f.add_argument("--layer-decay", type=float, default=0.75)
    f.add_argument("--droppath", type=float, default=0.1)
    f.add_argument("--feature-size", type=int, default=4)

    e = sub.add_parser("eval", help="score a fine-tuned checkpoint or a directory of predictions")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="metrics CSV path")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred-dir", help="pred_XXXX.ntc label maps (seg) or scores.ntc [n, L] (cls)")
    e.add_argument("--split", default="test")
    e.add_argument("--logits-out", default=None, help="also write the raw logits container")

    r = sub.add_parser("reconstruct", help="dump original / masked / reconstructed PGM images")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--index", type=int, nargs="+", default=[0])
    r.add_argument("--mask-ratio", type=float, default=0.75)
    r.add_argument("--split", default=None)
    r.add_argument("--seed", type=int, default=0)
    return parser


def _startup(args: argparse.Namespace) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items())}
    print("config " + json.dumps(cfg, sort_keys=True), flush=True)


def _grid_for(images: np.ndarray, crop: int | None, patch: int) -> PatchGrid:
    spatial = images.shape[2:]
    if crop is not None:
        if any(crop > s for s in spatial):
            raise UsageError(f"--crop {crop} exceeds data size {spatial}")
        spatial = (crop,) * len(spatial)
    try:
        return PatchGrid(tuple(int(s) for s in spatial), int(images.shape[1]), patch)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _total_steps(args, n: int) -> int:
    if args.steps is not None:
        return args.steps
    return args.epochs * math.ceil(n / args.batch)


def _train_cfg(args, n: int, betas, layer_decay: float = 1.0, mask_ratio: float = 0.75) -> TrainConfig:
    total = _total_steps(args, n)
    try:
        return TrainConfig(
            base_lr=args.lr,
            weight_decay=args.wd,
            betas=betas,
            warmup_steps=args.warmup if args.warmup is not None else int(0.1 * total),
            total_steps=total,
            layer_decay=layer_decay,
            batch_size=args.batch,
            seed=args.seed,
            mask_ratio=mask_ratio,
            flip=not args.no_flip,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def _write_outputs(out: Path, state, curve_csv: str | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.ntc", state)
    if curve_csv is not None:
        (out / "loss.csv").write_text(curve_csv)


def cmd_generate(args) -> int:
    try:
        spec = SynthSpec(
            task=args.task,
            count=args.count,
            size=args.size,
            num_classes=args.classes,
            noise=args.noise,
            seed=args.seed,
            prevalence=args.prevalence,
            test_fraction=args.test_fraction,
            patch=args.patch,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    path = synth_generate(spec, args.out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    if not 0.0 <= args.mask_ratio < 1.0:
        raise UsageError(f"--mask-ratio must lie in [0, 1), got {args.mask_ratio}")
    ds = load_dataset(args.data, "train")
    grid = _grid_for(ds.images, args.crop, args.patch)
    try:
        enc = ViTConfig(args.dim, args.depth, args.heads)
        cfg = MAEConfig(grid, enc, args.decoder_dim, args.decoder_depth, args.heads, norm_targets=args.norm_targets)
    except ValueError as e:
        raise UsageError(str(e)) from None
    n = grid.token_count
    v = visible_count(n, args.mask_ratio)
    print(f"tokens={n} visible={v} masked={n - v}", flush=True)
    state = init_mae(cfg, np.random.default_rng(args.seed))
    tcfg = _train_cfg(args, len(ds), (0.9, 0.95), mask_ratio=args.mask_ratio)
    curve = None
    if tcfg.total_steps > 0:
        result = train_loop("pretrain", ds.images, None, tcfg, state)
        curve = result.curve_csv()
    _write_outputs(Path(args.out), state, curve if curve is not None else "step,lr,loss\n")
    print(f"wrote {Path(args.out) / 'checkpoint.ntc'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    ds = load_dataset(args.data, "train")
    if ds.task != args.task:
        raise DataError(f"--task {args.task} does not match dataset task {ds.task}")
    grid = _grid_for(ds.images, args.crop, args.patch)
    lr = args.lr if args.lr is not None else FINETUNE_LR[args.task]
    args.lr = lr
    try:
        enc = ViTConfig(args.dim, args.depth, args.heads, droppath_rate=args.droppath)
        num_labels = ds.num_classes if args.task == "seg" else ds.labels.shape[1]
        cfg = FinetuneConfig(grid, enc, args.task, num_labels, args.feature_size)
    except ValueError as e:
        raise UsageError(str(e)) from None
    rng = np.random.default_rng(args.seed)
    if args.init:
        mae_state = load_checkpoint(args.init)
        if mae_state.config.get("kind") != "mae":
            raise ConfigMismatch(f"--init is not an MAE checkpoint: pretrain={mae_state.config} finetune={cfg.to_dict()}")
        state = transfer_weights(mae_state, cfg, rng)
    else:
        state = init_finetune(cfg, rng)
    groups = build_layer_groups(state, enc.depth, args.layer_decay)
    print("layer scales " + " ".join(f"{s:.6g}" for s in layer_scales(groups)), flush=True)
    tcfg = _train_cfg(args, len(ds), (0.9, 0.999), layer_decay=args.layer_decay)
    curve = "step,lr,loss\n"
    if tcfg.total_steps > 0:
        task = "finetune_seg" if args.task == "seg" else "finetune_cls"
        curve = train_loop(task, ds.images, ds.labels, tcfg, state).curve_csv()
    _write_outputs(Path(args.out), state, curve)
    print(f"wrote {Path(args.out) / 'checkpoint.ntc'}")
    return EXIT_OK


def predict(state, images: np.ndarray, batch: int = 2) -> np.ndarray:
    """Logits for ``images`` (center-cropped to the model grid), evaluated in batches."""
    cfg = FinetuneConfig.from_dict(state.config)
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            xb = np.stack([center_crop(x, None, cfg.grid.spatial)[0] for x in images[i : i + batch]])
            x = T.Tensor(xb, dtype=next(iter(state.params.values())).dtype)
            y = segment(x, state, cfg) if cfg.task == "seg" else classify(x, state, cfg)
            outs.append(y.data)
    return np.concatenate(outs)


def _eval_predictions(ds, preds: np.ndarray, task: str) -> MetricReport:
    if task == "cls":
        return evaluate_classification(preds, ds.labels)
    report = MetricReport()
    classes = range(1, ds.num_classes)
    for name, pred, gt in zip(ds.files, preds, ds.labels):
        if pred.shape != gt.shape:
            gt = center_crop(gt[None], None, pred.shape)[0][0]
        report.extend(evaluate_segmentation(pred, gt, classes, case=Path(name).stem))
    return report


def cmd_eval(args) -> int:
    ds = load_dataset(args.data, args.split)
    if args.pred_dir:
        root = Path(args.pred_dir)
        if ds.task == "cls":
            preds = load_array(root / "scores.ntc")
        else:
            preds = np.stack([load_array(root / f"pred_{Path(f).stem.split('_')[-1]}.ntc") for f in ds.files])
    else:
        state = load_checkpoint(args.ckpt)
        if state.config.get("kind") != "finetune":
            raise ConfigMismatch(f"eval needs a fine-tuned checkpoint, got kind {state.config.get('kind')!r}")
        if state.config["task"] != ds.task:
            raise ConfigMismatch(f"checkpoint task {state.config['task']} vs dataset task {ds.task}")
        logits = predict(state, ds.images)
        if args.logits_out:
            save_array(args.logits_out, logits)
        preds = logits.argmax(axis=1) if ds.task == "seg" else logits
    report = _eval_predictions(ds, preds, ds.task)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    if ds.task == "seg":
        ev, skip = report.counts("hd95")
        print(f"mean_dsc={report.mean_dsc} mean_hd95={report.mean_hd95} hd95_evaluated={ev} hd95_undefined={skip}")
    else:
        ev, skip = report.counts("auc")
        print(f"mauc={report.mauc} auc_evaluated={ev} auc_undefined={skip}")
    return EXIT_OK


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255) of a 2D ``[0, 1]`` image."""
    u8 = to_u8(img)
    h, w = u8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()


def views(vol: np.ndarray) -> dict[str, np.ndarray]:
    """Named 2D views: the image itself, or the central slice along each axis of a volume."""
    if vol.ndim == 2:
        return {"2d": vol}
    return {
        "z": vol[vol.shape[0] // 2],
        "y": vol[:, vol.shape[1] // 2],
        "x": vol[:, :, vol.shape[2] // 2],
    }


def cmd_reconstruct(args) -> int:
    if not 0.0 <= args.mask_ratio < 1.0:
        raise UsageError(f"--mask-ratio must lie in [0, 1), got {args.mask_ratio}")
    state = load_checkpoint(args.ckpt)
    if state.config.get("kind") != "mae":
        raise ConfigMismatch(f"reconstruct needs an MAE checkpoint, got kind {state.config.get('kind')!r}")
    cfg = MAEConfig.from_dict(state.config)
    ds = load_dataset(args.data, args.split)
    for i in args.index:
        if not 0 <= i < len(ds):
            raise UsageError(f"sample index {i} out of range for {len(ds)} items")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    n = cfg.grid.token_count
    dtype = next(iter(state.params.values())).dtype
    for i in args.index:
        x = center_crop(ds.images[i], None, cfg.grid.spatial)[0][None]
        plan: MaskPlan = make_mask(n, args.mask_ratio, rng, 1)
        with T.no_grad():
            enc = mae_encode(T.Tensor(x, dtype=dtype), cfg.grid, plan, state, cfg)
            pred = mae_decode(enc, plan, state, cfg)
        _, stats = make_targets(x, cfg.grid, cfg.norm_targets)
        recon, masked = reconstruct_full(pred, x, cfg.grid, plan, stats)
        for kind, arr in (("original", x), ("masked", masked), ("recon", recon)):
            for axis, img in views(arr[0, 0]).items():
                (out / f"sample{i:04d}_{axis}_{kind}.pgm").write_bytes(pgm_bytes(img))
        print(f"sample {i}: visible={plan.num_visible} masked={n - plan.num_visible}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _startup(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContainerError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigMismatch as e:
        print(f"config mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
