"""Command-line entry point: ``colonformer {split,train,eval,predict,curves,params}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, harness, metrics
from .model import MODEL_VARIANTS, CheckpointMismatch, count_parameters, load_checkpoint

log = logging.getLogger("colonformer")

OVERLAY_COLOR = (0, 255, 0)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_split_flags(p):
    p.add_argument("--data-root", required=True,
                   help="directory holding one sub-folder per dataset (Kvasir, ClinicDB, ColonDB, CVC-T, ETIS)")
    p.add_argument("--protocol", default="fixed90", choices=[x.value for x in data.Protocol])
    p.add_argument("--fold", type=int, default=None, help="fold index for kfold5, in [0, 5)")
    p.add_argument("--cross-config", type=int, default=None, choices=sorted(data.CROSS_CONFIGS))
    p.add_argument("--dataset", default=None, help="dataset for kfold5")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = Parser(prog="colonformer", description="ColonFormer polyp segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    variants = sorted(MODEL_VARIANTS)

    p = sub.add_parser("split", help="write a split manifest")
    _add_split_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a model on a split")
    _add_split_flags(p)
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--variant", choices=variants, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the split's test records")
    _add_split_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=352)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=352)
    p.add_argument("--overlay", action="store_true", help="also write the mask boundary over the image")

    p = sub.add_parser("curves", help="ROC/PR points over a threshold sweep")
    _add_split_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--image-size", type=int, default=352)
    p.add_argument("--out", required=True)

    p = sub.add_parser("params", help="print the trainable parameter count")
    p.add_argument("--variant", choices=variants, default="S")
    return parser


def _records(args):
    roots = harness.resolve_roots(args.data_root)
    if not roots:
        raise FileNotFoundError(f"no dataset folders under {args.data_root}")
    return [r for ds, root in roots.items() for r in data.scan_dataset(root, ds)]


def _split(args):
    return data.make_split(_records(args), args.protocol, args.seed, fold_index=args.fold,
                           cross_config=args.cross_config, dataset=args.dataset)


def _validate_split_flags(args):
    if args.protocol == "kfold5" and (args.fold is None or not 0 <= args.fold < data.NUM_FOLDS):
        raise UsageError(f"--fold must be in [0, {data.NUM_FOLDS}) for kfold5, got {args.fold}")
    if args.protocol == "cross" and args.cross_config is None:
        raise UsageError("--cross-config is required for the cross protocol")


def _manifest(out, args, **extra):
    resolved = {k: v for k, v in sorted(vars(args).items())}
    resolved.update(extra)
    text = "".join(f"{k} = {v}\n" for k, v in resolved.items())
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    Path(out, "manifest.txt").write_text(text + f"manifest_hash = {digest}\n")


def cmd_split(args):
    _validate_split_flags(args)
    split = _split(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.tsv").write_text(split.to_manifest())
    _manifest(out, args, split_hash=harness.split_hash(split))
    print(f"train={len(split.train)} test={len(split.test)} -> {out / 'split.tsv'}")


def cmd_train(args):
    _validate_split_flags(args)
    cfg = harness.TrainConfig.from_file(args.config) if args.config else harness.TrainConfig()
    overrides = {k: v for k, v in (("variant", args.variant), ("epochs", args.epochs), ("batch_size", args.batch_size),
                                   ("lr", args.lr), ("image_size", args.image_size), ("seed", args.seed)) if v is not None}
    cfg = cfg.replace(**overrides)
    art = harness.train(cfg, _split(args), args.out)
    _manifest(args.out, args, config_hash=cfg.hash, checkpoint=art.checkpoint)
    print(f"trained {len(art.loss_log)} steps, final loss {art.loss_log[-1]['loss']:.6f} -> {art.checkpoint}")


def format_eval_report(reports):
    lines = []
    for ds, rep in reports.items():
        lines.append(f"[{ds.value}]")
        lines += [f"{k} = {rep.aggregate[k]:.6f}" for k in metrics.METRIC_KEYS]
        lines.append(f"images = {len(rep.per_image)}")
        lines.append("")
    return "\n".join(lines)


def cmd_eval(args):
    _validate_split_flags(args)
    model = _checkpoint(args.checkpoint)
    reports = harness.evaluate(model, _split(args), args.image_size, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = format_eval_report(reports)
    (out / "report.txt").write_text(text)
    for ds, rep in reports.items():
        (out / f"report_{ds.value}.json").write_text(rep.to_text())
    _manifest(out, args)
    print(text, end="")


def _checkpoint(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def mask_boundary(mask):
    m = np.pad(mask.astype(bool), 1, mode="edge")
    core = m[1:-1, 1:-1]
    eroded = core & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~eroded


def predict_image(model, image_path, image_size=352):
    """Probability map at the image's native resolution, plus the decoded RGB array."""
    rgb = data.read_image(image_path)
    return harness.predict_probability(model, rgb, image_size), rgb


def cmd_predict(args):
    if not Path(args.image).is_file():
        raise FileNotFoundError(f"image not found: {args.image}")
    model = _checkpoint(args.checkpoint)
    prob, rgb = predict_image(model, args.image, args.image_size)
    mask = metrics.binarize(prob, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    Image.fromarray(mask.astype(np.uint8) * 255).save(out / f"{stem}_mask.png")
    np.save(out / f"{stem}_prob.npy", prob.astype(np.float32))
    if args.overlay:
        over = rgb.copy()
        over[mask_boundary(mask)] = OVERLAY_COLOR
        Image.fromarray(over).save(out / f"{stem}_overlay.png")
    _manifest(out, args)
    print(f"{out / (stem + '_mask.png')}")


def cmd_curves(args):
    _validate_split_flags(args)
    model = _checkpoint(args.checkpoint)
    thresholds = metrics.default_thresholds(args.points)
    reports = harness.evaluate(model, _split(args), args.image_size, thresholds=thresholds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds, rep in reports.items():
        rep.curves.write_csv(out / f"curves_{ds.value}.csv")
        print(f"{ds.value}: ROC AUC {rep.curves.roc_auc():.4f}")
    _manifest(out, args)


def cmd_params(args):
    n = count_parameters(args.variant)
    print(f"ColonFormer-{args.variant}: {n} trainable parameters ({n / 1e6:.2f}M)")


COMMANDS = {
    "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "curves": cmd_curves, "params": cmd_params,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (FileNotFoundError, data.DatasetError, CheckpointMismatch, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
