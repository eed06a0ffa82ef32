"""Training, evaluation and the three experiment protocols.

Config files are flat ``key = value`` text, one key per line, ``#`` comments
allowed. Keys are the :class:`TrainConfig` field names; tuples are written
comma-separated.
"""

import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import (
    CROSS_CONFIGS, DATASET_ORDER, DatasetId, Protocol, SplitPlan, batch_plan, load_batch, make_split,
    normalize_image, read_image, read_mask, resize_image, scan_dataset, snapped_size,
)
from .losses import LossConfig, deep_supervised_loss
from .metrics import MetricsReport, binarize, image_metrics, mean_std, sweep_curves
from .model import build_model, load_checkpoint, load_pretrained_backbone, save_checkpoint

log = logging.getLogger(__name__)

NUM_RUNS = 5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    scales: tuple = (0.75, 1.0, 1.25)
    image_size: int = 352
    seed: int = 0
    variant: str = "S"
    multiscale: str = "sequential"
    deterministic: bool = True
    alpha: float = 0.25
    gamma: float = 2.0
    lam: float = 5.0
    pretrained: str = ""

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.image_size < 32:
            raise ValueError("lr, epochs, batch_size and image_size must be positive (image_size >= 32)")
        if not self.scales:
            raise ValueError("scales must be non-empty")
        if self.multiscale not in ("sequential", "summed"):
            raise ValueError(f"multiscale must be 'sequential' or 'summed', got {self.multiscale!r}")

    @property
    def loss(self):
        return LossConfig(self.alpha, self.gamma, self.lam)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise ValueError(f"line {lineno}: unknown or malformed entry {line!r}")
            values[key] = _parse_value(types[key], raw)
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text())

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _parse_value(kind, raw):
    if kind in ("tuple", tuple):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if kind in ("bool", bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw


def cosine_lr(step, total_steps, base_lr):
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    return base_lr * 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class RunArtifacts:
    model: torch.nn.Module
    loss_log: list
    config_hash: str
    checkpoint: Path = None
    out_dir: Path = None


def _seed_everything(seed, deterministic):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def split_hash(split):
    return hashlib.sha256(split.to_manifest().encode()).hexdigest()[:16]


def write_loss_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "epoch", "scale", "loss"])
        for r in rows:
            w.writerow([r["step"], r["epoch"], r["scale"], repr(r["loss"])])


def train(config, split, out_dir=None):
    """Adam + cosine schedule with multi-scale deep supervision; keeps the last epoch.

    ``split`` may be a :class:`SplitPlan` (its ``train`` records are used) or a
    plain record list. Returns :class:`RunArtifacts`.
    """
    records = list(split.train if isinstance(split, SplitPlan) else split)
    if not records:
        raise ValueError("no training records")
    out_dir = Path(out_dir) if out_dir is not None else None
    _seed_everything(config.seed, config.deterministic)
    model = build_model(config.variant, seed=config.seed)
    if config.pretrained:
        missing, unexpected = load_pretrained_backbone(model, config.pretrained)
        log.info("pretrained backbone: %d missing, %d unexpected keys", len(missing), len(unexpected))
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), weight_decay=0)
    n_batches = math.ceil(len(records) / config.batch_size)
    per_batch = len(config.scales) if config.multiscale == "sequential" else 1
    total = config.epochs * n_batches * per_batch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda t: cosine_lr(t, total, 1.0))
    loss_cfg = config.loss
    rows, step = [], 0

    def run_step(loss, epoch, scale, batch):
        nonlocal step
        if not torch.isfinite(loss):
            stems = [r.stem for r in batch]
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                (out_dir / "nonfinite_batch.txt").write_text(
                    f"step={step} epoch={epoch} scale={scale}\n" + "\n".join(stems) + "\n")
            raise NonFiniteLoss(f"non-finite loss at step {step} (epoch {epoch}, scale {scale}); batch {stems}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        rows.append({"step": step, "epoch": epoch, "scale": scale, "loss": float(loss.detach())})
        step += 1

    for epoch in range(config.epochs):
        for idx in batch_plan(len(records), config.batch_size, shuffle_seed=config.seed * 10007 + epoch):
            batch = [records[i] for i in idx]
            if config.multiscale == "sequential":
                for scale in config.scales:
                    x, g = load_batch(batch, config.image_size, scale)
                    run_step(deep_supervised_loss(model(x), g, loss_cfg), epoch, scale, batch)
            else:
                loss = 0
                for scale in config.scales:
                    x, g = load_batch(batch, config.image_size, scale)
                    loss = loss + deep_supervised_loss(model(x), g, loss_cfg)
                run_step(loss, epoch, "all", batch)
    model.eval()

    art = RunArtifacts(model, rows, config.hash)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {"config_hash": config.hash, "config": config.to_text()}
        if isinstance(split, SplitPlan):
            meta["split_hash"] = split_hash(split)
            (out_dir / "split.tsv").write_text(split.to_manifest())
        art.checkpoint = save_checkpoint(model, out_dir / "checkpoint.safetensors", meta)
        write_loss_log(rows, out_dir / "loss_log.csv")
        (out_dir / "config.txt").write_text(config.to_text())
        write_manifest(out_dir / "manifest.txt", command="train", config_hash=config.hash,
                       split_hash=meta.get("split_hash", "-"), steps=len(rows))
        art.out_dir = out_dir
    return art


def write_manifest(path, **entries):
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


@torch.no_grad()
def predict_probability(model, rgb, image_size=352):
    """Single-scale inference on an RGB array; probabilities at the array's own size."""
    x = normalize_image(resize_image(rgb, snapped_size(image_size, 1.0)))
    logits = F.interpolate(model(x[None])[-1], size=rgb.shape[:2], mode="bilinear", align_corners=False)
    return torch.sigmoid(logits)[0, 0].numpy()


class ModelPredictor:
    """Maps a record to its probability map at native resolution."""

    def __init__(self, model, image_size=352):
        self.model = model.eval()
        self.image_size = image_size

    def __call__(self, record):
        return predict_probability(self.model, read_image(record.image_path), self.image_size)


class OraclePredictor:
    """Returns the ground truth itself; used to validate the evaluation path."""

    def __call__(self, record):
        return read_mask(record.mask_path).astype(np.float32)


def evaluate(model_or_checkpoint, split, image_size=352, thresholds=None, threshold=0.5):
    """Per-dataset :class:`MetricsReport` for the test records of ``split``.

    ``model_or_checkpoint`` is a checkpoint path, a model, or any callable
    mapping a record to a probability map at native resolution.
    """
    test = split.test if isinstance(split, SplitPlan) else tuple(split)
    if not test:
        raise ValueError("empty test split")
    predictor = _as_predictor(model_or_checkpoint, image_size)
    groups = {}
    for r in test:
        groups.setdefault(r.dataset_id, []).append(r)
    reports = {}
    for ds in [d for d in DATASET_ORDER if d in groups]:
        recs = sorted(groups[ds], key=lambda r: r.stem)
        probs, masks, per_image = [], [], []
        for r in recs:
            p = predictor(r)
            g = read_mask(r.mask_path)
            if p.shape != g.shape:
                raise ValueError(f"prediction {p.shape} does not match mask {g.shape} for {r.stem}")
            per_image.append(image_metrics(binarize(p, threshold), g))
            if thresholds is not None:
                probs.append(p)
                masks.append(g)
        curves = sweep_curves(probs, masks, thresholds) if thresholds is not None else None
        reports[ds] = MetricsReport([r.stem for r in recs], per_image, curves)
    return reports


def _as_predictor(obj, image_size):
    if isinstance(obj, (str, Path)):
        return ModelPredictor(load_checkpoint(obj), image_size)
    if isinstance(obj, torch.nn.Module):
        return ModelPredictor(obj, image_size)
    if callable(obj):
        return obj
    raise TypeError(f"cannot evaluate with {type(obj).__name__}")


# ---------------------------------------------------------------- experiments

def default_trainer(config, split, run_dir):
    return train(config, split, run_dir).model


@dataclass
class ExperimentReport:
    protocol: int
    method: str
    rows: list  # dicts: label + metric values (or (mean, std) pairs)
    table: str

    def to_text(self):
        return self.table


def resolve_roots(roots):
    """Accept a mapping ``dataset -> path`` or a parent directory of dataset folders."""
    if isinstance(roots, dict):
        return {DatasetId.parse(k): Path(v) for k, v in roots.items()}
    parent = Path(roots)
    found = {}
    for child in sorted(parent.iterdir()) if parent.is_dir() else []:
        try:
            found[DatasetId.parse(child.name)] = child
        except ValueError:
            continue
    return found


def _load(roots, needed):
    missing = [d.value for d in needed if d not in roots]
    if missing:
        raise FileNotFoundError(f"missing dataset(s) for protocol: {', '.join(missing)}")
    return [r for d in needed for r in scan_dataset(roots[d], d)]


def _fmt(x):
    return f"{x:.4f}"


def _fmt_pm(m, s):
    return f"{m:.4f} ± {s:.4f}"


def _render(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: " | ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


def _run_dir(out_dir, *parts):
    return Path(out_dir, *parts) if out_dir is not None else None


def run_experiment(protocol, roots, seed=0, config=None, out_dir=None, trainer=None, n_runs=NUM_RUNS):
    """Run protocol 1 (fixed split, several seeds), 2 (5-fold CV) or 3 (cross-dataset).

    ``trainer(config, split, run_dir)`` must return a model or predictor;
    it defaults to :func:`train`.
    """
    config = config or TrainConfig()
    trainer = trainer or default_trainer
    roots = resolve_roots(roots)
    method = f"ColonFormer-{config.variant}"
    seeds = [seed + i for i in range(n_runs)]

    def fit_eval(split, run_seed, run_dir):
        predictor = trainer(config.replace(seed=run_seed), split, run_dir)
        return evaluate(predictor, split, config.image_size)

    if protocol == 1:
        records = _load(roots, DATASET_ORDER)
        split = make_split(records, Protocol.FIXED90, seed)
        runs = [fit_eval(split, s, _run_dir(out_dir, f"run{s}")) for s in seeds]
        header = ["Method"] + [f"{d.value} {m}" for d in DATASET_ORDER for m in ("mDice", "mIoU")]
        rows = []
        table_rows = []
        for s, rep in zip(seeds, runs):
            vals = [rep[d].aggregate[m] for d in DATASET_ORDER for m in ("mDice", "mIoU")]
            rows.append({"label": f"run {s}", "values": vals})
            table_rows.append([f"{method} run {s}"] + [_fmt(v) for v in vals])
        mean = [float(np.mean([r["values"][i] for r in rows])) for i in range(len(header) - 1)]
        rows.append({"label": "mean", "values": mean})
        table_rows.append([f"{method} (mean of {n_runs})"] + [_fmt(v) for v in mean])
        title = f"Protocol 1: fixed split, mean over {n_runs} runs\n"
        return ExperimentReport(1, method, rows, title + _render(header, table_rows))

    if protocol == 2:
        header = ["Dataset", "Method", "Fold", "mDice", "mIoU", "Recall", "Precision"]
        rows, table_rows = [], []
        for ds in (DatasetId.CLINICDB, DatasetId.KVASIR):
            records = _load(roots, (ds,))
            per_fold = []
            for k in range(5):
                split = make_split(records, Protocol.KFOLD5, seed, fold_index=k, dataset=ds)
                agg = fit_eval(split, seed, _run_dir(out_dir, ds.value, f"fold{k}"))[ds].aggregate
                vals = [agg[m] for m in ("mDice", "mIoU", "recall", "precision")]
                per_fold.append(vals)
                rows.append({"label": f"{ds.value} fold {k}", "values": vals})
                table_rows.append([ds.value, method, f"fold {k}"] + [_fmt(v) for v in vals])
            stats = [mean_std([f[i] for f in per_fold]) for i in range(4)]
            rows.append({"label": f"{ds.value} mean ± std", "values": stats})
            table_rows.append([ds.value, method, "mean ± std"] + [_fmt_pm(m, s) for m, s in stats])
        title = f"Protocol 2: 5-fold cross-validation, {method}\n"
        return ExperimentReport(2, method, rows, title + _render(header, table_rows))

    if protocol == 3:
        header = ["Train", "Test", "Method", "mDice", "mIoU", "Recall", "Precision"]
        rows, table_rows = [], []
        for cfg_id, (train_ids, test_ids) in CROSS_CONFIGS.items():
            records = _load(roots, train_ids + test_ids)
            split = make_split(records, Protocol.CROSS, seed, cross_config=cfg_id)
            runs = []
            for s in seeds:
                rep = fit_eval(split, s, _run_dir(out_dir, f"cross{cfg_id}", f"run{s}"))
                runs.append([rep[test_ids[0]].aggregate[m] for m in ("mDice", "mIoU", "recall", "precision")])
            vals = [float(np.mean([r[i] for r in runs])) for i in range(4)]
            train_label = " + ".join(d.value for d in train_ids)
            rows.append({"label": f"{train_label} -> {test_ids[0].value}", "values": vals})
            table_rows.append([train_label, test_ids[0].value, method] + [_fmt(v) for v in vals])
        title = f"Protocol 3: cross-dataset, mean over {n_runs} runs\n"
        return ExperimentReport(3, method, rows, title + _render(header, table_rows))

    raise ValueError(f"protocol must be 1, 2 or 3, got {protocol}")
