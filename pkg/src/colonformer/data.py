"""Dataset scanning, experiment splits and preprocessing.

Dataset layout::

    <root>/images/<stem>.{jpg,png}
    <root>/masks/<stem>.{jpg,png}

Split manifests are text, one record per line: ``<role>\\t<dataset_id>\\t<stem>``,
preceded by ``#``-prefixed header lines.
"""

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".tif", ".bmp")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
TRAIN_SCALES = (0.75, 1.0, 1.25)


class DatasetId(str, Enum):
    KVASIR = "Kvasir"
    CLINICDB = "ClinicDB"
    COLONDB = "ColonDB"
    CVC_T = "CVC-T"
    ETIS = "ETIS"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-")
        aliases = {
            "kvasir": cls.KVASIR, "kvasir-seg": cls.KVASIR,
            "clinicdb": cls.CLINICDB, "cvc-clinicdb": cls.CLINICDB,
            "colondb": cls.COLONDB, "cvc-colondb": cls.COLONDB,
            "cvc-t": cls.CVC_T, "cvc-300": cls.CVC_T, "endoscene": cls.CVC_T,
            "etis": cls.ETIS, "etis-laribpolypdb": cls.ETIS, "etis-larib": cls.ETIS,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown dataset id {value!r}") from None


# Table column order used throughout the reports.
DATASET_ORDER = (DatasetId.KVASIR, DatasetId.CLINICDB, DatasetId.COLONDB, DatasetId.CVC_T, DatasetId.ETIS)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    mask_path: Path
    dataset_id: DatasetId
    native_size: tuple  # (height, width)

    @property
    def stem(self):
        return self.image_path.stem

    @property
    def key(self):
        return (self.dataset_id.value, self.stem)


def _index(directory):
    files = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            files.setdefault(p.stem, p)
    return files


def scan_dataset(root, dataset_id):
    """Pair ``images/`` and ``masks/`` by stem; records are sorted by stem."""
    root = Path(root)
    dataset_id = DatasetId.parse(dataset_id)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root} must contain images/ and masks/ subdirectories")
    images, masks = _index(img_dir), _index(mask_dir)
    if not images:
        raise DatasetError(f"empty dataset: no images under {img_dir}")
    unmatched = sorted(set(images) - set(masks))
    if unmatched:
        raise DatasetError(f"missing mask for image(s): {', '.join(unmatched)}")
    records = []
    for stem in sorted(images):
        with Image.open(images[stem]) as im:
            w, h = im.size
        records.append(SampleRecord(images[stem], masks[stem], dataset_id, (h, w)))
    return records


class Protocol(str, Enum):
    FIXED90 = "fixed90"
    KFOLD5 = "kfold5"
    CROSS = "cross"


# Cross-dataset configurations: (train datasets, test datasets)
CROSS_CONFIGS = {
    1: ((DatasetId.COLONDB, DatasetId.ETIS), (DatasetId.CLINICDB,)),
    2: ((DatasetId.COLONDB,), (DatasetId.CLINICDB,)),
    3: ((DatasetId.CLINICDB,), (DatasetId.ETIS,)),
}

NUM_FOLDS = 5


@dataclass(frozen=True)
class SplitPlan:
    protocol: Protocol
    seed: int
    train: tuple
    test: tuple
    fold_index: int = None
    cross_config: int = None

    def __post_init__(self):
        overlap = {r.key for r in self.train} & {r.key for r in self.test}
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)[:3]}")

    def to_manifest(self):
        lines = [f"# protocol={self.protocol.value}", f"# seed={self.seed}"]
        if self.fold_index is not None:
            lines.append(f"# fold={self.fold_index}")
        if self.cross_config is not None:
            lines.append(f"# cross_config={self.cross_config}")
        for role, recs in (("train", self.train), ("test", self.test)):
            lines += [f"{role}\t{r.dataset_id.value}\t{r.stem}" for r in recs]
        return "\n".join(lines) + "\n"

    def test_by_dataset(self):
        groups = {}
        for r in self.test:
            groups.setdefault(r.dataset_id, []).append(r)
        return {d: groups[d] for d in DATASET_ORDER if d in groups}


def parse_manifest(text, records):
    """Rebuild a :class:`SplitPlan` from manifest text and the scanned records."""
    by_key = {r.key: r for r in records}
    header, roles = {}, {"train": [], "test": []}
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            header[k] = v
            continue
        role, ds, stem = line.split("\t")
        try:
            roles[role].append(by_key[(DatasetId.parse(ds).value, stem)])
        except KeyError:
            raise DatasetError(f"manifest references unknown record {ds}/{stem}") from None
    return SplitPlan(
        Protocol(header["protocol"]), int(header["seed"]), tuple(roles["train"]), tuple(roles["test"]),
        int(header["fold"]) if "fold" in header else None,
        int(header["cross_config"]) if "cross_config" in header else None,
    )


def _by_dataset(records):
    groups = {}
    for r in sorted(records, key=lambda r: r.key):
        groups.setdefault(r.dataset_id, []).append(r)
    return groups


def _permute(recs, seed):
    order = np.random.default_rng(seed).permutation(len(recs))
    return [recs[i] for i in order]


def fold_sizes(n, k=NUM_FOLDS):
    base, extra = divmod(n, k)
    return [base + (i < extra) for i in range(k)]


def kfold_partition(recs, seed, k=NUM_FOLDS):
    shuffled = _permute(recs, seed)
    folds, start = [], 0
    for size in fold_sizes(len(recs), k):
        folds.append(shuffled[start:start + size])
        start += size
    return folds


def make_split(records, protocol, seed=0, fold_index=None, cross_config=None, dataset=None):
    """Deterministic split for one of the three experiment protocols.

    * ``fixed90``: per dataset, ``floor(0.9 n)`` Kvasir and ClinicDB records
      train; their remainder plus every ColonDB/CVC-T/ETIS record test.
    * ``kfold5``: one dataset (``dataset`` or the only one present) cut into
      five near-equal folds; fold ``fold_index`` tests.
    * ``cross``: whole datasets per ``CROSS_CONFIGS[cross_config]``.
    """
    protocol = Protocol(protocol)
    groups = _by_dataset(records)
    if protocol is Protocol.FIXED90:
        train, test = [], []
        for ds in (DatasetId.KVASIR, DatasetId.CLINICDB):
            if ds not in groups:
                raise DatasetError(f"fixed90 requires {ds.value}")
            shuffled = _permute(groups[ds], seed)
            n_train = len(shuffled) * 9 // 10
            train += sorted(shuffled[:n_train], key=lambda r: r.key)
            test += sorted(shuffled[n_train:], key=lambda r: r.key)
        for ds in (DatasetId.COLONDB, DatasetId.CVC_T, DatasetId.ETIS):
            test += groups.get(ds, [])
        return SplitPlan(protocol, seed, tuple(train), tuple(test))
    if protocol is Protocol.KFOLD5:
        if fold_index is None or not 0 <= fold_index < NUM_FOLDS:
            raise ValueError(f"fold_index must be in [0, {NUM_FOLDS}), got {fold_index}")
        if dataset is None:
            if len(groups) != 1:
                raise DatasetError("kfold5 needs exactly one dataset; pass dataset=")
            dataset = next(iter(groups))
        dataset = DatasetId.parse(dataset)
        if dataset not in groups:
            raise DatasetError(f"kfold5 dataset {dataset.value} not present")
        folds = kfold_partition(groups[dataset], seed)
        test = sorted(folds[fold_index], key=lambda r: r.key)
        train = sorted((r for i, f in enumerate(folds) if i != fold_index for r in f), key=lambda r: r.key)
        return SplitPlan(protocol, seed, tuple(train), tuple(test), fold_index=fold_index)
    if cross_config not in CROSS_CONFIGS:
        raise ValueError(f"cross protocol needs cross_config in {sorted(CROSS_CONFIGS)}, got {cross_config}")
    train_ids, test_ids = CROSS_CONFIGS[cross_config]
    for ds in train_ids + test_ids:
        if ds not in groups:
            raise DatasetError(f"cross config {cross_config} requires {ds.value}")
    train = [r for ds in train_ids for r in groups[ds]]
    test = [r for ds in test_ids for r in groups[ds]]
    return SplitPlan(protocol, seed, tuple(train), tuple(test), cross_config=cross_config)


def snapped_size(target_size, scale):
    """``round(target_size * scale)`` snapped to the nearest multiple of 32 (halves round up)."""
    raw = round(target_size * scale)
    return max(32, 32 * math.floor(raw / 32 + 0.5))


def read_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise DatasetError(f"unreadable image {path}: {e}") from e


def read_mask(path):
    """Binary ``uint8`` mask, thresholded at 0.5 after scaling to [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"unreadable mask {path}: {e}") from e
    return (arr >= 0.5).astype(np.uint8)


def normalize_image(rgb):
    x = rgb.astype(np.float32) / 255.0
    x = (x - np.array(IMAGENET_MEAN, np.float32)) / np.array(IMAGENET_STD, np.float32)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))


def resize_image(rgb, size):
    if rgb.shape[:2] == (size, size):
        return rgb
    return np.asarray(Image.fromarray(rgb).resize((size, size), Image.BILINEAR))


def resize_mask(mask, size):
    if mask.shape == (size, size):
        return mask
    out = np.asarray(Image.fromarray(mask * 255).resize((size, size), Image.NEAREST))
    return (out >= 128).astype(np.uint8)


def preprocess(record, target_size=352, scale=1.0):
    """Resize and normalize one record; returns ``(image (3,s,s), mask (1,s,s))`` tensors."""
    size = snapped_size(target_size, scale)
    image = normalize_image(resize_image(read_image(record.image_path), size))
    mask = torch.from_numpy(resize_mask(read_mask(record.mask_path), size)[None].astype(np.float32))
    return image, mask


def load_batch(records, target_size=352, scale=1.0):
    pairs = [preprocess(r, target_size, scale) for r in records]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


def batch_plan(n, batch_size, shuffle_seed):
    """Index batches for one epoch; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(shuffle_seed).permutation(n) if shuffle_seed is not None else np.arange(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


def shard_range(num_batches, worker, num_workers):
    """Contiguous batch-index range handled by ``worker`` out of ``num_workers``."""
    if not 0 <= worker < num_workers:
        raise ValueError(f"worker {worker} out of range for {num_workers} workers")
    per, extra = divmod(num_batches, num_workers)
    start = worker * per + min(worker, extra)
    return range(start, start + per + (worker < extra))


def iterate_batches(split, batch_size, shuffle_seed, target_size=352, scale=1.0, worker=0, num_workers=1):
    """Yield ``(images, masks)`` over the training records of ``split``."""
    records = split.train if isinstance(split, SplitPlan) else list(split)
    plan = batch_plan(len(records), batch_size, shuffle_seed)
    for b in shard_range(len(plan), worker, num_workers):
        yield load_batch([records[i] for i in plan[b]], target_size, scale)
