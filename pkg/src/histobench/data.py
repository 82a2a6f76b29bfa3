"""Dataset ingestion, the synthetic desk-scale task, splitting, batching,
and flip augmentation.

Images flow through the package as float64 arrays in [0, 1], channel-first
[n, 3, 96, 96]. Byte-valued sources are rescaled by 1/255 on access, so the
byte range {0..255} maps exactly onto {0, 1/255, ..., 1}. Datasets are
immutable after load and safe to share; the batch iterator is single-consumer.
"""

from __future__ import annotations

import csv
import hashlib
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import h5py
import numpy as np
from PIL import Image

from .errors import DataLoadError, FormatError, ParameterError

IMAGE_SHAPE = (3, 96, 96)
# Positive iff the center 32x32 region contains blob tissue.
CENTER_LO, CENTER_HI = 32, 64
# Synthetic generator contrast contract: background is clipped to
# [BG_MIN, BG_MAX] and blob pixels sit at background + BLOB_GAIN, so any
# pixel above BLOB_THRESHOLD belongs to a blob even after byte quantization.
# The background band is kept dark: a bright field makes the flattened
# input's L1 mass large enough that Adam's sign-like early steps swing the
# MLP's pre-activations tens of units per step and saturate its sigmoid.
BG_BASE, BG_MIN, BG_MAX = 0.08, 0.0, 0.18
BLOB_GAIN = 0.5
BLOB_THRESHOLD = 0.34

CACHE_ENV_VAR = "HISTOBENCH_CACHE"


@dataclass
class SplitStats:
    positives: int
    negatives: int
    total: int

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "SplitStats":
        pos = int(np.sum(labels == 1))
        return cls(positives=pos, negatives=int(labels.size - pos), total=int(labels.size))


class _ArrayStore:
    """In-memory images, either raw bytes (rescaled on read) or float64."""

    def __init__(self, arr: np.ndarray):
        self.arr = arr

    def read(self, indices: np.ndarray) -> np.ndarray:
        block = self.arr[indices]
        if block.dtype == np.uint8:
            return block.astype(np.float64) / 255.0
        return block.astype(np.float64, copy=True)


class _H5Store:
    """Lazy HDF5-backed images with a bounded block cache.

    Blocks of ``block_size`` images are converted (channel-first, /255) on
    first touch and kept in an insertion-ordered cache evicted FIFO once the
    byte budget is exceeded, so the full corpus is never forced into memory.
    """

    def __init__(self, path: str, key: str, n: int, budget_bytes: int, block_size: int = 64):
        self.path = path
        self.key = key
        self.n = n
        self.block_size = block_size
        self.budget_bytes = budget_bytes
        self._file = None
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache_bytes = 0

    def _dataset(self):
        if self._file is None:
            self._file = h5py.File(self.path, "r")
        return self._file[self.key]

    def _block(self, b: int) -> np.ndarray:
        hit = self._cache.get(b)
        if hit is not None:
            return hit
        lo = b * self.block_size
        hi = min(lo + self.block_size, self.n)
        raw = self._dataset()[lo:hi]  # [k, 96, 96, 3] bytes
        block = raw.transpose(0, 3, 1, 2).astype(np.float64) / 255.0
        self._cache[b] = block
        self._cache_bytes += block.nbytes
        while self._cache_bytes > self.budget_bytes and len(self._cache) > 1:
            _, evicted = self._cache.popitem(last=False)
            self._cache_bytes -= evicted.nbytes
        return block

    def read(self, indices: np.ndarray) -> np.ndarray:
        out = np.empty((len(indices),) + IMAGE_SHAPE, dtype=np.float64)
        for pos, i in enumerate(indices):
            b, off = divmod(int(i), self.block_size)
            out[pos] = self._block(b)[off]
        return out


class _SubsetStore:
    def __init__(self, base, index_map: np.ndarray):
        self.base = base
        self.index_map = index_map

    def read(self, indices: np.ndarray) -> np.ndarray:
        return self.base.read(self.index_map[np.asarray(indices)])


class LabeledDataset:
    """Binary-labeled image collection with lazy, order-preserving access."""

    def __init__(self, store, labels: np.ndarray, ids: list[str] | None = None,
                 source: str = "memory"):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self._store = store
        self.labels = labels
        self.ids = ids
        self.source = source

    def __len__(self) -> int:
        return int(self.labels.size)

    def images(self, indices) -> np.ndarray:
        """Fetch float64 [k, 3, 96, 96] images for the given indices."""
        return self._store.read(np.asarray(indices, dtype=np.int64))

    def image(self, i: int) -> np.ndarray:
        return self.images([i])[0]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        ids = [self.ids[i] for i in idx] if self.ids is not None else None
        return LabeledDataset(
            _SubsetStore(self._store, idx), self.labels[idx], ids, self.source
        )

    def split_stats(self) -> SplitStats:
        return SplitStats.from_labels(self.labels)


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


def _require_h5_key(f: h5py.File, key: str, path: str):
    if key not in f:
        raise FormatError(
            f"{path}: missing dataset key {key!r} (found {sorted(f.keys())})"
        )
    return f[key]


def load_pcam_h5(x_path, y_path, cache_budget_bytes: int = 512 * 1024 * 1024) -> LabeledDataset:
    """Load a PatchCamelyon-style HDF5 pair: key "x" holds n x 96 x 96 x 3
    unsigned bytes, key "y" holds n binary labels (trailing 1-extents are
    squeezed). Images convert to channel-first floats lazily."""
    x_path, y_path = str(x_path), str(y_path)
    with h5py.File(x_path, "r") as f:
        dset = _require_h5_key(f, "x", x_path)
        shape = dset.shape
        if len(shape) != 4 or shape[1:] != (96, 96, 3):
            raise FormatError(
                f"{x_path}: key 'x' must be (n, 96, 96, 3), found shape {shape}"
            )
        if not np.issubdtype(dset.dtype, np.unsignedinteger):
            raise FormatError(
                f"{x_path}: key 'x' must hold unsigned bytes, found dtype {dset.dtype}"
            )
        n = shape[0]
    with h5py.File(y_path, "r") as f:
        dset = _require_h5_key(f, "y", y_path)
        labels = np.asarray(dset[...]).reshape(-1)
        if labels.shape != (n,):
            raise FormatError(
                f"{y_path}: key 'y' must hold {n} labels, found shape {dset.shape}"
            )
    if not np.isin(labels, (0, 1)).all():
        raise FormatError(f"{y_path}: key 'y' must be binary")
    store = _H5Store(x_path, "x", n, cache_budget_bytes)
    return LabeledDataset(store, labels, ids=None, source=f"pcam-h5:{x_path}")


def _image_dir_fingerprint(csv_path: Path, files: list[Path]) -> str:
    h = hashlib.sha256(csv_path.read_bytes())
    for f in files:
        st = f.stat()
        h.update(f"{f.name}:{st.st_size}:{st.st_mtime_ns}".encode())
    return h.hexdigest()


def load_image_dir(dir_path, labels_csv=None) -> LabeledDataset:
    """Load a directory of 96x96 RGB PNGs described by a CSV with columns
    id,label; dataset order is CSV row order. Honors HISTOBENCH_CACHE as a
    decoded-image cache directory."""
    dir_path = Path(dir_path)
    csv_path = Path(labels_csv) if labels_csv is not None else dir_path / "labels.csv"
    if not csv_path.is_file():
        raise DataLoadError(f"labels csv not found: {csv_path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["id", "label"]:
            raise FormatError(f"{csv_path}: expected header 'id,label', found {header}")
        rows = [(row[0], row[1]) for row in reader if row]
    ids = [r[0] for r in rows]
    try:
        labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    except ValueError as e:
        raise FormatError(f"{csv_path}: non-integer label ({e})") from None
    if len(labels) and not np.isin(labels, (0, 1)).all():
        raise FormatError(f"{csv_path}: labels must be 0 or 1")

    files = [dir_path / f"{i}.png" for i in ids]
    missing = [i for i, f in zip(ids, files) if not f.is_file()]
    if missing:
        shown = ", ".join(missing[:10])
        more = "" if len(missing) <= 10 else f" (and {len(missing) - 10} more)"
        raise DataLoadError(f"{dir_path}: missing image files for ids: {shown}{more}")

    cache_dir = os.environ.get(CACHE_ENV_VAR)
    cache_file = None
    if cache_dir:
        digest = _image_dir_fingerprint(csv_path, files)
        cache_file = Path(cache_dir) / f"imagedir-{digest}.npy"
        if cache_file.is_file():
            images = np.load(cache_file)
            return LabeledDataset(_ArrayStore(images), labels, ids,
                                  source=f"image-dir:{dir_path}")

    images = np.empty((len(ids),) + IMAGE_SHAPE, dtype=np.uint8)
    for k, f in enumerate(files):
        with Image.open(f) as im:
            if im.size != (96, 96):
                raise FormatError(f"{f}: expected 96x96 image, found {im.size}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        images[k] = arr.transpose(2, 0, 1)

    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_file.with_suffix(".tmp.npy")
        np.save(tmp, images)
        os.replace(tmp, cache_file)
    return LabeledDataset(_ArrayStore(images), labels, ids, source=f"image-dir:{dir_path}")


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------


def center_blob_rule(image: np.ndarray) -> int:
    """Recompute the label of a synthetic image from pixels alone: positive
    iff any center-region pixel exceeds the blob detection threshold."""
    center = image[:, CENTER_LO:CENTER_HI, CENTER_LO:CENTER_HI]
    return int((center > BLOB_THRESHOLD).any())


def _disk_mask(cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.ogrid[:96, :96]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def synth_center_blob(n: int, noise_level: float = 0.1, seed: int = 0) -> LabeledDataset:
    """Balanced synthetic analog of the patch task.

    Positives carry a bright disk (radius uniform in [6, 14] px, +0.5 over
    the textured background) that overlaps the center 32x32 region; negatives
    have either no disk or one kept clear of the center region, so the label
    is exactly the center rule. Pixels are byte-quantized so a PNG round trip
    is lossless.
    """
    if n < 2:
        raise ParameterError(f"synth_center_blob needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    n_pos = n // 2
    # overlap margins keep borderline placements out of the corpus so the
    # task stays learnable at small n; labels still satisfy the center rule
    min_overlap_px = 12
    clearance_px = 3.0

    images = np.empty((n,) + IMAGE_SHAPE, dtype=np.uint8)
    labels = np.zeros(n, dtype=np.int64)
    box = np.zeros((96, 96), dtype=bool)
    box[CENTER_LO:CENTER_HI, CENTER_LO:CENTER_HI] = True

    for i in range(n):
        positive = i < n_pos
        img = np.clip(rng.normal(BG_BASE, noise_level, IMAGE_SHAPE), BG_MIN, BG_MAX)
        place_blob = positive or rng.random() < 0.5
        if place_blob:
            r = rng.uniform(6.0, 14.0)
            for _ in range(1000):
                if positive:
                    cy, cx = rng.uniform(20.0, 76.0, size=2)
                    mask = _disk_mask(cy, cx, r)
                    if int((mask & box).sum()) >= min_overlap_px:
                        break
                else:
                    cy, cx = rng.uniform(0.0, 96.0, size=2)
                    grown = _disk_mask(cy, cx, r + clearance_px)
                    if not (grown & box).any():
                        mask = _disk_mask(cy, cx, r)
                        break
            else:
                raise RuntimeError("blob placement did not converge")
            img[:, mask] = np.minimum(img[:, mask] + BLOB_GAIN, 1.0)
        images[i] = np.rint(img * 255.0).astype(np.uint8)
        labels[i] = 1 if positive else 0

    perm = rng.permutation(n)
    images, labels = images[perm], labels[perm]
    ids = [f"synth_{i:05d}" for i in range(n)]
    return LabeledDataset(_ArrayStore(images), labels, ids,
                          source=f"synthetic:n={n},noise={noise_level},seed={seed}")


# ---------------------------------------------------------------------------
# splitting / batching / augmentation
# ---------------------------------------------------------------------------


def split(dataset: LabeledDataset, fraction: float, seed: int,
          stratified: bool = False) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint, exhaustive partition; part_b receives ``fraction`` of the
    samples (per class when stratified, within one sample)."""
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    if stratified:
        b_parts = []
        for cls in (0, 1):
            idx = np.flatnonzero(dataset.labels == cls)
            take = int(fraction * idx.size + 0.5)
            b_parts.append(rng.permutation(idx)[:take])
        b_idx = np.sort(np.concatenate(b_parts))
    else:
        take = int(fraction * n + 0.5)
        b_idx = np.sort(rng.permutation(n)[:take])
    mask = np.ones(n, dtype=bool)
    mask[b_idx] = False
    a_idx = np.flatnonzero(mask)
    return dataset.subset(a_idx), dataset.subset(b_idx)


def augment_batch(images: np.ndarray, rng) -> np.ndarray:
    """Flip each image horizontally with p=0.5 and vertically with p=0.5,
    independently; labels are untouched by construction."""
    out = images.copy()
    draws = rng.random((images.shape[0], 2))
    hflip = draws[:, 0] < 0.5
    vflip = draws[:, 1] < 0.5
    out[hflip] = out[hflip][..., ::-1]
    out[vflip] = out[vflip][..., ::-1, :]
    return out


def batches(dataset: LabeledDataset, batch_size: int, shuffle_seed=None):
    """Yield (images, labels) batches; the final batch may be short.

    ``shuffle_seed`` may be None (dataset order), an int seed, or a numpy
    Generator (threaded across epochs by the train loop); a fixed seed gives
    a fixed order.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        rng = (np.random.default_rng(shuffle_seed)
               if isinstance(shuffle_seed, (int, np.integer)) else shuffle_seed)
        order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        yield dataset.images(idx), dataset.labels[idx]
