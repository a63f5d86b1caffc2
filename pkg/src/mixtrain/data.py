"""Dataset ingestion, stratified subsampling, and mixed-dataset construction.

Supported on-disk formats:

* ``idx``          -- big-endian magic-number image/label files (0x803/0x801)
* ``cifar_binary`` -- 3073-byte records, 1 label byte + 3072 pixel bytes
* ``synthetic_spec`` -- a small key=value text file describing seeded
  Gaussian-cluster images (classes, per_class, channels, height, width,
  sigma, seed)

Stored datasets are immutable after load; crop/flip augmentation happens only
at batch time via :func:`augment_batch`.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    features: np.ndarray            # [N, C, H, W] float32
    labels: Optional[np.ndarray]    # [N] int64 or None
    num_classes: Optional[int]
    role: str = "both"              # ssl | sl | both

    def __post_init__(self):
        if self.features.ndim != 4:
            raise DataError(f"features must be [N,C,H,W], got {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.features),):
                raise DataError("labels length does not match features")
            if self.num_classes is None:
                raise DataError("labeled dataset needs num_classes")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise DataError(
                    f"labels out of range [0, {self.num_classes}): "
                    f"min={self.labels.min()}, max={self.labels.max()}")
        if self.role in ("sl", "both") and self.labels is None and self.role == "sl":
            raise DataError("role=sl requires labels")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def item_shape(self):
        return self.features.shape[1:]


@dataclass
class MixedDataset:
    """Blended inputs with supervised labels; sources recorded for replay."""
    x: np.ndarray                   # [N, C, H, W]
    y: np.ndarray                   # [N]
    task_ids: np.ndarray            # [N]
    lam: float
    mode: str                       # identity | mixup
    sl_indices: np.ndarray
    ssl_indices: Optional[np.ndarray]

    def __len__(self) -> int:
        return len(self.x)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise DataError(f"{path}: truncated idx header")
        magic, count, rows, cols = struct.unpack(">iiii", head)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"{path}: bad idx image magic 0x{magic:08x}")
        buf = f.read()
    expect = count * rows * cols
    if len(buf) != expect:
        raise DataError(f"{path}: expected {expect} pixel bytes, got {len(buf)}")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(count, 1, rows, cols)
    return arr.astype(np.float32) / 255.0


def _read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise DataError(f"{path}: truncated idx header")
        magic, count = struct.unpack(">ii", head)
        if magic != IDX_LABEL_MAGIC:
            raise DataError(f"{path}: bad idx label magic 0x{magic:08x}")
        buf = f.read()
    if len(buf) != count:
        raise DataError(f"{path}: expected {count} label bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8).astype(np.int64)


def _guess_idx_labels_path(images_path: str) -> Optional[str]:
    cand = images_path.replace("images", "labels").replace("idx3", "idx1")
    return cand if cand != images_path and os.path.exists(cand) else None


def _load_cifar_binary(path: str) -> tuple[np.ndarray, np.ndarray]:
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR_RECORD_BYTES:
        raise DataError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD_BYTES}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    feats = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return feats, labels


def parse_kv(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed line {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def generate_synthetic(classes: int, per_class: int, channels: int, height: int,
                       width: int, sigma: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian clusters around per-class prototype images, reproducible."""
    rng = np.random.Generator(np.random.PCG64(seed))
    protos = rng.uniform(0.0, 1.0, size=(classes, channels, height, width))
    feats = np.empty((classes * per_class, channels, height, width), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        noise = rng.normal(0.0, sigma, size=(per_class, channels, height, width))
        block = np.clip(protos[c] + noise, 0.0, 1.0)
        feats[c * per_class:(c + 1) * per_class] = block.astype(np.float32)
        labels[c * per_class:(c + 1) * per_class] = c
    return feats, labels


def _load_synthetic_spec(path: str) -> tuple[np.ndarray, np.ndarray]:
    kv = parse_kv(path)
    try:
        return generate_synthetic(
            classes=int(kv.get("classes", 10)),
            per_class=int(kv.get("per_class", 100)),
            channels=int(kv.get("channels", 1)),
            height=int(kv.get("height", 16)),
            width=int(kv.get("width", 16)),
            sigma=float(kv.get("sigma", 0.2)),
            seed=int(kv.get("seed", 7)),
        )
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


def load(path: str, fmt: str, labels_path: Optional[str] = None,
         role: str = "both") -> Dataset:
    name = os.path.basename(path)
    if fmt == "idx":
        feats = _read_idx_images(path)
        lp = labels_path or _guess_idx_labels_path(path)
        labels = _read_idx_labels(lp) if lp else None
        if labels is not None and len(labels) != len(feats):
            raise DataError(f"{path}: {len(feats)} images but {len(labels)} labels")
        ncls = int(labels.max()) + 1 if labels is not None else None
    elif fmt == "cifar_binary":
        feats, labels = _load_cifar_binary(path)
        ncls = int(labels.max()) + 1
    elif fmt == "synthetic_spec":
        feats, labels = _load_synthetic_spec(path)
        ncls = int(labels.max()) + 1
    else:
        raise DataError(f"unknown dataset format {fmt!r}")
    if labels is None:
        role = "ssl"
    return Dataset(name=name, features=feats, labels=labels, num_classes=ncls, role=role)


# ---------------------------------------------------------------------------
# subsampling / splitting
# ---------------------------------------------------------------------------

def _stratified_pick(labels: np.ndarray, count_of, rng) -> np.ndarray:
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = count_of(len(idx))
        if k > 0:
            picked.append(rng.choice(idx, size=k, replace=False))
    if not picked:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(picked)).astype(np.int64)


def subsample(ds: Dataset, p: float, seed: int) -> Dataset:
    """Keep a fraction p, uniformly at random; stratified per class if labeled."""
    if not 0.0 < p <= 1.0:
        raise DataError(f"fraction p must be in (0, 1], got {p}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if ds.labels is not None:
        idx = _stratified_pick(ds.labels, lambda n: int(np.floor(p * n)), rng)
    else:
        k = int(np.floor(p * len(ds)))
        idx = np.sort(rng.choice(len(ds), size=k, replace=False)) if k else np.empty(0, np.int64)
    if idx.size == 0:
        raise DataError(f"subsample of {ds.name} at p={p} is empty")
    return Dataset(name=ds.name, features=ds.features[idx],
                   labels=None if ds.labels is None else ds.labels[idx],
                   num_classes=ds.num_classes, role=ds.role)


def split_train_val(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out a fixed fraction for evaluation (stratified when labeled)."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if ds.labels is not None:
        val_idx = _stratified_pick(ds.labels, lambda n: max(1, int(np.floor(val_fraction * n))), rng)
    else:
        k = max(1, int(np.floor(val_fraction * len(ds))))
        val_idx = np.sort(rng.choice(len(ds), size=k, replace=False))
    mask = np.zeros(len(ds), dtype=bool)
    mask[val_idx] = True
    if mask.all():
        raise DataError("validation split would consume the whole dataset")

    def take(sel, suffix):
        return Dataset(name=ds.name + suffix, features=ds.features[sel],
                       labels=None if ds.labels is None else ds.labels[sel],
                       num_classes=ds.num_classes, role=ds.role)

    return take(~mask, ""), take(mask, ":val")


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

def mix(d_ssl: Dataset, d_sl: Dataset, lam: float, seed: int,
        task_id: int = 0) -> MixedDataset:
    """Blend each supervised item with a random unlabeled item.

    When both sides are the same dataset the blend degenerates to the
    supervised data itself (identity mode), bit-for-bit.
    """
    if d_sl.labels is None:
        raise DataError(f"mix: supervised side {d_sl.name!r} has no labels")
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"mix: lambda must be in [0, 1], got {lam}")
    n = len(d_sl)
    task_ids = np.full(n, task_id, dtype=np.int64)
    if d_ssl is d_sl or d_ssl.name == d_sl.name:
        return MixedDataset(x=d_sl.features, y=d_sl.labels, task_ids=task_ids,
                            lam=lam, mode="identity",
                            sl_indices=np.arange(n, dtype=np.int64), ssl_indices=None)
    if d_ssl.item_shape != d_sl.item_shape:
        raise DataError(f"mix: item shapes differ: {d_ssl.item_shape} vs {d_sl.item_shape}")
    rng = np.random.Generator(np.random.PCG64(seed))
    ssl_idx = rng.integers(0, len(d_ssl), size=n)
    lam32 = np.float32(lam)
    x = lam32 * d_sl.features + (np.float32(1.0) - lam32) * d_ssl.features[ssl_idx]
    return MixedDataset(x=x, y=d_sl.labels, task_ids=task_ids, lam=lam, mode="mixup",
                        sl_indices=np.arange(n, dtype=np.int64),
                        ssl_indices=ssl_idx.astype(np.int64))


def replay_mix(mixed: MixedDataset, d_ssl: Dataset, d_sl: Dataset) -> np.ndarray:
    """Recompute the blend from its recorded sources (for verification)."""
    if mixed.mode == "identity":
        return d_sl.features[mixed.sl_indices]
    lam32 = np.float32(mixed.lam)
    return lam32 * d_sl.features[mixed.sl_indices] \
        + (np.float32(1.0) - lam32) * d_ssl.features[mixed.ssl_indices]


# ---------------------------------------------------------------------------
# batching and augmentation
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray
    y: Optional[np.ndarray]
    task_ids: Optional[np.ndarray]

    def __len__(self) -> int:
        return len(self.x)


def batches(ds, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Reshuffled every epoch, keyed by (seed, epoch); last partial batch kept."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch]))) if n else None
    order = rng.permutation(n) if n else np.empty(0, np.int64)
    if isinstance(ds, MixedDataset):
        feats, labels, tasks = ds.x, ds.y, ds.task_ids
    else:
        feats, labels, tasks = ds.features, ds.labels, None
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield Batch(x=feats[sel],
                    y=None if labels is None else labels[sel],
                    task_ids=None if tasks is None else tasks[sel])


def augment_batch(x: np.ndarray, rng: np.random.Generator,
                  pad: int = 4, flip: bool = True) -> np.ndarray:
    """Random crop after zero-padding, then horizontal flip with p=0.5."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i in range(n):
        dy = int(rng.integers(0, 2 * pad + 1))
        dx = int(rng.integers(0, 2 * pad + 1))
        img = padded[i, :, dy:dy + h, dx:dx + w]
        if flip and rng.random() < 0.5:
            img = img[:, :, ::-1]
        out[i] = img
    return out
