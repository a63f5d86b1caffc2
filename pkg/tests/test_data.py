import struct

import numpy as np
import numpy.testing as npt
import pytest

from mixtrain import data as D
from mixtrain.data import (DataError, Dataset, augment_batch, batches, load, mix,
                           replay_mix, split_train_val, subsample)


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", D.IDX_IMAGE_MAGIC, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", D.IDX_LABEL_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def make_dataset(n=20, classes=4, seed=0, h=8, w=8, labeled=True, name="ds"):
    rng = np.random.default_rng(seed)
    feats = rng.random((n, 1, h, w)).astype(np.float32)
    labels = np.arange(n) % classes if labeled else None
    return Dataset(name=name, features=feats, labels=labels,
                   num_classes=classes if labeled else None)


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def test_idx_loader_roundtrip(tmp_path):
    imgs = (np.arange(4 * 28 * 28) % 256).reshape(4, 28, 28)
    ipath = tmp_path / "train-images-idx3-ubyte"
    lpath = tmp_path / "train-labels-idx1-ubyte"
    write_idx_images(ipath, imgs)
    write_idx_labels(lpath, [0, 1, 2, 1])
    ds = load(str(ipath), "idx")
    assert len(ds) == 4 and ds.item_shape == (1, 28, 28)
    npt.assert_allclose(ds.features[2, 0] * 255.0, imgs[2], atol=1e-5)
    npt.assert_array_equal(ds.labels, [0, 1, 2, 1])


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad"
    with open(p, "wb") as f:
        f.write(struct.pack(">iiii", 0xDEAD, 1, 2, 2))
        f.write(bytes(4))
    with pytest.raises(DataError, match="magic"):
        load(str(p), "idx")


def test_idx_truncated(tmp_path):
    p = tmp_path / "trunc-images-idx3-ubyte"
    with open(p, "wb") as f:
        f.write(struct.pack(">iiii", D.IDX_IMAGE_MAGIC, 2, 4, 4))
        f.write(bytes(10))  # needs 32
    with pytest.raises(DataError, match="expected 32"):
        load(str(p), "idx")


def test_idx_without_labels_is_ssl_role(tmp_path):
    p = tmp_path / "plain.idx"
    write_idx_images(p, np.zeros((3, 4, 4)))
    ds = load(str(p), "idx")
    assert ds.labels is None and ds.role == "ssl"


def test_cifar_binary_record_count(tmp_path):
    recs = 5
    raw = np.zeros((recs, D.CIFAR_RECORD_BYTES), dtype=np.uint8)
    raw[:, 0] = [0, 1, 2, 3, 4]
    raw[0, 1] = 255
    p = tmp_path / "batch.bin"
    raw.tofile(p)
    ds = load(str(p), "cifar_binary")
    assert len(ds) == recs and ds.item_shape == (3, 32, 32)
    npt.assert_array_equal(ds.labels, [0, 1, 2, 3, 4])
    assert ds.features[0, 0, 0, 0] == 1.0


def test_cifar_binary_bad_size(tmp_path):
    p = tmp_path / "bad.bin"
    with open(p, "wb") as f:
        f.write(bytes(100))
    with pytest.raises(DataError, match="3073"):
        load(str(p), "cifar_binary")


def test_synthetic_spec_deterministic(tmp_path):
    p = tmp_path / "syn.spec"
    p.write_text("classes=3\nper_class=10\nseed=7\nsigma=0.1\nheight=8\nwidth=8\n")
    a = load(str(p), "synthetic_spec")
    b = load(str(p), "synthetic_spec")
    assert len(a) == 30 and a.num_classes == 3
    npt.assert_array_equal(a.features, b.features)
    npt.assert_array_equal(a.labels, b.labels)


def test_unknown_format():
    with pytest.raises(DataError, match="format"):
        load("nope", "parquet")


# ---------------------------------------------------------------------------
# subsample / split
# ---------------------------------------------------------------------------

def test_subsample_full_fraction_is_identity_multiset():
    ds = make_dataset(n=30)
    out = subsample(ds, 1.0, seed=3)
    assert len(out) == 30
    npt.assert_array_equal(np.sort(out.features, axis=0), np.sort(ds.features, axis=0))


def test_subsample_tenth_of_thousand():
    ds = make_dataset(n=1000, classes=10)
    out = subsample(ds, 0.1, seed=5)
    assert len(out) == 100


def test_subsample_stratified_counts():
    ds = make_dataset(n=1000, classes=10)
    out = subsample(ds, 0.1, seed=5)
    counts = np.bincount(out.labels, minlength=10)
    npt.assert_array_equal(counts, [10] * 10)


def test_subsample_empty_rejected():
    ds = make_dataset(n=10, classes=10)  # one item per class
    with pytest.raises(DataError, match="empty"):
        subsample(ds, 0.05, seed=1)


def test_subsample_fraction_range():
    with pytest.raises(DataError):
        subsample(make_dataset(), 0.0, seed=1)
    with pytest.raises(DataError):
        subsample(make_dataset(), 1.2, seed=1)


def test_subsample_size_composes_with_full_pass():
    ds = make_dataset(n=200, classes=4)
    once = subsample(ds, 0.25, seed=9)
    via_full = subsample(subsample(ds, 1.0, seed=1), 0.25, seed=9)
    assert len(once) == len(via_full)


def test_split_train_val_disjoint_and_stratified():
    ds = make_dataset(n=100, classes=5)
    tr, va = split_train_val(ds, 0.1, seed=2)
    assert len(tr) == 90 and len(va) == 10
    npt.assert_array_equal(np.bincount(va.labels, minlength=5), [2] * 5)


# ---------------------------------------------------------------------------
# mix
# ---------------------------------------------------------------------------

def test_mix_identity_same_object():
    ds = make_dataset(n=12)
    mixed = mix(ds, ds, lam=0.5, seed=1)
    assert mixed.mode == "identity" and len(mixed) == len(ds)
    npt.assert_array_equal(mixed.x, ds.features)
    npt.assert_array_equal(mixed.y, ds.labels)


def test_mix_lambda_one_keeps_supervised_inputs():
    sl = make_dataset(n=10, seed=1, name="sl")
    ssl = make_dataset(n=40, seed=2, labeled=False, name="ssl")
    mixed = mix(ssl, sl, lam=1.0, seed=3)
    assert mixed.mode == "mixup"
    npt.assert_array_equal(mixed.x, sl.features)


def test_mix_halfway_arithmetic():
    sl = Dataset("sl", np.full((1, 1, 1, 2), 0, np.float32) + [[2.0, 4.0]],
                 np.array([0]), 1)
    ssl = Dataset("ssl", np.full((1, 1, 1, 2), 0, np.float32) + [[0.0, 2.0]], None, None)
    mixed = mix(ssl, sl, lam=0.5, seed=0)
    npt.assert_array_equal(mixed.x[0, 0, 0], [1.0, 3.0])
    assert mixed.y[0] == 0


def test_mix_replay_is_bit_exact():
    sl = make_dataset(n=25, seed=4, name="sl")
    ssl = make_dataset(n=77, seed=5, labeled=False, name="ssl")
    mixed = mix(ssl, sl, lam=0.3, seed=11)
    npt.assert_array_equal(replay_mix(mixed, ssl, sl), mixed.x)


def test_mix_shape_mismatch():
    sl = make_dataset(n=4, h=8, name="sl")
    ssl = make_dataset(n=4, h=4, labeled=False, name="ssl")
    with pytest.raises(DataError, match="shapes"):
        mix(ssl, sl, lam=0.5, seed=0)


def test_mix_unlabeled_supervised_side():
    a = make_dataset(n=4, labeled=False, name="a")
    b = make_dataset(n=4, labeled=False, name="b")
    with pytest.raises(DataError, match="labels"):
        mix(a, b, lam=0.5, seed=0)


# ---------------------------------------------------------------------------
# batches / augmentation
# ---------------------------------------------------------------------------

def test_batches_sizes_and_partial():
    ds = make_dataset(n=10)
    sizes = [len(b) for b in batches(ds, 4, seed=1, epoch=0)]
    assert sizes == [4, 4, 2]


def test_batches_same_key_identical():
    ds = make_dataset(n=16)
    a = [b.x for b in batches(ds, 4, seed=1, epoch=3)]
    b = [b.x for b in batches(ds, 4, seed=1, epoch=3)]
    for xa, xb in zip(a, b):
        npt.assert_array_equal(xa, xb)


def test_batches_reshuffle_across_epochs():
    ds = make_dataset(n=32)
    a = np.concatenate([b.x for b in batches(ds, 8, seed=1, epoch=0)])
    b = np.concatenate([b.x for b in batches(ds, 8, seed=1, epoch=1)])
    assert not np.array_equal(a, b)


def test_batches_carry_labels_and_tasks():
    ds = make_dataset(n=6)
    mixed = mix(ds, ds, lam=0.5, seed=0, task_id=3)
    for b in batches(mixed, 4, seed=0, epoch=0):
        assert b.y is not None and np.all(b.task_ids == 3)


def test_augmentation_disabled_is_bit_stable():
    ds = make_dataset(n=8)
    a = [b.x for b in batches(ds, 4, seed=2, epoch=0)]
    b = [b.x for b in batches(ds, 4, seed=2, epoch=0)]
    for xa, xb in zip(a, b):
        npt.assert_array_equal(xa, xb)


def test_augment_batch_shapes_and_determinism():
    x = np.random.default_rng(0).random((5, 1, 8, 8)).astype(np.float32)
    r1 = augment_batch(x, np.random.default_rng(42))
    r2 = augment_batch(x, np.random.default_rng(42))
    assert r1.shape == x.shape
    npt.assert_array_equal(r1, r2)
    assert not np.array_equal(r1, x)


def test_augment_flip_disabled_only_crops():
    x = np.random.default_rng(0).random((3, 1, 8, 8)).astype(np.float32)
    out = augment_batch(x, np.random.default_rng(1), pad=0, flip=False)
    npt.assert_array_equal(out, x)
