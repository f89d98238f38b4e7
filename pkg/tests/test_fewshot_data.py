import numpy as np
import pytest
from collections import Counter

from graftkd.fewshot_data import (
    FewShotDataset,
    LabeledSource,
    augment,
    load_source,
    make_loader,
    sample_kshot,
)


def make_source(n_per_class=12, classes=10, res=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    images = rng.integers(0, 256, (len(labels), res, res, 3), dtype=np.uint8)
    # encode identity in the first pixel row so samples are distinguishable
    images[:, 0, 0, 0] = np.arange(len(labels)) % 256
    return LabeledSource(images, labels, classes, "unit")


def test_kshot_counts_and_labels_hidden():
    src = make_source()
    ds = sample_kshot(src, 1, seed=0)
    assert len(ds) == 10
    per_class = Counter(src.labels[list(ds.source_indices)])
    assert all(per_class[c] == 1 for c in range(10))
    assert not any("label" in name for name in vars(ds))
    assert not hasattr(ds, "labels")


def test_kshot_hundred_classes():
    src = make_source(n_per_class=10, classes=100, res=4)
    ds = sample_kshot(src, 10, seed=3)
    assert len(ds) == 1000
    assert set(Counter(src.labels[list(ds.source_indices)]).values()) == {10}
    assert len(set(ds.source_indices)) == 1000  # without replacement


def test_kshot_determinism():
    src = make_source()
    a, b, c = sample_kshot(src, 5, 1), sample_kshot(src, 5, 1), sample_kshot(src, 5, 2)
    assert np.array_equal(a.samples, b.samples)
    assert sorted(a.source_indices) != sorted(c.source_indices)


def test_kshot_too_few():
    with pytest.raises(ValueError, match="fewer than K"):
        sample_kshot(make_source(n_per_class=3), 5, 0)


def test_augment_flip_involution():
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    rng = np.random.default_rng(0)
    once = augment(img, rng, padding=0, offset=(0, 0), flip=True)
    assert np.array_equal(augment(once, rng, padding=0, offset=(0, 0), flip=True), img)
    assert sorted(once.ravel()) == sorted(img.ravel())


def test_augment_identity_crop():
    img = np.random.default_rng(1).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    rng = np.random.default_rng(0)
    assert np.array_equal(augment(img, rng, padding=0, offset=(0, 0), flip=False), img)
    assert np.array_equal(augment(img, rng, padding=4, offset=(4, 4), flip=False), img)


def test_augment_keeps_resolution():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    for s in range(20):
        assert augment(img, np.random.default_rng(s)).shape == (32, 32, 3)


def test_loader_partial_batch_and_union():
    ds = sample_kshot(make_source(), 1, 0)
    loader = make_loader(ds, 6, seed=0, augmentation=False)
    batches = list(loader.epoch(0))
    assert [len(b) for b in batches] == [6, 4]
    order = np.concatenate(loader.epoch_indices(0))
    assert sorted(order.tolist()) == list(range(10))


def test_loader_determinism():
    ds = sample_kshot(make_source(), 2, 0)
    a = [b.numpy() for b in make_loader(ds, 8, seed=5).epoch(3)]
    b = [b.numpy() for b in make_loader(ds, 8, seed=5).epoch(3)]
    c = [b.numpy() for b in make_loader(ds, 8, seed=5).epoch(4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_loader_iter_advances_epochs():
    ds = sample_kshot(make_source(), 2, 0)
    loader = make_loader(ds, 8, seed=5)
    first = [b.numpy() for b in loader]
    replay = [b.numpy() for b in loader.epoch(0)]
    assert all(np.array_equal(x, y) for x, y in zip(first, replay))


def test_loader_errors():
    empty = FewShotDataset(np.zeros((0, 4, 4, 3), np.uint8), 1, 0, "x", 0, ())
    with pytest.raises(ValueError):
        make_loader(empty, 4, 0)
    with pytest.raises(ValueError):
        make_loader(sample_kshot(make_source(), 1, 0), 0, 0)


def test_npz_source_round_trip(tmp_path):
    src = make_source()
    path = tmp_path / "packed.npz"
    np.savez(path, x_train=src.images, y_train=src.labels, x_test=src.images[:20], y_test=src.labels[:20])
    loaded = load_source(str(path), "train")
    assert np.array_equal(loaded.images, src.images) and loaded.num_classes == 10
    assert len(load_source(str(path), "test")) == 20


def test_image_dir_source(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(0)
    for c in ("cat", "dog"):
        (tmp_path / "train" / c).mkdir(parents=True)
        for i in range(3):
            Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(tmp_path / "train" / c / f"{i}.png")
    src = load_source(str(tmp_path), "train")
    assert len(src) == 6 and src.num_classes == 2 and src.images.shape == (6, 8, 8, 3)


def test_synthetic_source_is_deterministic():
    a = load_source("synthetic:shapes10?n_train=100&n_test=50&seed=1")
    b = load_source("synthetic:shapes10?n_train=100&n_test=50&seed=1")
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert set(Counter(a.labels).values()) == {10}
    assert len(load_source("synthetic:shapes10?n_train=100&n_test=50&seed=1", "test")) == 50


def test_missing_source():
    with pytest.raises(FileNotFoundError):
        load_source("/nonexistent/data.npz")
