"""K-shot unlabeled training sets, augmentation and seeded batch iteration.

Images travel as ``uint8`` arrays of shape ``(N, H, W, C)``; conversion to
normalized float tensors happens at batch time.
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence
from urllib.parse import parse_qsl

import numpy as np
import torch

__all__ = [
    "FewShotDataset",
    "FewShotLoader",
    "LabeledSource",
    "augment",
    "batch_size_for",
    "load_source",
    "make_loader",
    "sample_kshot",
    "to_tensor",
]

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)


@dataclass
class LabeledSource:
    """A labeled image collection (train or test split)."""

    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    source_id: str
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, H, W, C) with one label per image")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, n: int, seed: int) -> "LabeledSource":
        """Class-balanced random subset of ``n`` images (``n`` divisible by the class count)."""
        if n % self.num_classes:
            raise ValueError(f"subset size {n} not divisible by {self.num_classes} classes")
        idx = _per_class_draw(self.labels, self.num_classes, n // self.num_classes, seed)
        return LabeledSource(
            self.images[idx], self.labels[idx], self.num_classes, f"{self.source_id}[{n}@{seed}]", self.mean, self.std
        )

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return to_tensor(self.images, self.mean, self.std), torch.from_numpy(self.labels)


@dataclass(frozen=True)
class FewShotDataset:
    """``K`` unlabeled images per class. Only images are exposed."""

    samples: np.ndarray = field(repr=False)  # (K * N, H, W, C) uint8
    K: int
    num_classes: int
    source_id: str
    seed: int
    source_indices: tuple[int, ...] = field(repr=False)
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.samples[i]


def _per_class_draw(labels: np.ndarray, num_classes: int, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < k:
            raise ValueError(f"class {c} has {len(pool)} samples, fewer than K={k}")
        picked.append(np.sort(rng.choice(pool, size=k, replace=False)))
    return np.concatenate(picked)


def sample_kshot(source: LabeledSource, K: int, seed: int) -> FewShotDataset:
    """Draw ``K`` images per class uniformly without replacement; labels are discarded."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    idx = _per_class_draw(source.labels, source.num_classes, K, seed)
    return FewShotDataset(
        samples=source.images[idx].copy(),
        K=K,
        num_classes=source.num_classes,
        source_id=source.source_id,
        seed=seed,
        source_indices=tuple(int(i) for i in idx),
        mean=source.mean,
        std=source.std,
    )


def batch_size_for(K: int) -> int:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    return max(1, (64 * K) // 10)


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    padding: int = 4,
    offset: tuple[int, int] | None = None,
    flip: bool | None = None,
) -> np.ndarray:
    """Zero-padded random crop followed by a horizontal flip with probability 0.5.

    ``image`` is ``(H, W, C)``. ``offset`` and ``flip`` force the random
    choices; the crop offset indexes the padded image, so ``(padding, padding)``
    is the centered (identity) crop.
    """
    h, w = image.shape[:2]
    if offset is None:
        offset = (int(rng.integers(0, 2 * padding + 1)), int(rng.integers(0, 2 * padding + 1)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if padding:
        padded = np.zeros((h + 2 * padding, w + 2 * padding) + image.shape[2:], dtype=image.dtype)
        padded[padding : padding + h, padding : padding + w] = image
    else:
        padded = image
    dy, dx = offset
    out = padded[dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def to_tensor(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    """uint8 ``(N, H, W, C)`` -> normalized float32 ``(N, C, H, W)``."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float().div_(255.0)
    m = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    return (x - m) / s


class FewShotLoader:
    """Seeded epoch iterator: reshuffles and re-augments per epoch, keeps the last partial batch.

    The augmentation stream of sample ``i`` in epoch ``e`` depends only on
    ``(seed, e, i)``; ``iter(loader)`` advances an internal epoch counter,
    ``loader.epoch(e)`` replays a given epoch.
    """

    def __init__(self, dataset: FewShotDataset, batch_size: int, seed: int, augmentation: bool = True, padding: int = 4):
        if len(dataset) == 0:
            raise ValueError("cannot iterate an empty dataset")
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.augmentation = augmentation
        self.padding = padding
        self._next_epoch = 0

    def __len__(self) -> int:
        return math.ceil(len(self.dataset) / self.batch_size)

    def __iter__(self) -> Iterator[torch.Tensor]:
        e = self._next_epoch
        self._next_epoch += 1
        return self.epoch(e)

    def epoch_indices(self, e: int) -> list[np.ndarray]:
        perm = np.random.default_rng([self.seed, e]).permutation(len(self.dataset))
        return [perm[i : i + self.batch_size] for i in range(0, len(perm), self.batch_size)]

    def epoch(self, e: int) -> Iterator[torch.Tensor]:
        ds = self.dataset
        for idx in self.epoch_indices(e):
            if self.augmentation:
                imgs = np.stack(
                    [augment(ds.samples[i], np.random.default_rng([self.seed, e, int(i)]), self.padding) for i in idx]
                )
            else:
                imgs = ds.samples[idx]
            yield to_tensor(imgs, ds.mean, ds.std)


def make_loader(dataset: FewShotDataset, batch_size: int, seed: int, augmentation: bool = True, padding: int = 4) -> FewShotLoader:
    return FewShotLoader(dataset, batch_size, seed, augmentation, padding)


# ---------------------------------------------------------------------------
# source ingestion


def load_source(locator: str, split: str = "train") -> LabeledSource:
    """Resolve a dataset locator to a labeled split.

    Accepted locators:

    * ``synthetic:shapes10?n_train=5000&n_test=2000&seed=0`` - procedural shapes
    * a ``.npz`` file with ``x_train, y_train, x_test, y_test`` (uint8 NHWC images)
    * a ``cifar-10-batches-py`` / ``cifar-100-python`` directory
    * a directory ``<root>/<split>/<class_name>/*.png`` of image files
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if locator.startswith("synthetic:"):
        from .synthetic import shapes_source

        name, _, query = locator[len("synthetic:") :].partition("?")
        opts = {k: int(v) for k, v in parse_qsl(query)}
        return shapes_source(name, split, **opts)
    path = Path(locator)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {locator}")
    if path.suffix == ".npz":
        return _load_npz(path, split)
    if (path / "data_batch_1").exists() or (path / "train").is_file():
        return _load_cifar(path, split)
    return _load_image_dir(path, split)


def _load_npz(path: Path, split: str) -> LabeledSource:
    with np.load(path) as z:
        x, y = z[f"x_{split}"], z[f"y_{split}"].astype(np.int64).ravel()
        mean = tuple(float(v) for v in z["mean"]) if "mean" in z else None
        std = tuple(float(v) for v in z["std"]) if "std" in z else None
    if x.ndim == 3:
        x = x[..., None]
    if mean is None:
        mean = tuple(float(v) for v in (x.reshape(-1, x.shape[-1]).mean(0) / 255.0))
        std = tuple(float(v) for v in (x.reshape(-1, x.shape[-1]).std(0) / 255.0))
    return LabeledSource(x, y, int(y.max()) + 1, str(path), mean, std)


def _unpickle(p: Path) -> dict:
    with open(p, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _load_cifar(path: Path, split: str) -> LabeledSource:
    if (path / "data_batch_1").exists():
        files = [path / f"data_batch_{i}" for i in range(1, 6)] if split == "train" else [path / "test_batch"]
        key, n_cls, mean, std = "labels", 10, CIFAR10_MEAN, CIFAR10_STD
    else:
        files = [path / split]
        key, n_cls, mean, std = "fine_labels", 100, CIFAR100_MEAN, CIFAR100_STD
    xs, ys = [], []
    for f in files:
        d = _unpickle(f)
        xs.append(np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(np.asarray(d[key]))
    return LabeledSource(np.concatenate(xs), np.concatenate(ys), n_cls, f"{path.name}:{split}", mean, std)


def _load_image_dir(path: Path, split: str) -> LabeledSource:
    from PIL import Image

    root = path / split if (path / split).is_dir() else path
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class directories under {root}")
    xs, ys = [], []
    for c, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"):
                xs.append(np.asarray(Image.open(f).convert("RGB"), dtype=np.uint8))
                ys.append(c)
    x = np.stack(xs)
    flat = x.reshape(-1, 3) / 255.0
    return LabeledSource(
        x, np.asarray(ys), len(classes), f"{path}:{split}", tuple(flat.mean(0).tolist()), tuple(flat.std(0).tolist())
    )
