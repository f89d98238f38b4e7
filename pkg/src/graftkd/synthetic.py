"""Procedural 10-class image source for desk-scale runs without a downloaded dataset.

Each image is one randomly posed, scaled, rotated and colored shape on a
smoothly varying background, with line clutter and pixel noise. Generation
is a pure function of ``(seed, split, index range)``.
"""

from __future__ import annotations

import numpy as np

from .fewshot_data import LabeledSource

__all__ = ["SHAPE_CLASSES", "render_shapes", "shapes_source"]

SHAPE_CLASSES = (
    "disk",
    "ring",
    "square",
    "square_outline",
    "triangle",
    "plus",
    "striped_disk",
    "two_dots",
    "crescent",
    "half_disk",
)


def _masks(cls: np.ndarray, u: np.ndarray, v: np.ndarray, phase: np.ndarray) -> np.ndarray:
    rho = np.sqrt(u * u + v * v)
    box = np.maximum(np.abs(u), np.abs(v))
    out = np.zeros(u.shape, dtype=bool)
    sel = lambda k: (cls == k)[:, None, None]  # noqa: E731
    out |= sel(0) & (rho < 0.9)
    out |= sel(1) & (np.abs(rho - 0.75) < 0.2)
    out |= sel(2) & (box < 0.75)
    out |= sel(3) & (np.abs(box - 0.7) < 0.16)
    tri = (v > -0.5) & (np.sqrt(3) * u + v < 1.0) & (-np.sqrt(3) * u + v < 1.0)
    out |= sel(4) & tri
    plus = ((np.abs(u) < 0.22) & (np.abs(v) < 0.95)) | ((np.abs(v) < 0.22) & (np.abs(u) < 0.95))
    out |= sel(5) & plus
    out |= sel(6) & (rho < 0.95) & (np.sin(7.0 * u + phase[:, None, None]) > 0)
    dots = (np.hypot(u - 0.5, v) < 0.36) | (np.hypot(u + 0.5, v) < 0.36)
    out |= sel(7) & dots
    out |= sel(8) & (rho < 0.9) & (np.hypot(u - 0.45, v) > 0.7)
    out |= sel(9) & (rho < 0.9) & (v > 0)
    return out


def render_shapes(
    labels: np.ndarray,
    rng: np.random.Generator,
    size: int = 32,
    noise: float = 0.1,
    clutter: float = 0.6,
    palette: float = 1.0,
    color_cue: float = 0.0,
    class_colors: np.ndarray | None = None,
) -> np.ndarray:
    """Render one uint8 ``(size, size, 3)`` image per label.

    ``clutter`` is the per-line probability of each of two distractor lines;
    ``palette`` in (0, 1] shrinks the range of random colors around mid-gray.
    ``color_cue`` in [0, 1] mixes a per-class preferred (fg, bg) color pair,
    ``class_colors`` of shape ``(classes, 2, 3)`` in [-1, 1], into the random
    colors, the way natural-image classes carry color statistics.
    """
    n = len(labels)
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    cy = rng.uniform(0.3, 0.7, n) * size
    cx = rng.uniform(0.3, 0.7, n) * size
    scale = rng.uniform(0.18, 0.36, n) * size
    theta = rng.uniform(0, 2 * np.pi, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    dy = (yy[None] - cy[:, None, None]) / scale[:, None, None]
    dx = (xx[None] - cx[:, None, None]) / scale[:, None, None]
    c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    u, v = c * dx + s * dy, -s * dx + c * dy
    mask = _masks(np.asarray(labels), u, v, phase)

    bg = rng.uniform(-1, 1, (n, 3))
    fg = rng.uniform(-1, 1, (n, 3))
    if color_cue:
        fg = (1 - color_cue) * fg + color_cue * class_colors[labels, 0]
        bg = (1 - color_cue) * bg + color_cue * class_colors[labels, 1]
    bg = 0.5 + 0.4 * palette * bg
    fg = 0.5 + 0.4 * palette * fg
    # enforce a minimum luminance contrast by pushing fg away from bg
    diff = fg.mean(1) - bg.mean(1)
    push = np.where(np.abs(diff) < 0.2, np.sign(diff + 1e-9) * (0.2 - np.abs(diff)), 0.0)
    fg = np.clip(fg + push[:, None], 0.0, 1.0)
    grad_dir = rng.uniform(0, 2 * np.pi, n)
    grad = (np.cos(grad_dir)[:, None, None] * (xx[None] / size - 0.5) + np.sin(grad_dir)[:, None, None] * (yy[None] / size - 0.5))
    grad_amp = rng.uniform(0.0, 0.3, n)[:, None, None, None]
    img = bg[:, None, None, :] + grad_amp * grad[..., None]
    img = np.where(mask[..., None], fg[:, None, None, :], img)

    # clutter: random thin line segments in random colors
    for _ in range(2):
        keep = rng.random(n) < clutter
        a = rng.uniform(0, 2 * np.pi, n)[:, None, None]
        off = rng.uniform(-0.4, 0.4, n)[:, None, None] * size
        dist = np.abs(np.cos(a) * (xx[None] - size / 2) + np.sin(a) * (yy[None] - size / 2) - off)
        line = (dist < 0.7) & keep[:, None, None]
        col = rng.uniform(0, 1, (n, 3))
        img = np.where(line[..., None], col[:, None, None, :], img)

    img = img + rng.normal(0.0, noise, img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def shapes_source(
    name: str = "shapes10",
    split: str = "train",
    n_train: int = 5000,
    n_test: int = 2000,
    seed: int = 0,
    size: int = 32,
    noise_pct: int = 10,
    clutter_pct: int = 60,
    palette_pct: int = 100,
    cue_pct: int = 0,
) -> LabeledSource:
    """Balanced labeled split of the procedural shapes dataset."""
    if name != "shapes10":
        raise ValueError(f"unknown synthetic dataset {name!r}")
    n = n_train if split == "train" else n_test
    if n % len(SHAPE_CLASSES):
        raise ValueError(f"split size {n} must be divisible by {len(SHAPE_CLASSES)}")
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.tile(np.arange(len(SHAPE_CLASSES)), n // len(SHAPE_CLASSES))
    labels = labels[rng.permutation(n)]
    class_colors = np.random.default_rng([seed, 2]).uniform(-1, 1, (len(SHAPE_CLASSES), 2, 3))
    opts = dict(
        size=size,
        noise=noise_pct / 100.0,
        clutter=clutter_pct / 100.0,
        palette=palette_pct / 100.0,
        color_cue=cue_pct / 100.0,
        class_colors=class_colors,
    )
    chunks = [render_shapes(labels[i : i + 500], rng, **opts) for i in range(0, n, 500)]
    images = np.concatenate(chunks)
    return LabeledSource(
        images,
        labels,
        len(SHAPE_CLASSES),
        f"synthetic:{name}?n_train={n_train}&n_test={n_test}&seed={seed}"
        f"&noise_pct={noise_pct}&clutter_pct={clutter_pct}&palette_pct={palette_pct}&cue_pct={cue_pct}",
        mean=(0.5, 0.5, 0.5),
        std=(0.25, 0.25, 0.25),
    )
