"""Semantic-map rendering and matplotlib report figures.

Figures are written with the Agg backend and without a ``Software`` metadata
entry so repeated runs produce identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .errors import DataError, UsageError  # noqa: E402
from .segmentation import SemanticMap  # noqa: E402

# label 0 (background) is neutral gray; concepts get saturated, well separated colors
PALETTE = np.array([
    [128, 128, 128],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 0, 128],
], dtype=np.uint8)

FIG_META = {"Software": None}


def render_semantic_map(smap: SemanticMap, palette: np.ndarray = PALETTE, scale: int = 1) -> np.ndarray:
    labels = smap.labels.numpy() if isinstance(smap.labels, torch.Tensor) else np.asarray(smap.labels)
    if labels.max(initial=0) >= len(palette) or labels.min(initial=0) < 0:
        raise UsageError(f"labels exceed the {len(palette)}-color palette")
    img = palette[labels]
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    return img


def decode_semantic_map(img: np.ndarray, n_concepts: int, palette: np.ndarray = PALETTE,
                        scale: int = 1) -> SemanticMap:
    img = np.asarray(img)[::scale, ::scale]
    labels = np.full(img.shape[:2], -1, dtype=np.int64)
    for i, color in enumerate(palette[:n_concepts + 1]):
        labels[np.all(img == color, axis=-1)] = i
    if (labels < 0).any():
        raise DataError("image contains colors outside the semantic palette", code="E_PALETTE")
    return SemanticMap(torch.from_numpy(labels), n_concepts)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=FIG_META)
    plt.close(fig)
    return path


def plot_semantic_timeline(maps: Mapping[int, SemanticMap], path, max_panels: int = 10,
                           timesteps: Optional[Sequence[int]] = None) -> Path:
    steps = sorted(maps)
    if not steps:
        raise UsageError("no semantic maps to plot")
    if len(steps) > max_panels:
        pick = np.linspace(0, len(steps) - 1, max_panels).round().astype(int)
        steps = [steps[i] for i in pick]
    fig, axes = plt.subplots(1, len(steps), figsize=(1.6 * len(steps), 1.9), squeeze=False)
    for ax, k in zip(axes[0], steps):
        ax.imshow(render_semantic_map(maps[k]), interpolation="nearest")
        ax.set_title(f"step {k}" + (f"\nt={timesteps[k]}" if timesteps else ""), fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_cross_attention(cross: np.ndarray, resolution: tuple[int, int], token_names: Sequence[str],
                         path, image: Optional[np.ndarray] = None) -> Path:
    """Per-token heatmaps of an aggregated ``(h*w, K)`` cross-attention map."""
    K = len(token_names)
    n = K + (image is not None)
    fig, axes = plt.subplots(1, n, figsize=(1.7 * n, 1.9), squeeze=False)
    axes = list(axes[0])
    if image is not None:
        ax = axes.pop(0)
        ax.imshow(np.clip(image, 0, 1))
        ax.set_title("image", fontsize=7)
        ax.axis("off")
    for j, ax in enumerate(axes):
        ax.imshow(np.asarray(cross)[:, j].reshape(resolution), cmap="viridis", vmin=0)
        ax.set_title(token_names[j], fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def position_colors(h: int, w: int) -> np.ndarray:
    """Smooth 2-D color code for key positions: red grows with x, green with y."""
    ys, xs = np.mgrid[0:h, 0:w]
    rgb = np.stack([xs / max(w - 1, 1), ys / max(h - 1, 1), 0.5 * np.ones_like(xs, dtype=float)], axis=-1)
    return rgb.reshape(-1, 3)


def plot_correspondence(image: np.ndarray, ref_images: Sequence[np.ndarray], corr: np.ndarray,
                        resolution: tuple[int, int], ref_resolution: tuple[int, int], path) -> Path:
    """Color each generated patch with the position code of its best-matching reference key."""
    codes = position_colors(*ref_resolution)
    painted = np.zeros((*resolution, 3))
    flat = painted.reshape(-1, 3)
    for q, (concept, pos) in enumerate(np.asarray(corr)):
        flat[q] = codes[pos] * (0.4 + 0.6 / (1 + concept))
    n = 2 + len(ref_images)
    fig, axes = plt.subplots(1, n, figsize=(1.8 * n, 2.0), squeeze=False)
    axes = axes[0]
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("generated", fontsize=7)
    axes[1].imshow(painted, interpolation="nearest")
    axes[1].set_title("matched position", fontsize=7)
    for i, ref in enumerate(ref_images):
        axes[2 + i].imshow(np.clip(ref, 0, 1))
        axes[2 + i].imshow(codes.reshape(*ref_resolution, 3), alpha=0.45, interpolation="nearest",
                           extent=(-0.5, ref.shape[1] - 0.5, ref.shape[0] - 0.5, -0.5))
        axes[2 + i].set_title(f"reference {i + 1}", fontsize=7)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(axis: str, values: Sequence, images: Sequence[np.ndarray], rows: Sequence[dict], path,
               metric_keys: Sequence[str] = ("color_distance", "patch_cosine")) -> Path:
    """Image strip over the swept values plus metric curves underneath."""
    n = len(values)
    fig = plt.figure(figsize=(max(1.6 * n, 4.0), 4.0))
    grid = fig.add_gridspec(2, n, height_ratios=[1, 1.1])
    for i, (v, img) in enumerate(zip(values, images)):
        ax = fig.add_subplot(grid[0, i])
        ax.imshow(np.clip(img, 0, 1))
        ax.set_title(f"{axis}={v}", fontsize=7)
        ax.axis("off")
    ax = fig.add_subplot(grid[1, :])
    xs = np.arange(n)
    for key in metric_keys:
        ys = [r.get(key) for r in rows]
        ys = [np.nan if y is None else y for y in ys]
        ax.plot(xs, ys, marker="o", label=key)
    ax.set_xticks(xs)
    ax.set_xticklabels([str(v) for v in values], fontsize=7)
    ax.set_xlabel(axis)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)
