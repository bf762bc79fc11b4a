"""Synthetic colored-shapes dataset.

Each image holds 1-3 non-overlapping shapes on a plain light background. The
prompt analog is ``[background, color_1, shape_1, color_2, shape_2, ...]``.
Colors carry a per-instance shade that the prompt does not describe, so a
reference image pins down an appearance the prompt alone leaves open.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import DataError, GenerationError, UsageError
from ..numerics import Rng

NULL, BACKGROUND = "<null>", "background"

BASE_COLORS = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.92, 0.82, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
}
SHAPE_KINDS = ("circle", "square", "triangle")


@dataclass(frozen=True)
class Vocabulary:
    shapes: tuple[str, ...] = SHAPE_KINDS
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")

    @property
    def words(self) -> list[str]:
        return [NULL, BACKGROUND, *self.shapes, *self.colors]

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.words.index(word)
        except ValueError:
            raise DataError(f"unknown token {word!r}", code="E_VOCAB", token=word) from None

    def ids(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.words[int(i)] for i in ids]

    def to_dict(self) -> dict:
        return {"shapes": list(self.shapes), "colors": list(self.colors)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(shapes=tuple(d["shapes"]), colors=tuple(d["colors"]))


@dataclass
class DatasetSpec:
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    count: int = 512
    image_size: int = 32
    max_shapes: int = 3
    # half-extent range in pixels (circle radius, half side, half base)
    min_extent: float = 4.0
    max_extent: float = 7.0
    shade_range: tuple[float, float] = (0.45, 1.0)
    # relative frequency of images with 1, 2, 3 shapes
    shape_count_weights: tuple[float, ...] = (0.6, 0.3, 0.1)

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(tuple(self.shape_kinds), tuple(self.colors))


@dataclass
class ShapeInstance:
    kind: str
    color: str
    shade: float
    cx: float
    cy: float
    extent: float

    @property
    def rgb(self) -> np.ndarray:
        return np.asarray(BASE_COLORS[self.color]) * self.shade


@dataclass
class ShapesDataset:
    images: np.ndarray  # (N, S, S, 3) float in [0, 1]
    tokens: list[list[int]]
    masks: list[np.ndarray]  # per image (n_shapes, S, S) bool
    shapes: list[list[ShapeInstance]]
    vocabulary: Vocabulary = field(default_factory=Vocabulary)

    def __len__(self) -> int:
        return len(self.images)

    def as_tensors(self, max_tokens: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """(x0 in [-1, 1] as (N, 3, S, S), padded token ids (N, max_tokens))."""
        x = torch.from_numpy(self.images).permute(0, 3, 1, 2).to(dtype) * 2 - 1
        tok = torch.zeros(len(self), max_tokens, dtype=torch.long)
        for i, seq in enumerate(self.tokens):
            tok[i, :len(seq)] = torch.tensor(seq)
        return x, tok

    def coverage(self, max_shapes: int, dtype=torch.float32) -> torch.Tensor:
        """(N, 1 + max_shapes, S, S): channel 0 is background, channel j + 1 is shape j."""
        S = self.images.shape[1]
        cov = torch.zeros(len(self), 1 + max_shapes, S, S, dtype=dtype)
        for i, m in enumerate(self.masks):
            if len(m) > max_shapes:
                raise UsageError(f"image {i} has {len(m)} shapes, coverage holds {max_shapes}")
            if len(m):
                cov[i, 1:1 + len(m)] = torch.from_numpy(m).to(dtype)
        cov[:, 0] = 1 - cov[:, 1:].sum(1).clamp(max=1)
        return cov

    def export(self, directory) -> Path:
        """Write images/masks as PPM/PGM plus ``index.json``."""
        from ..imageio import write_pnm

        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(len(self)):
            name = f"img_{i:05d}"
            write_pnm(out / f"{name}.ppm", self.images[i])
            mask_files = []
            for j, m in enumerate(self.masks[i]):
                mf = f"{name}_mask{j}.pgm"
                write_pnm(out / mf, m.astype(np.float64))
                mask_files.append(mf)
            entries.append({
                "image": f"{name}.ppm",
                "tokens": self.vocabulary.decode(self.tokens[i]),
                "masks": mask_files,
                "shapes": [vars(s) for s in self.shapes[i]],
            })
        index = {"version": 1, "vocabulary": self.vocabulary.to_dict(), "items": entries}
        (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
        return out


def shape_mask(kind: str, cx: float, cy: float, extent: float, size: int) -> np.ndarray:
    """Rasterize by pixel-centre inclusion."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if kind == "circle":
        return dx * dx + dy * dy <= extent * extent
    if kind == "square":
        return (np.abs(dx) <= extent) & (np.abs(dy) <= extent)
    if kind == "triangle":
        # apex at top, base 2*extent wide at the bottom, height 2*extent
        rel = (dy + extent) / (2 * extent)  # 0 at apex, 1 at base
        return (rel >= 0) & (rel <= 1) & (np.abs(dx) <= rel * extent)
    raise UsageError(f"unknown shape kind {kind!r}")


def shape_area(kind: str, extent: float) -> float:
    return {"circle": math.pi * extent**2, "square": 4 * extent**2,
            "triangle": 2 * extent**2}[kind]


def shape_perimeter(kind: str, extent: float) -> float:
    return {"circle": 2 * math.pi * extent, "square": 8 * extent,
            "triangle": 2 * extent * (1 + math.sqrt(5))}[kind]


def _dilate(m: np.ndarray) -> np.ndarray:
    d = m.copy()
    d[1:] |= m[:-1]
    d[:-1] |= m[1:]
    d[:, 1:] |= m[:, :-1]
    d[:, :-1] |= m[:, 1:]
    return d


def background_color(rng: Rng) -> np.ndarray:
    return np.full(3, 0.82) + rng.uniform(-0.04, 0.04, size=3)


def render(shapes: list[ShapeInstance], size: int, bg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    masks = np.zeros((len(shapes), size, size), dtype=bool)
    for j, s in enumerate(shapes):
        m = shape_mask(s.kind, s.cx, s.cy, s.extent, size)
        img[m] = s.rgb
        masks[j] = m
    return img, masks


def prompt_tokens(shapes: list[ShapeInstance], vocab: Vocabulary) -> list[int]:
    words = [BACKGROUND]
    for s in shapes:
        words += [s.color, s.kind]
    return vocab.ids(words)


def _pack(spec: DatasetSpec, r: Rng, n: int, max_tries: int, restarts: int):
    """Rejection-sample ``n`` disjoint shapes; an unlucky layout is discarded and redrawn."""
    S = spec.image_size
    for _ in range(restarts):
        placed: list[ShapeInstance] = []
        occupied = np.zeros((S, S), dtype=bool)
        for _ in range(max_tries):
            if len(placed) == n:
                break
            e = float(r.uniform(spec.min_extent, spec.max_extent))
            cx, cy = r.uniform(e, S - e, size=2)
            kind = spec.shape_kinds[int(r.integers(0, len(spec.shape_kinds)))]
            m = shape_mask(kind, cx, cy, e, S)
            if not m.any() or (_dilate(m) & occupied).any():
                continue
            color = spec.colors[int(r.integers(0, len(spec.colors)))]
            shade = float(r.uniform(*spec.shade_range))
            placed.append(ShapeInstance(kind, color, shade, float(cx), float(cy), e))
            occupied |= m
        if len(placed) == n:
            return placed
    return None


def make_shapes_dataset(spec: DatasetSpec, rng: Rng, max_tries: int = 200, restarts: int = 10) -> ShapesDataset:
    if not spec.shape_kinds or not spec.colors:
        raise UsageError("need at least one shape kind and one color")
    unknown = [c for c in spec.colors if c not in BASE_COLORS]
    if unknown:
        raise UsageError(f"unknown colors {unknown}")
    S = spec.image_size
    n_max = min(spec.max_shapes, len(spec.shape_count_weights))
    if n_max < 1:
        raise UsageError("max_shapes must be >= 1")
    # each shape needs at least its bounding box plus a one-pixel ring
    min_box = (2 * spec.min_extent + 2) ** 2
    if 2 * spec.min_extent + 2 > S or n_max * min_box > S * S:
        raise GenerationError(f"{n_max} shapes of extent {spec.min_extent} cannot fit a {S}x{S} image")
    weights = np.asarray(spec.shape_count_weights[:n_max], dtype=float)
    weights /= weights.sum()
    vocab = spec.vocabulary

    images, tokens, masks, metas = [], [], [], []
    for i in range(spec.count):
        r = rng.child(i)
        n = int(r.numpy.choice(np.arange(1, n_max + 1), p=weights))
        placed = _pack(spec, r, n, max_tries, restarts)
        if placed is None:
            raise GenerationError(f"could not pack {n} shapes into a {S}x{S} image", index=i)
        img, ms = render(placed, S, background_color(r))
        images.append(img)
        masks.append(ms)
        metas.append(placed)
        tokens.append(prompt_tokens(placed, vocab))
    return ShapesDataset(np.stack(images), tokens, masks, metas, vocab)
