"""Desk-scale fidelity metrics and feature correspondence."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .attention import ReferenceConcept, downsample_mask
from .errors import UsageError
from .segmentation import SemanticMap


def correspondence_map(Q: torch.Tensor, ref_keys: Sequence[torch.Tensor]) -> torch.Tensor:
    """For every query row, the (concept, key position) with the largest dot product.

    Returns a ``(n, 2)`` long tensor. Ties resolve to the lowest concept, then
    the lowest position.
    """
    if not ref_keys:
        raise UsageError("correspondence_map needs at least one reference key set")
    if any(k.dim() != 2 or k.shape[1] != Q.shape[1] for k in ref_keys):
        raise UsageError("reference keys must be (m_i, d) with the query dimension")
    sizes = [k.shape[0] for k in ref_keys]
    best = torch.argmax(Q @ torch.cat(list(ref_keys), dim=0).T, dim=1)
    starts = torch.tensor(np.cumsum([0] + sizes[:-1]))
    concept = torch.searchsorted(starts, best, right=True) - 1
    return torch.stack([concept, best - starts[concept]], dim=1)


def _ref_image01(ref: ReferenceConcept) -> np.ndarray:
    return ((ref.image.detach().to(torch.float64) + 1) / 2).permute(1, 2, 0).cpu().numpy()


def _patches(img: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """(gh, gw, p*p*3) blocks of an (H, W, 3) image."""
    H, W, C = img.shape
    gh, gw = grid
    if H % gh or W % gw:
        raise UsageError(f"image {H}x{W} does not tile into a {gh}x{gw} grid")
    ph, pw = H // gh, W // gw
    return img.reshape(gh, ph, gw, pw, C).transpose(0, 2, 1, 3, 4).reshape(gh, gw, ph * pw * C)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def concept_fidelity(generated: np.ndarray, gen_map: Optional[SemanticMap], label: int,
                     ref: ReferenceConcept) -> dict:
    """Compare a generated concept region against the reference's masked region.

    ``color_distance``: Euclidean distance between mean RGB (in [0, 1]) of the
    generated region's pixels and of the reference's masked pixels.
    ``patch_cosine``: mean over all (generated, reference) patch pairs of the
    cosine between patch vectors, patches being the image blocks under the
    semantic-map grid with pixels centred to [-1, 1].
    An empty region, or no map at all (a run without a region-aware stage),
    yields ``None`` scores and ``defined=False``.
    """
    if gen_map is None:
        return {"label": int(label), "gen_patches": 0, "ref_patches": 0,
                "color_distance": None, "patch_cosine": None, "defined": False}
    grid = gen_map.resolution
    gen = np.asarray(generated, dtype=np.float64)
    ref_img = _ref_image01(ref)
    gen_cells = (gen_map.labels == label).numpy()
    ref_cells = downsample_mask(ref.mask, grid).numpy()
    ref_mask = ref.mask.numpy().astype(bool)
    out = {"label": int(label), "gen_patches": int(gen_cells.sum()), "ref_patches": int(ref_cells.sum())}
    if not gen_cells.any() or not ref_cells.any() or not ref_mask.any():
        out.update(color_distance=None, patch_cosine=None, defined=False)
        return out
    H, W = gen.shape[:2]
    ph, pw = H // grid[0], W // grid[1]
    gen_pixels = np.kron(gen_cells, np.ones((ph, pw), dtype=bool)).astype(bool)
    mean_gen = gen[gen_pixels].mean(axis=0)
    mean_ref = ref_img[ref_mask].mean(axis=0)
    a = _unit(_patches(gen * 2 - 1, grid)[gen_cells])
    b = _unit(_patches(ref_img * 2 - 1, grid)[ref_cells])
    cos = float(a.mean(axis=0) @ b.mean(axis=0))
    out.update(color_distance=float(np.linalg.norm(mean_gen - mean_ref)),
               patch_cosine=float(np.clip(cos, -1.0, 1.0)), defined=True)
    return out


@dataclass
class MetricsReport:
    seed: int
    config: dict
    concepts: list[dict] = field(default_factory=list)
    baseline: list[dict] = field(default_factory=list)
    deltas: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def baseline_deltas(injected: list[dict], baseline: list[dict]) -> list[dict]:
    """Injected minus baseline per concept (negative color delta = improvement)."""
    out = []
    for a, b in zip(injected, baseline):
        d = {"label": a["label"]}
        for key in ("color_distance", "patch_cosine"):
            d[key] = None if a[key] is None or b[key] is None else a[key] - b[key]
        out.append(d)
    return out


def build_report(seed: int, config: dict, refs: Sequence[ReferenceConcept], image: np.ndarray,
                 smap: Optional[SemanticMap], baseline_image: Optional[np.ndarray] = None,
                 baseline_map: Optional[SemanticMap] = None) -> MetricsReport:
    report = MetricsReport(seed=seed, config=config)
    if smap is None:
        report.notes.append("no semantic map (sampling had no RBA steps or no concepts)")
        return report
    report.concepts = [concept_fidelity(image, smap, i + 1, r) for i, r in enumerate(refs)]
    if baseline_image is not None and baseline_map is not None:
        report.baseline = [concept_fidelity(baseline_image, baseline_map, i + 1, r) for i, r in enumerate(refs)]
        report.deltas = baseline_deltas(report.concepts, report.baseline)
    for c in report.concepts:
        if not c["defined"]:
            report.notes.append(f"concept {c['label']} region empty; scores undefined")
    return report
