"""YAML run configuration: checkpoint, prompt, reference concepts, sampler knobs.

Example::

    version: 1
    checkpoint: model.ckpt
    prompt: [background, red, triangle]
    references:
      - image: ref.ppm
        mask: ref_mask.pgm
        tokens: [red, triangle]
        weight: 3.0
    sampler: {steps: 50, alpha: 0.4, cfg_scale: 7.5, blocks: [5, 6], seed: 0}
    output: runs/example

Relative paths resolve against the config file's directory. Each reference is
tied to prompt positions either explicitly (``prompt_positions``) or by
matching its token names, left to right, against positions not yet claimed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
import os
from pathlib import Path
from typing import Optional

import torch
import yaml

from .attention import ReferenceConcept
from .errors import DataError, UsageError
from .imageio import read_image, read_mask
from .pipeline import PipelineConfig
from .segmentation import TokenGrouping
from .toy.shapes import Vocabulary

CONFIG_VERSION = 1
SAMPLER_KEYS = {f.name for f in dataclasses.fields(PipelineConfig)} - {"weights", "record_steps"}


@dataclass
class ReferenceEntry:
    image: Path
    mask: Path
    tokens: list[str]
    weight: float = 3.0
    prompt_positions: Optional[list[int]] = None
    name: str = ""


@dataclass
class RunConfig:
    checkpoint: Path
    prompt: list[str]
    references: list[ReferenceEntry] = field(default_factory=list)
    sampler: dict = field(default_factory=dict)
    output: Optional[Path] = None
    source: Optional[Path] = None

    def pipeline_config(self, **overrides) -> PipelineConfig:
        values = {**self.sampler, **{k: v for k, v in overrides.items() if v is not None}}
        if "blocks" in values:
            values["blocks"] = tuple(int(b) for b in values["blocks"])
        weight = overrides.get("weight")
        if self.references and weight is None:
            values["weights"] = [r.weight for r in self.references]
        cfg = PipelineConfig(**values)
        cfg.validate()
        return cfg

    def grouping(self, vocab: Vocabulary) -> TokenGrouping:
        vocab.ids(self.prompt)
        claimed: set[int] = set()
        groups = []
        for i, ref in enumerate(self.references):
            vocab.ids(ref.tokens)
            if ref.prompt_positions is not None:
                pos = [int(p) for p in ref.prompt_positions]
                if any(not 0 <= p < len(self.prompt) for p in pos):
                    raise DataError(f"reference {i} prompt_positions outside the prompt", code="E_GROUPING")
            else:
                pos = []
                for word in ref.tokens:
                    hit = next((p for p, w in enumerate(self.prompt) if w == word and p not in claimed
                                and p not in pos), None)
                    if hit is None:
                        raise DataError(f"reference {i} token {word!r} not found in the prompt",
                                        code="E_GROUPING", token=word)
                    pos.append(hit)
            if claimed & set(pos):
                raise DataError(f"reference {i} reuses prompt positions", code="E_GROUPING")
            claimed |= set(pos)
            groups.append(sorted(pos))
        return TokenGrouping(groups, len(self.prompt))

    def load_references(self, vocab: Vocabulary, image_size: int) -> list[ReferenceConcept]:
        refs = []
        for i, r in enumerate(self.references):
            img = read_image(r.image)
            mask = read_mask(r.mask)
            if img.shape[:2] != (image_size, image_size) or mask.shape != img.shape[:2]:
                raise DataError(f"reference {i} is {img.shape[1]}x{img.shape[0]} with mask "
                                f"{mask.shape[1]}x{mask.shape[0]}; the model expects {image_size}x{image_size}",
                                code="E_SHAPE")
            if not mask.any():
                raise DataError(f"reference {i} mask is empty", code="E_DEGENERATE_MASK", path=str(r.mask))
            tensor = torch.from_numpy(img).permute(2, 0, 1).to(torch.float64) * 2 - 1
            refs.append(ReferenceConcept(tensor, torch.from_numpy(mask), vocab.ids(r.tokens), r.weight,
                                         r.name or f"concept{i + 1}"))
        return refs


def _path(base: Path, value) -> Path:
    p = Path(str(value))
    return p if p.is_absolute() else base / p


def _require_list(doc: dict, key: str, where: str) -> list:
    value = doc.get(key)
    if not isinstance(value, list):
        raise UsageError(f"{where}: '{key}' must be a list", code="E_CONFIG")
    return value


def parse_run_config(doc: dict, base: Path, source: Optional[Path] = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise UsageError("config must be a mapping", code="E_CONFIG")
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise UsageError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})", code="E_CONFIG")
    unknown = set(doc) - {"version", "checkpoint", "prompt", "references", "sampler", "output"}
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}", code="E_CONFIG")
    if "checkpoint" not in doc:
        raise UsageError("config needs a 'checkpoint'", code="E_CONFIG")
    prompt = [str(w) for w in _require_list(doc, "prompt", "config")]
    refs = []
    for i, r in enumerate(doc.get("references") or []):
        if not isinstance(r, dict) or not {"image", "mask", "tokens"} <= set(r):
            raise UsageError(f"reference {i} needs image, mask and tokens", code="E_CONFIG")
        extra = set(r) - {"image", "mask", "tokens", "weight", "prompt_positions", "name"}
        if extra:
            raise UsageError(f"reference {i} has unknown keys {sorted(extra)}", code="E_CONFIG")
        refs.append(ReferenceEntry(
            image=_path(base, r["image"]), mask=_path(base, r["mask"]),
            tokens=[str(t) for t in _require_list(r, "tokens", f"reference {i}")],
            weight=float(r.get("weight", 3.0)), prompt_positions=r.get("prompt_positions"),
            name=str(r.get("name", ""))))
    sampler = dict(doc.get("sampler") or {})
    bad = set(sampler) - SAMPLER_KEYS
    if bad:
        raise UsageError(f"unknown sampler keys {sorted(bad)}", code="E_CONFIG")
    for entry in [doc["checkpoint"]] + [x for r in refs for x in (r.image, r.mask)]:
        p = _path(base, entry)
        if not p.exists():
            raise DataError(f"missing file {p}", code="E_MISSING_FILE", path=str(p))
    output = _path(base, doc["output"]) if doc.get("output") else None
    return RunConfig(_path(base, doc["checkpoint"]), prompt, refs, sampler, output, source)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing config {path}", code="E_MISSING_FILE", path=str(path))
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"config is not valid YAML: {exc}".replace("\n", " "), code="E_CONFIG") from None
    return parse_run_config(doc, path.parent, path)


def dump_run_config(cfg: RunConfig, path) -> Path:
    """Write ``cfg`` with paths relative to ``path``'s directory."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        # relative even across "..", so the echo is identical wherever the tree lives
        return os.path.relpath(Path(p).resolve(), base)

    doc = {"version": CONFIG_VERSION, "checkpoint": rel(cfg.checkpoint), "prompt": list(cfg.prompt),
           "references": [{"image": rel(r.image), "mask": rel(r.mask), "tokens": list(r.tokens),
                           "weight": r.weight, **({"prompt_positions": r.prompt_positions}
                                                  if r.prompt_positions is not None else {}),
                           **({"name": r.name} if r.name else {})} for r in cfg.references],
           "sampler": dict(cfg.sampler)}
    if cfg.output is not None:
        doc["output"] = rel(cfg.output)
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path
