"""``refattn`` command line.

Commands: ``train``, ``generate``, ``sweep``, ``visualize``, ``metrics`` plus
the helpers ``dataset`` and ``reference`` for building inputs.

Output goes under ``$REFATTN_OUT`` (default ``./runs``) unless ``--out`` is
given. Every run directory gets a deterministic ``run.log`` of ``key=value``
lines; wall-clock timestamps go only to the ``timing.log`` sidecar. Errors are
printed as one ``error=CODE ...`` line on stderr and map to exit status 2
(usage), 3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig, dump_run_config, load_run_config
from .diffusion import build_schedule
from .errors import DataError, RefAttnError, UsageError
from .imageio import read_image, read_pnm, to_uint8, write_image, write_pnm
from .metrics import build_report, correspondence_map
from .numerics import Rng
from .pipeline import RBA, RSA, PipelineConfig, generate, sample_plain
from .segmentation import SemanticMap, TokenGrouping, latent_semantic_map
from .toy.checkpoint import load_checkpoint, save_checkpoint
from .toy.shapes import (BACKGROUND, BASE_COLORS, SHAPE_KINDS, DatasetSpec, ShapeInstance, Vocabulary,
                         background_color, make_shapes_dataset, render)
from .toy.train import train_toy
from .toy.unet import UNetConfig, build_unet

ENV_OUT = "REFATTN_OUT"
DEFAULT_OUT = "runs"
SWEEP_AXES = ("alpha", "weight", "blocks")
MAP_SCALE = 8


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v).replace(" ", "_")


class RunLog:
    """Line-oriented ``key=value`` log mirrored to stdout, with a timing sidecar."""

    def __init__(self, quiet: bool = False):
        self.lines: list[str] = []
        self.times: list[str] = []
        self.quiet = quiet
        self.start = time.perf_counter()

    def event(self, name: str, **fields) -> None:
        line = " ".join([f"event={name}"] + [f"{k}={_fmt(v)}" for k, v in fields.items()])
        self.lines.append(line)
        now = datetime.now(timezone.utc).isoformat(timespec="milliseconds")
        self.times.append(f"{now}\telapsed={time.perf_counter() - self.start:.3f}\tevent={name}")
        if not self.quiet:
            print(line, flush=True)

    def write(self, directory: Path, stem: str = "run") -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.log").write_text("".join(line + "\n" for line in self.lines))
        (directory / "timing.log").write_text("".join(line + "\n" for line in self.times))


def output_root() -> Path:
    import os

    return Path(os.environ.get(ENV_OUT) or DEFAULT_OUT)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _load_model(path: Path):
    model, meta = load_checkpoint(path)
    vocab = Vocabulary.from_dict(meta["vocabulary"]) if "vocabulary" in meta else Vocabulary()
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"checkpoint vocabulary has {len(vocab)} words but the model embeds "
                        f"{model.config.vocab_size}", code="E_VOCAB")
    sched = build_schedule(**meta.get("schedule", {"T": model.config.num_timesteps}))
    return model, vocab, sched


# --- train / dataset / reference ----------------------------------------------

def desk_unet_config(image_size: int = 32, base_channels: int = 16, channel_mult=(1, 2, 4),
                     vocab: Optional[Vocabulary] = None) -> UNetConfig:
    vocab = vocab or Vocabulary()
    return UNetConfig(image_size=image_size, base_channels=base_channels, channel_mult=list(channel_mult),
                      levels=len(channel_mult), vocab_size=len(vocab))


def train_checkpoint(out: Path, epochs: int, seed: int, count: int, image_size: int = 32,
                     base_channels: int = 16, channel_mult=(1, 2, 4), batch_size: int = 32,
                     lr: float = 2e-3, attn_weight: float = 0.1, log: Optional[RunLog] = None) -> Path:
    log = log or RunLog(quiet=True)
    spec = DatasetSpec(count=count, image_size=image_size)
    if image_size != 32:
        scale = image_size / 32
        spec.min_extent, spec.max_extent = 4.0 * scale, 7.0 * scale
    vocab = spec.vocabulary
    cfg = desk_unet_config(image_size, base_channels, channel_mult, vocab)
    root = Rng(seed)
    data = make_shapes_dataset(spec, root.child(0))
    model = build_unet(cfg, root.child(1))
    sched = build_schedule(cfg.num_timesteps)
    log.event("train_start", epochs=epochs, seed=seed, images=len(data),
              params=sum(p.numel() for p in model.parameters()))
    train_toy(model, data, sched, epochs, root.child(2), batch_size=batch_size, lr=lr,
              attn_weight=attn_weight, on_epoch=lambda e: log.event("epoch", epoch=e["epoch"], loss=e["loss"], steps=e["steps"]))
    meta = {"vocabulary": vocab.to_dict(),
            "schedule": {"T": sched.T, "beta_min": 1e-4, "beta_max": 0.02},
            "dataset": {"count": count, "image_size": image_size, "seed": seed},
            "train": {"epochs": epochs, "seed": seed, "batch_size": batch_size, "lr": lr,
                      "attn_weight": attn_weight, "losses": [e["loss"] for e in model.train_log]}}
    save_checkpoint(model, out, meta)
    if model.train_log:
        log.event("train_done", first_loss=model.train_log[0]["loss"], final_loss=model.train_log[-1]["loss"])
    log.event("checkpoint", path=out.name)
    return out


def cmd_train(args) -> int:
    out = Path(args.out) if args.out else output_root() / "model.ckpt"
    log = RunLog()
    train_checkpoint(out, args.epochs, args.seed, args.count, args.image_size, args.base_channels,
                     _int_list(args.channel_mult), args.batch_size, args.lr, args.attn_weight, log)
    log.write(out.parent, stem=out.stem + ".train")
    return 0


def cmd_dataset(args) -> int:
    out = Path(args.out) if args.out else output_root() / "dataset"
    data = make_shapes_dataset(DatasetSpec(count=args.count, image_size=args.image_size), Rng(args.seed))
    data.export(out)
    print(f"event=dataset images={len(data)} path={out}")
    return 0


def write_reference(out: Path, kind: str, color: str, shade: float, extent: float, size: int = 32,
                    cx: Optional[float] = None, cy: Optional[float] = None) -> tuple[Path, Path]:
    if kind not in SHAPE_KINDS:
        raise UsageError(f"unknown shape {kind!r}; choose from {list(SHAPE_KINDS)}")
    if color not in BASE_COLORS:
        raise UsageError(f"unknown color {color!r}; choose from {sorted(BASE_COLORS)}")
    shape = ShapeInstance(kind, color, shade, size / 2 if cx is None else cx, size / 2 if cy is None else cy,
                          extent)
    img, masks = render([shape], size, np.full(3, 0.82))
    if not masks[0].any():
        raise DataError("reference shape does not cover any pixel", code="E_DEGENERATE_MASK")
    out.mkdir(parents=True, exist_ok=True)
    return (write_pnm(out / "ref.ppm", img), write_pnm(out / "ref_mask.pgm", masks[0].astype(np.float64)))


def cmd_reference(args) -> int:
    out = Path(args.out) if args.out else output_root() / "reference"
    img, mask = write_reference(out, args.kind, args.color, args.shade, args.extent, args.size, args.cx, args.cy)
    print(f"event=reference image={img} mask={mask}")
    return 0


# --- generate -----------------------------------------------------------------

def _overrides(args) -> dict:
    o = {"alpha": args.alpha, "weight": args.weight, "steps": args.steps, "cfg_scale": args.cfg_scale,
         "seed": args.seed}
    if args.blocks is not None:
        o["blocks"] = tuple(_int_list(args.blocks))
    if args.strict_mask:
        o["strict_mask"] = True
    if args.raw_segmentation:
        o["refine"] = False
    if args.inject_uncond:
        o["inject_uncond"] = True
    return o


def _save_map(directory: Path, name: str, smap: SemanticMap) -> None:
    from .viz import render_semantic_map

    write_pnm(directory / f"{name}.pgm", smap.labels.numpy().astype(np.uint8))
    write_image(directory / f"{name}.png", render_semantic_map(smap, scale=MAP_SCALE))


def _load_map(path: Path, n_concepts: int) -> SemanticMap:
    return SemanticMap(torch.from_numpy(read_pnm(path).astype(np.int64)), n_concepts)


def _metrics_tsv(report, refs) -> str:
    head = ["concept", "label", "gen_patches", "ref_patches", "color_distance", "patch_cosine"]
    if report.baseline:
        head += ["baseline_color_distance", "baseline_patch_cosine", "delta_color_distance", "delta_patch_cosine"]
    rows = ["\t".join(head)]
    for i, c in enumerate(report.concepts):
        row = [refs[i].name, c["label"], c["gen_patches"], c["ref_patches"], c["color_distance"],
               c["patch_cosine"]]
        if report.baseline:
            b, d = report.baseline[i], report.deltas[i]
            row += [b["color_distance"], b["patch_cosine"], d["color_distance"], d["patch_cosine"]]
        rows.append("\t".join(_fmt(x) for x in row))
    return "\n".join(rows) + "\n"


def run_generation(rc: RunConfig, pcfg: PipelineConfig, out: Path, log: RunLog, plain: bool = False,
                   baseline: bool = False, save_attention: bool = False) -> dict:
    """Generate into ``out`` and return a summary dict for sweeps."""
    model, vocab, sched = _load_model(rc.checkpoint)
    pcfg.validate(model)
    prompt = vocab.ids(rc.prompt)
    refs = [] if plain else rc.load_references(vocab, model.config.image_size)
    grouping = None if plain else rc.grouping(vocab)
    if refs and pcfg.weights is not None and len(pcfg.weights) != len(refs):
        pcfg.weights = None
    out.mkdir(parents=True, exist_ok=True)
    log.event("generate", prompt=rc.prompt, concepts=len(refs), steps=pcfg.steps, alpha=pcfg.alpha,
              cfg_scale=pcfg.cfg_scale, blocks=list(pcfg.blocks), seed=pcfg.seed, plain=plain)

    if save_attention and refs:
        pcfg.record_steps = (pcfg.steps - 1,)
    art = (sample_plain(model, prompt, pcfg, sched) if plain
           else generate(model, refs, prompt, grouping, pcfg, sched))
    counts = art.stage_counts()
    log.event("stages", rsa=counts[RSA], rba=counts[RBA])
    stage_rows = ["step\tt\tstage\t" + "\t".join(f"patches_{i}" for i in range(1 + len(refs)))]
    for k, (t, st) in enumerate(zip(art.timesteps, art.stages)):
        smap = art.semantic_maps.get(k)
        cells = smap.counts() if smap is not None else ["NA"] * (1 + len(refs))
        stage_rows.append("\t".join(str(x) for x in [k, t, st, *cells]))
    (out / "stages.tsv").write_text("\n".join(stage_rows) + "\n")

    write_pnm(out / "image.ppm", art.image)
    write_image(out / "image.png", art.image)
    summary = {"rsa_steps": counts[RSA], "rba_steps": counts[RBA], "image": art.image, "concepts": []}

    if art.semantic_maps:
        sem = out / "semantic"
        sem.mkdir(exist_ok=True)
        for k, smap in sorted(art.semantic_maps.items()):
            _save_map(sem, f"step_{k:03d}", smap)
        from .viz import plot_semantic_timeline

        plot_semantic_timeline(art.semantic_maps, out / "semantic_timeline.png", timesteps=art.timesteps)
        if art.absent_concepts:
            log.event("absent_concepts", labels=art.absent_concepts)

    if refs:
        # score the saved 8-bit images so `refattn metrics` reproduces these numbers exactly
        scored = to_uint8(art.image) / 255.0
        base_img = base_map = None
        if baseline:
            import dataclasses

            bcfg = dataclasses.replace(pcfg, inject=False, record_steps=())
            base = generate(model, refs, prompt, grouping, bcfg, sched)
            base_img, base_map = to_uint8(base.image) / 255.0, base.final_map
            write_pnm(out / "baseline.ppm", base_img)
            write_image(out / "baseline.png", base_img)
            if base_map is not None:
                _save_map(out, "baseline_map", base_map)
        report = build_report(pcfg.seed, _config_echo(pcfg), refs, scored, art.final_map, base_img, base_map)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        (out / "metrics.tsv").write_text(_metrics_tsv(report, refs))
        for c in report.concepts:
            log.event("fidelity", label=c["label"], color_distance=c["color_distance"],
                      patch_cosine=c["patch_cosine"])
        for n in report.notes:
            log.event("note", text=n)
        summary["concepts"] = report.concepts
        if save_attention and art.records:
            _save_attention(out, art, model, grouping, refs, vocab, rc.prompt)

    echo = RunConfig(rc.checkpoint, rc.prompt, [] if plain else rc.references,
                     {**_config_echo(pcfg)}, out)
    dump_run_config(echo, out / "config.yaml")
    return summary


def _config_echo(p: PipelineConfig) -> dict:
    d = {"steps": p.steps, "alpha": p.alpha, "cfg_scale": p.cfg_scale, "blocks": list(p.blocks),
         "weight": p.weight, "seed": p.seed, "strict_mask": p.strict_mask, "refine": p.refine,
         "inject_uncond": p.inject_uncond}
    if p.ema is not None:
        d["ema"] = p.ema
    return d


def _save_attention(out: Path, art, model, grouping: TokenGrouping, refs, vocab, prompt_words) -> None:
    from .viz import plot_correspondence, plot_cross_attention

    k = max(art.records)
    rec, t = art.records[k], art.timesteps[k]
    blocks = sorted(art.config.blocks)
    att = out / "attention"
    att.mkdir(exist_ok=True)
    res = {b: model.config.block_resolution(b) for b in blocks}
    target = max(res.values())
    _, agg = latent_semantic_map(rec, grouping, target, blocks=blocks, refine=art.config.refine)
    cross = agg.reshape(-1, agg.shape[-1])[:, :len(prompt_words)].numpy()
    np.save(att / "cross_final.npy", cross)
    plot_cross_attention(cross, target, list(prompt_words), out / "cross_attention.png", image=art.image)
    b = max(blocks, key=lambda x: res[x][0] * res[x][1])
    Q = rec[b].q[0]
    keys = [K for K, _ in art.cache.for_step(b, t)]
    corr = correspondence_map(Q, keys).numpy()
    np.save(att / f"correspondence_block{b}.npy", corr)
    ref_imgs = [((r.image + 1) / 2).permute(1, 2, 0).numpy() for r in refs]
    plot_correspondence(art.image, ref_imgs, corr, res[b], res[b], out / "correspondence.png")
    (att / "meta.json").write_text(json.dumps({"step": k, "t": t, "block": b, "resolution": list(res[b]),
                                               "target": list(target), "prompt": list(prompt_words)},
                                              sort_keys=True) + "\n")


def _run_dir(args, rc: RunConfig, seed: int, name: str) -> Path:
    if args.out:
        return Path(args.out)
    if rc.output is not None:
        return rc.output
    stem = rc.source.stem if rc.source else "run"
    return output_root() / f"{name}-{stem}-s{seed}"


def cmd_generate(args) -> int:
    rc = load_run_config(args.config)
    pcfg = rc.pipeline_config(**_overrides(args))
    out = _run_dir(args, rc, pcfg.seed, "generate")
    log = RunLog()
    run_generation(rc, pcfg, out, log, plain=args.plain, baseline=args.baseline,
                   save_attention=args.save_attention)
    log.event("done", out=out.name)
    log.write(out)
    return 0


# --- sweep --------------------------------------------------------------------

def parse_sweep_values(axis: str, text: str) -> list:
    if axis not in SWEEP_AXES:
        raise UsageError(f"sweep axis must be one of {list(SWEEP_AXES)}, got {axis!r}")
    if axis == "blocks":
        items = [s for s in text.split(";") if s.strip()]
        values = [tuple(_int_list(s)) for s in items]
        if any(not v for v in values):
            raise UsageError("every blocks value needs at least one block")
    else:
        try:
            values = [float(s) for s in text.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"sweep values must be numbers, got {text!r}") from None
    if not values:
        raise UsageError("sweep needs at least one value", code="E_EMPTY_SWEEP")
    return values


def cmd_sweep(args) -> int:
    values = parse_sweep_values(args.axis, args.values)
    rc = load_run_config(args.config)
    base = _overrides(args)
    seed = rc.pipeline_config(**base).seed
    root = Path(args.out) if args.out else output_root() / f"sweep-{args.axis}-s{seed}"
    log = RunLog()
    rows, images, summaries = [], [], []
    for v in values:
        label = "-".join(str(b) for b in v) if args.axis == "blocks" else _fmt(v)
        over = dict(base)
        over[args.axis] = v
        pcfg = rc.pipeline_config(**over)
        sub = RunLog(quiet=True)
        s = run_generation(rc, pcfg, root / f"{args.axis}={label}", sub, baseline=args.baseline)
        sub.write(root / f"{args.axis}={label}")
        row = {"value": label, "rsa_steps": s["rsa_steps"], "rba_steps": s["rba_steps"]}
        first = s["concepts"][0] if s["concepts"] else {}
        row["color_distance"] = first.get("color_distance")
        row["patch_cosine"] = first.get("patch_cosine")
        log.event("sweep_point", axis=args.axis, **row)
        rows.append(row)
        images.append(s["image"])
        summaries.append(s)
    head = ["value", "rsa_steps", "rba_steps"]
    n_concepts = max((len(s["concepts"]) for s in summaries), default=0)
    for i in range(1, n_concepts + 1):
        head += [f"color_distance_{i}", f"patch_cosine_{i}"]
    lines = ["\t".join([args.axis] + head[1:])]
    for row, s in zip(rows, summaries):
        cells = [row["value"], row["rsa_steps"], row["rba_steps"]]
        for i in range(n_concepts):
            c = s["concepts"][i] if i < len(s["concepts"]) else {}
            cells += [c.get("color_distance"), c.get("patch_cosine")]
        lines.append("\t".join(_fmt(x) for x in cells))
    (root / "summary.tsv").write_text("\n".join(lines) + "\n")
    from .viz import plot_sweep

    plot_sweep(args.axis, [r["value"] for r in rows], images, rows, root / "sweep.png")
    log.event("done", out=root.name, runs=len(rows))
    log.write(root)
    return 0


# --- visualize / metrics ------------------------------------------------------

def _require_run_dir(path: Path) -> Path:
    if not (path / "config.yaml").exists() or not (path / "image.ppm").exists():
        raise DataError(f"{path} is not a generate run directory", code="E_RUN_DIR", path=str(path))
    return path


def cmd_visualize(args) -> int:
    from .viz import plot_correspondence, plot_cross_attention, plot_semantic_timeline

    run = _require_run_dir(Path(args.run))
    out = Path(args.out) if args.out else run / "figures"
    out.mkdir(parents=True, exist_ok=True)
    rc = load_run_config(run / "config.yaml")
    n = len(rc.references)
    written = []
    maps = {int(p.stem.split("_")[1]): _load_map(p, n) for p in sorted((run / "semantic").glob("step_*.pgm"))}
    if maps:
        written.append(plot_semantic_timeline(maps, out / "semantic_timeline.png", max_panels=args.panels))
    att = run / "attention"
    if (att / "meta.json").exists():
        meta = json.loads((att / "meta.json").read_text())
        image = read_image(run / "image.ppm")
        cross = np.load(att / "cross_final.npy")
        written.append(plot_cross_attention(cross, tuple(meta["target"]), meta["prompt"],
                                            out / "cross_attention.png", image=image))
        corr = np.load(att / f"correspondence_block{meta['block']}.npy")
        refs = [read_image(r.image) for r in rc.references]
        res = tuple(meta["resolution"])
        written.append(plot_correspondence(image, refs, corr, res, res, out / "correspondence.png"))
    if not written:
        raise DataError(f"{run} holds no semantic maps or attention dumps to visualize", code="E_NOTHING_TO_PLOT")
    for p in written:
        print(f"event=figure path={p.name}")
    return 0


def cmd_metrics(args) -> int:
    run = _require_run_dir(Path(args.run))
    rc = load_run_config(run / "config.yaml")
    _, vocab, _ = _load_model(rc.checkpoint)
    image = read_image(run / "image.ppm")
    refs = rc.load_references(vocab, image.shape[0])
    maps = sorted((run / "semantic").glob("step_*.pgm"))
    smap = _load_map(maps[-1], len(refs)) if maps else None
    base_img = base_map = None
    if args.baseline:
        b = _require_run_dir(Path(args.baseline))
        base_img = read_image(b / "image.ppm")
        bmaps = sorted((b / "semantic").glob("step_*.pgm"))
        base_map = _load_map(bmaps[-1], len(refs)) if bmaps else None
    elif (run / "baseline.ppm").exists() and (run / "baseline_map.pgm").exists():
        base_img = read_image(run / "baseline.ppm")
        base_map = _load_map(run / "baseline_map.pgm", len(refs))
    report = build_report(int(rc.sampler.get("seed", 0)), rc.sampler, refs, image, smap, base_img, base_map)
    text = _metrics_tsv(report, refs)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# --- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, code="E_USAGE")


def _generate_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="YAML run configuration")
    p.add_argument("--alpha", type=float, help="fraction of steps using reference-aware self-attention")
    p.add_argument("--weight", type=float, help="mask weight for every reference concept")
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--cfg-scale", type=float, help="classifier-free guidance scale")
    p.add_argument("--blocks", help="comma-separated attention blocks to control, e.g. 5,6")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--strict-mask", action="store_true", help="send masked-out reference logits to -inf")
    p.add_argument("--raw-segmentation", action="store_true", help="segment from cross-attention without refinement")
    p.add_argument("--inject-uncond", action="store_true", help="also inject into the unconditional branch")
    p.add_argument("--baseline", action="store_true", help="also sample without injection and report deltas")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refattn", description="Reference-guided attention control on a toy diffusion model")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train the toy U-Net on synthetic shapes")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--count", type=int, default=2048, help="training images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--channel-mult", default="1,2,4")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--attn-weight", type=float, default=0.1,
                   help="weight of the attention-alignment term (0 = plain denoising loss)")
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample with reference concepts")
    _generate_flags(p)
    p.add_argument("--plain", action="store_true", help="ignore references and sample plainly")
    p.add_argument("--save-attention", action="store_true", help="dump final-step attention and figures")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sweep", help="one generate run per value of alpha, weight or blocks")
    _generate_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated numbers, or for blocks ';'-separated lists such as '5,6;4,5,6'")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("visualize", help="re-render figures from a generate run directory")
    p.add_argument("run")
    p.add_argument("--out")
    p.add_argument("--panels", type=int, default=10)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("metrics", help="recompute the fidelity table of a generate run")
    p.add_argument("run")
    p.add_argument("--baseline", help="run directory sampled without injection")
    p.add_argument("--out", help="also write the TSV here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("dataset", help="export a synthetic shapes dataset as PPM/PGM")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("reference", help="render a single-shape reference image and mask")
    p.add_argument("--kind", default="triangle")
    p.add_argument("--color", default="red")
    p.add_argument("--shade", type=float, default=0.5)
    p.add_argument("--extent", type=float, default=6.5)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--cx", type=float)
    p.add_argument("--cy", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reference)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except RefAttnError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(DataError(str(exc), code="E_IO").line(), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
