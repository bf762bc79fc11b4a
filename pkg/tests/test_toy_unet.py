import math

import numpy as np
import pytest
import torch

from refattn.attention import self_attention
from refattn.diffusion import build_schedule
from refattn.errors import DataError, GenerationError, UsageError
from refattn.numerics import Rng
from refattn.toy.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from refattn.toy.shapes import (DatasetSpec, Vocabulary, make_shapes_dataset, shape_area, shape_mask,
                                shape_perimeter)
from refattn.toy.train import alignment_loss, denoising_loss, train_toy
from refattn.toy.unet import AttnRecord, UNetConfig, build_unet, denoise, encode_tokens


def expected_param_count(cfg: UNetConfig) -> int:
    """Closed-form count from the architecture description."""
    base, L = cfg.base_channels, cfg.levels
    ch = [base * m for m in cfg.channel_mult]
    tdim = 2 * base

    def res(cin, cout):
        n = 2 * cin + (9 * cin * cout + cout) + (tdim * cout + cout) + 2 * cout + (9 * cout * cout + cout)
        return n + (cin * cout + cout if cin != cout else 0)

    def attn(c):
        d, E = cfg.head_dim, cfg.token_dim
        return 2 * c + 3 * c * d + (d * c + c) + 2 * c + c * d + 2 * E * d + (d * c + c)

    n = (base * tdim + tdim) + (tdim * tdim + tdim)  # time MLP
    n += cfg.vocab_size * cfg.token_dim
    n += 9 * cfg.in_channels * ch[0] + ch[0]
    block_ch = {}
    prev = ch[0]
    for lvl in range(L):
        n += res(prev, ch[lvl])
        block_ch[lvl + 1] = ch[lvl]
        prev = ch[lvl]
        if lvl < L - 1:
            n += 9 * ch[lvl] ** 2 + ch[lvl]
    n += res(prev, prev)
    block_ch[L + 1] = prev
    for i, lvl in enumerate(range(L - 1, -1, -1)):
        n += res(prev + ch[lvl], ch[lvl])
        block_ch[L + 2 + i] = ch[lvl]
        prev = ch[lvl]
        if lvl > 0:
            n += 9 * ch[lvl] ** 2 + ch[lvl]
    n += sum(attn(block_ch[b]) for b in cfg.attn_blocks)
    n += 2 * ch[0] + 9 * ch[0] * cfg.in_channels + cfg.in_channels
    return n


@pytest.mark.parametrize("cfg", [
    UNetConfig(),
    UNetConfig(base_channels=16, channel_mult=[1, 2, 4]),
    UNetConfig(levels=2, image_size=32, base_channels=8, head_dim=4, token_dim=6),
    UNetConfig(attn_blocks=[1, 4, 7], base_channels=12, head_dim=5),
])
def test_parameter_count(cfg):
    m = build_unet(cfg, Rng(0))
    assert sum(p.numel() for p in m.parameters()) == expected_param_count(cfg)
    assert sorted(int(k) for k in m.attn.keys()) == cfg.attn_blocks


def test_default_attention_blocks_are_coarse():
    cfg = UNetConfig()
    assert cfg.attn_blocks == [2, 3, 4, 5, 6]
    assert cfg.block_resolution(5) == (8, 8) and cfg.block_resolution(6) == (16, 16)


@pytest.mark.parametrize("kwargs", [dict(image_size=30, levels=3), dict(head_dim=0),
                                    dict(attn_blocks=[2, 2]), dict(attn_blocks=[9]), dict(levels=0)])
def test_invalid_config(kwargs):
    with pytest.raises(UsageError):
        UNetConfig(**kwargs)


def test_build_deterministic():
    cfg = UNetConfig(base_channels=8, head_dim=4, token_dim=4)
    a, b = build_unet(cfg, Rng(3)), build_unet(cfg, Rng(3))
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    c = build_unet(cfg, Rng(4))
    assert not torch.equal(a.conv_in.weight, c.conv_in.weight)


def test_two_level_shape_contract():
    cfg = UNetConfig(levels=2, image_size=32, base_channels=8, head_dim=4, token_dim=4)
    m = build_unet(cfg, Rng(0), dtype=torch.float64)
    eps, rec = denoise(m, torch.randn(3, 32, 32, dtype=torch.float64), 10, [1])
    assert eps.shape == (3, 32, 32)
    assert rec.blocks() == cfg.attn_blocks


def test_denoise_contract(small_model, small_config):
    z = torch.randn(3, 16, 16, dtype=torch.float64)
    eps, rec = denoise(small_model, z, 500, [1, 5, 2])
    assert eps.shape == z.shape and torch.isfinite(eps).all()
    assert rec.blocks() == small_config.attn_blocks
    for b in rec.blocks():
        lr = rec[b]
        n = math.prod(lr.resolution)
        assert lr.self_map.shape == (1, n, n)
        assert lr.cross_map.shape == (1, n, small_config.max_tokens)
        for M in (lr.self_map, lr.cross_map):
            assert (M >= 0).all() and (M.sum(-1) - 1).abs().max() <= 1e-6
        assert torch.allclose(lr.out, lr.self_map @ lr.v)


def test_denoise_deterministic(small_model):
    z = torch.randn(3, 16, 16, dtype=torch.float64)
    e1, r1 = denoise(small_model, z, 300, [1, 6])
    e2, r2 = denoise(small_model, z, 300, [1, 6])
    assert torch.equal(e1, e2)
    assert all(torch.equal(r1[b].self_map, r2[b].self_map) and torch.equal(r1[b].cross_map, r2[b].cross_map)
               for b in r1.blocks())


def test_hook_transparency(small_model, small_config):
    d = small_config.head_dim
    calls = []

    def vanilla(block, q, k, v):
        calls.append(block)
        return torch.stack([self_attention(q[i], k[i], v[i], d) for i in range(q.shape[0])])

    z = torch.randn(3, 16, 16, dtype=torch.float64)
    e0, _ = denoise(small_model, z, 250, [1, 3])
    e1, _ = denoise(small_model, z, 250, [1, 3], hook=vanilla)
    assert sorted(calls) == small_config.attn_blocks
    assert (e0 - e1).abs().max() <= 1e-6


def test_hook_changes_output_and_records_original_maps(small_model):
    z = torch.randn(3, 16, 16, dtype=torch.float64)
    e0, r0 = denoise(small_model, z, 250, [1])
    e1, r1 = denoise(small_model, z, 250, [1], hook=lambda b, q, k, v: torch.zeros_like(v) if b == 6 else None)
    assert not torch.allclose(e0, e1)
    assert torch.equal(r1[6].out, torch.zeros_like(r1[6].out))
    # blocks upstream of the override are untouched
    assert torch.equal(r0[2].self_map, r1[2].self_map)


def test_token_overflow(small_model):
    with pytest.raises(UsageError):
        denoise(small_model, torch.zeros(3, 16, 16, dtype=torch.float64), 1, [1] * 8)
    with pytest.raises(UsageError):
        encode_tokens(small_model, [99])


# --- dataset -----------------------------------------------------------------

def test_single_shape_area_oracle():
    for kind in ("circle", "square", "triangle"):
        spec = DatasetSpec(shape_kinds=(kind,), colors=("red",), count=1, max_shapes=1,
                           shape_count_weights=(1.0,))
        ds = make_shapes_dataset(spec, Rng(2))
        assert len(ds) == 1
        s = ds.shapes[0][0]
        area = ds.masks[0][0].sum()
        assert abs(area - shape_area(kind, s.extent)) <= shape_perimeter(kind, s.extent)


@pytest.mark.parametrize("kind,extent", [("circle", 6.3), ("square", 5.0), ("triangle", 7.0)])
def test_rasterized_area_close_to_analytic(kind, extent):
    m = shape_mask(kind, 16.2, 15.7, extent, 32)
    assert abs(m.sum() - shape_area(kind, extent)) <= shape_perimeter(kind, extent)


def test_dataset_determinism_and_bounds():
    spec = DatasetSpec(count=40)
    a, b = make_shapes_dataset(spec, Rng(1)), make_shapes_dataset(spec, Rng(1))
    assert np.array_equal(a.images, b.images) and a.tokens == b.tokens
    vocab = spec.vocabulary
    for toks, masks, shapes in zip(a.tokens, a.masks, a.shapes):
        assert all(0 <= t < len(vocab) for t in toks)
        assert 1 <= len(shapes) <= 3 and len(toks) == 1 + 2 * len(shapes)
        assert masks.dtype == bool and masks.shape[1:] == (32, 32)
        # non-overlapping
        assert masks.sum(0).max() <= 1


def test_dataset_errors():
    with pytest.raises(UsageError):
        make_shapes_dataset(DatasetSpec(shape_kinds=(), count=1), Rng(0))
    with pytest.raises(GenerationError):
        make_shapes_dataset(DatasetSpec(image_size=8, min_extent=4, max_extent=5, count=1), Rng(0))
    with pytest.raises(GenerationError):
        # fits on paper but the placement budget is too small for three shapes
        make_shapes_dataset(DatasetSpec(image_size=20, min_extent=4, max_extent=4.5, max_shapes=3,
                                        shape_count_weights=(0, 0, 1), count=1), Rng(0), max_tries=2)


def test_vocabulary_roundtrip():
    v = Vocabulary()
    assert v.decode(v.ids(["background", "red", "triangle"])) == ["background", "red", "triangle"]
    with pytest.raises(DataError):
        v.id("purple")


def test_dataset_export(tmp_path):
    from refattn.imageio import read_mask, read_pnm

    ds = make_shapes_dataset(DatasetSpec(count=3), Rng(5))
    out = ds.export(tmp_path / "ds")
    import json
    index = json.loads((out / "index.json").read_text())
    assert len(index["items"]) == 3
    img = read_pnm(out / index["items"][0]["image"])
    assert img.shape == (32, 32, 3)
    m = read_mask(out / index["items"][0]["masks"][0])
    assert np.array_equal(m, ds.masks[0][0])


# --- training ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_setup():
    cfg = UNetConfig(image_size=16, base_channels=8, head_dim=8, token_dim=8, levels=2, vocab_size=9)
    data = make_shapes_dataset(DatasetSpec(count=48, image_size=16, min_extent=2.5, max_extent=4,
                                           max_shapes=2, shape_count_weights=(0.7, 0.3)), Rng(0))
    return cfg, data, build_schedule(1000)


def test_zero_epochs_leaves_parameters(tiny_setup):
    cfg, data, sched = tiny_setup
    m = build_unet(cfg, Rng(1))
    before = {k: v.clone() for k, v in m.state_dict().items()}
    train_toy(m, data, sched, 0, Rng(2))
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_training_reduces_loss_and_is_deterministic(tiny_setup):
    cfg, data, sched = tiny_setup
    a = train_toy(build_unet(cfg, Rng(1)), data, sched, 6, Rng(2), batch_size=16, lr=3e-3)
    b = train_toy(build_unet(cfg, Rng(1)), data, sched, 6, Rng(2), batch_size=16, lr=3e-3)
    losses = [e["loss"] for e in a.train_log]
    assert losses[-1] < losses[0]
    assert [e["loss"] for e in b.train_log] == losses
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert all(torch.isfinite(p).all() for p in a.parameters())


def test_empty_dataset_rejected(tiny_setup):
    cfg, data, sched = tiny_setup
    from refattn.toy.shapes import ShapesDataset
    empty = ShapesDataset(np.zeros((0, 16, 16, 3)), [], [], [])
    with pytest.raises(UsageError):
        train_toy(build_unet(cfg, Rng(0)), empty, sched, 1, Rng(0))


def test_training_with_alignment_is_deterministic(tiny_setup):
    cfg, data, sched = tiny_setup
    a = train_toy(build_unet(cfg, Rng(1)), data, sched, 2, Rng(2), batch_size=16, attn_weight=0.1)
    b = train_toy(build_unet(cfg, Rng(1)), data, sched, 2, Rng(2), batch_size=16, attn_weight=0.1)
    c = train_toy(build_unet(cfg, Rng(1)), data, sched, 2, Rng(2), batch_size=16)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(c)
    with pytest.raises(UsageError):
        train_toy(build_unet(cfg, Rng(1)), data, sched, 1, Rng(2), attn_weight=-1)


def test_coverage_partitions_pixels(tiny_setup):
    _, data, _ = tiny_setup
    cov = data.coverage(3).numpy()
    assert np.allclose(cov.sum(1), 1)
    for i, m in enumerate(data.masks):
        assert np.array_equal(cov[i, 1:1 + len(m)].astype(bool), m)
        assert not cov[i, 1 + len(m):].any()
    with pytest.raises(UsageError):
        data.coverage(1)


def alignment_oracle(record, coverage, weight, self_weight):
    """Loop version: per pixel, -sum_r coverage_r * log(attention mass on region r)."""
    terms = []
    for b in record.blocks():
        P, S = record[b].cross_map.tolist(), record[b].self_map.tolist()
        H, W = record[b].resolution
        cov = torch.nn.functional.adaptive_avg_pool2d(coverage, (H, W)).flatten(2).tolist()
        R = len(cov[0])
        for maps, wts in ((P, weight), (S, self_weight)):
            acc = norm = 0.0
            for i in range(len(P)):
                ce = 0.0
                for p in range(H * W):
                    for r in range(R):
                        if maps is P:
                            m = P[i][p][0] if r == 0 else P[i][p][2 * r - 1] + P[i][p][2 * r]
                        else:
                            m = sum(S[i][p][q] * cov[i][r][q] for q in range(H * W))
                        ce -= cov[i][r][p] * math.log(m + 1e-8)
                acc += float(wts[i]) * ce / (H * W)
                norm += float(wts[i])
            terms.append(acc / max(norm, 1e-12))
    return sum(terms) / len(terms)


def test_alignment_loss_matches_oracle(tiny_setup):
    cfg, data, sched = tiny_setup
    model = build_unet(cfg, Rng(3), dtype=torch.float64)
    x, tok = data.as_tensors(cfg.max_tokens, dtype=torch.float64)
    rec = AttnRecord(keep_grad=True)
    t = torch.tensor([5, 300, 800])
    model(x[:3], t, tok[:3], record=rec)
    cov = data.coverage(3, dtype=torch.float64)[:3]
    w, sw = torch.tensor([1.0, 0.0, 0.5], dtype=torch.float64), torch.tensor([0.2, 1.0, 0.7], dtype=torch.float64)
    got = alignment_loss(rec, cov, w, sw)
    assert got.item() == pytest.approx(alignment_oracle(rec, cov, w, sw), rel=1e-10)
    got.backward()
    assert all(blk.to_q_cross.weight.grad.abs().sum() > 0 for blk in model.attn.values())


def test_noise_skip_output(small_config):
    """With the skip on, the output is sqrt(1-ab) z + sqrt(ab) * (net output without it)."""
    import dataclasses

    on = build_unet(small_config, Rng(4), dtype=torch.float64)
    off = build_unet(dataclasses.replace(small_config, noise_skip=False), Rng(4), dtype=torch.float64)
    z = torch.from_numpy(np.random.default_rng(0).normal(size=(2, 3, 16, 16)))
    t = torch.tensor([3, 900])
    tok = torch.tensor([[1, 5, 4, 0, 0, 0, 0]] * 2)
    ab = build_schedule(1000).alpha_bar[t][:, None, None, None]
    expect = (1 - ab).sqrt() * z + ab.sqrt() * off(z, t, tok)
    assert torch.allclose(on(z, t, tok), expect, rtol=0, atol=1e-12)


def fd_probe(model, x0, tok, t, eps, sched, name, index, h=1e-6):
    p = dict(model.named_parameters())[name]
    model.zero_grad()
    denoising_loss(model, x0, tok, t, eps, sched).backward()
    analytic = p.grad.flatten()[index].item()
    with torch.no_grad():
        flat = p.view(-1)
        orig = flat[index].item()
        flat[index] = orig + h
        up = denoising_loss(model, x0, tok, t, eps, sched).item()
        flat[index] = orig - h
        down = denoising_loss(model, x0, tok, t, eps, sched).item()
        flat[index] = orig
    return analytic, (up - down) / (2 * h)


def finite_difference_errors(cfg, data, sched):
    model = build_unet(cfg, Rng(1), dtype=torch.float64)
    x, tok = data.as_tensors(cfg.max_tokens, dtype=torch.float64)
    x0, tok = x[:4], tok[:4]
    t = torch.tensor([10, 200, 600, 990])
    eps = torch.from_numpy(np.random.default_rng(0).normal(size=tuple(x0.shape)))
    probes = [("conv_in.weight", 5), ("attn.2.to_q.weight", 3), ("attn.2.to_k_cross.weight", 7),
              ("token_embedding.weight", 9 * 1 + 2), ("res.3.conv2.weight", 11), ("conv_out.bias", 1),
              ("time_mlp.2.weight", 4)]
    errs = []
    for name, idx in probes:
        a, n = fd_probe(model, x0, tok, t, eps, sched, name, idx)
        errs.append((name, abs(a - n) / max(abs(a), abs(n), 1e-12)))
    return errs


def test_gradient_matches_finite_differences(tiny_setup):
    cfg, data, sched = tiny_setup
    for name, rel in finite_difference_errors(cfg, data, sched):
        assert rel < 1e-4, name


# --- checkpoint --------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, small_model):
    p = save_checkpoint(small_model, tmp_path / "m.ckpt", meta={"vocabulary": Vocabulary().to_dict()})
    m, meta = load_checkpoint(p)
    assert meta["vocabulary"]["colors"][0] == "red"
    assert m.config == small_model.config
    assert all(torch.equal(a, b) for a, b in zip(m.state_dict().values(), small_model.state_dict().values()))
    assert checkpoint_bytes(m, meta) == p.read_bytes()
    raw = p.read_bytes()
    assert raw[:8] == b"RATTNCK\x00"


def test_checkpoint_bad_magic(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(DataError):
        load_checkpoint(bad)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")
