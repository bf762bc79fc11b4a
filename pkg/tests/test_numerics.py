import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp

import oracles
from refattn.errors import DegenerateRowError, UsageError
from refattn.numerics import Rng, gaussian, resize_bilinear, row_normalize, softmax

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_symmetric():
    assert softmax(torch.tensor([0.0, 0.0], dtype=torch.float64)).tolist() == [0.5, 0.5]


def test_softmax_no_overflow():
    out = softmax(torch.tensor([1000.0, 0.0], dtype=torch.float64))
    assert torch.isfinite(out).all()
    assert out[0] == 1.0 and out[1] < 1e-300


def test_softmax_matches_high_precision():
    mp.dps = 50
    xs = [1, 2, 3]
    denom = sum(mp.e ** x for x in xs)
    ref = [float(mp.e ** x / denom) for x in xs]
    out = softmax(torch.tensor(xs, dtype=torch.float64)).tolist()
    assert max(abs(a - b) for a, b in zip(out, ref)) <= 1e-12


def test_softmax_bad_axis():
    with pytest.raises(UsageError):
        softmax(torch.zeros(2, 3), axis=2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(finite, min_size=1, max_size=6), min_size=1, max_size=5).filter(
    lambda rows: len({len(r) for r in rows}) == 1))
def test_softmax_rows_are_distributions(rows):
    out = softmax(torch.tensor(rows, dtype=torch.float64), axis=1)
    assert (out >= 0).all()
    assert torch.allclose(out.sum(1), torch.ones(len(rows), dtype=torch.float64), atol=1e-6)


def test_softmax_other_axis():
    x = torch.randn(3, 4, dtype=torch.float64)
    assert torch.allclose(softmax(x, axis=0).sum(0), torch.ones(4, dtype=torch.float64))


def test_resize_identity_bit_exact():
    m = torch.randn(5, 7, dtype=torch.float64)
    assert torch.equal(resize_bilinear(m, (5, 7)), m)


@pytest.mark.parametrize("size", [(1, 1), (3, 9), (16, 16), (2, 5)])
def test_resize_constant_exact(size):
    m = torch.full((4, 4), 0.3137, dtype=torch.float64)
    out = resize_bilinear(m, size)
    assert torch.equal(out, torch.full(size, 0.3137, dtype=torch.float64))


def test_resize_2x2_to_4x4_against_reference():
    src = [[0.0, 1.0], [1.0, 0.0]]
    ref = oracles.bilinear_half_pixel(src, 4, 4)
    out = resize_bilinear(torch.tensor(src, dtype=torch.float64), (4, 4))
    assert np.allclose(out.numpy(), ref, atol=1e-15)
    # hand-evaluated corners and interior under half-pixel centres
    assert out[0, 0] == 0.0 and out[0, 3] == 1.0
    assert out[1, 1] == pytest.approx(0.375)
    assert out[0, 1] == pytest.approx(0.25)


def test_resize_matches_torch_interpolate():
    m = torch.rand(2, 3, 5, 6, dtype=torch.float64)
    ours = resize_bilinear(m, (11, 9))
    ref = torch.nn.functional.interpolate(m, size=(11, 9), mode="bilinear", align_corners=False)
    assert torch.allclose(ours, ref, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_resize_within_range(h, w, H, W, seed):
    m = torch.from_numpy(np.random.default_rng(seed).normal(size=(h, w)))
    out = resize_bilinear(m, (H, W))
    assert out.shape == (H, W)
    assert out.min() >= m.min() and out.max() <= m.max()
    assert torch.isfinite(out).all()


def test_row_normalize_basics():
    assert row_normalize(torch.ones(1, 4, dtype=torch.float64)).tolist() == [[0.25] * 4]
    p = torch.tensor([[0.2, 0.8], [0.5, 0.5]], dtype=torch.float64)
    assert torch.allclose(row_normalize(p), p, atol=1e-12)


def test_row_normalize_random_rows_sum_to_one():
    m = torch.from_numpy(np.random.default_rng(3).uniform(size=(8, 5)))
    out = row_normalize(m)
    for row in out.tolist():
        assert abs(math.fsum(row) - 1.0) <= 1e-6


def test_row_normalize_degenerate_and_negative():
    with pytest.raises(DegenerateRowError):
        row_normalize(torch.tensor([[1.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(UsageError):
        row_normalize(torch.tensor([[1.0, -1.0]]))


def test_gaussian_determinism_and_moments():
    a = gaussian(Rng(5), (100_000,))
    b = gaussian(Rng(5), (100_000,))
    assert torch.equal(a, b)
    assert abs(a.mean().item()) < 0.02
    assert abs(a.var().item() - 1) < 0.02
    assert not torch.equal(gaussian(Rng(6), (16,)), gaussian(Rng(5), (16,)))


def test_rng_children_are_independent_of_draw_order():
    r1 = Rng(9)
    x = gaussian(r1.child(2), (4,))
    gaussian(r1.child(1), (4,))
    r2 = Rng(9)
    assert torch.equal(gaussian(r2.child(2), (4,)), x)


def test_rng_rejects_bad_seed():
    with pytest.raises(UsageError):
        Rng(-1)
