import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfsteer.errors import ConfigError, InputError
from cfsteer.refine import (
    BinaryMask,
    build_mask,
    dilate,
    inpaint,
    load_mask_png,
    reverse_from,
    save_mask_png,
)


def brute_force_mask(x, x2, gamma, d):
    """Direct loop evaluation: channel-summed |diff|, divided by its maximum, clamped window max."""
    C, H, W = x.shape
    summed = [[sum(abs(float(x2[c, i, j]) - float(x[c, i, j])) for c in range(C)) for j in range(W)] for i in range(H)]
    M = max(max(row) for row in summed)
    r = d // 2
    m = np.zeros((H, W), dtype=np.uint8)
    if M == 0:
        return m
    for i in range(H):
        for j in range(W):
            best = 0.0
            for u in range(max(0, i - r), min(H, i + r + 1)):
                for v in range(max(0, j - r), min(W, j + r + 1)):
                    best = max(best, summed[u][v] / M)
            m[i, j] = 1 if best > gamma else 0
    return m


def test_identical_images_give_empty_mask(rng):
    x = rng.random((3, 8, 8))
    assert not build_mask(x, x, 0.1, 3).m.any()


def test_hand_evaluated_single_channel_examples():
    x = np.zeros((1, 3, 3))
    x2 = x.copy()
    x2[0, 1, 1] = 0.5
    m1 = build_mask(x, x2, 0.1, 1).m
    expected = np.zeros((3, 3), dtype=np.uint8)
    expected[1, 1] = 1
    assert np.array_equal(m1, expected)
    assert np.array_equal(build_mask(x, x2, 0.1, 3).m, np.ones((3, 3), dtype=np.uint8))


def test_matches_brute_force_on_random_pairs():
    g = np.random.default_rng(2024)
    for _ in range(200):
        x = g.random((3, 8, 8))
        x2 = np.clip(x + g.normal(0, 0.2, x.shape) * (g.random((1, 8, 8)) < 0.3), 0, 1)
        gamma = float(g.uniform(0, 1))
        d = int(g.choice([1, 3, 5]))
        assert np.array_equal(build_mask(x, x2, gamma, d).m, brute_force_mask(x, x2, gamma, d))


def test_mask_validation():
    x = np.zeros((3, 4, 4))
    with pytest.raises(InputError):
        build_mask(x, np.zeros((3, 4, 5)))
    with pytest.raises(ConfigError):
        build_mask(x, x, 0.1, 2)
    with pytest.raises(ConfigError):
        build_mask(x, x, 1.5, 1)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 6, 6), elements=st.floats(0, 1)),
    arrays(np.float64, (3, 6, 6), elements=st.floats(0, 1)),
    st.floats(0, 1),
    st.floats(0, 1),
    st.sampled_from([1, 3, 5]),
)
def test_mask_monotone_in_threshold_and_symmetric(x, x2, g1, g2, d):
    lo, hi = min(g1, g2), max(g1, g2)
    m_lo, m_hi = build_mask(x, x2, lo, d).m, build_mask(x, x2, hi, d).m
    assert np.all(m_hi <= m_lo)
    assert np.array_equal(build_mask(x2, x, lo, d).m, m_lo)


def test_dilation_examples():
    m = np.zeros((7, 7), dtype=np.uint8)
    m[3, 3] = 1
    mask = BinaryMask(m)
    assert np.array_equal(dilate(mask, 0).m, m)
    block = np.zeros_like(m)
    block[2:5, 2:5] = 1
    assert np.array_equal(dilate(mask, 1).m, block)
    with pytest.raises(ConfigError):
        dilate(mask, -1)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (9, 9), elements=st.integers(0, 1)), st.integers(0, 3), st.integers(0, 3))
def test_dilation_composes_and_grows(m, a, b):
    mask = BinaryMask(m)
    twice = dilate(dilate(mask, a), b)
    assert np.array_equal(twice.m, dilate(mask, a + b).m)
    assert np.all(dilate(mask, a).m >= m)


def test_mask_png_roundtrip(tmp_path, rng):
    m = (rng.random((32, 32)) > 0.5).astype(np.uint8)
    save_mask_png(BinaryMask(m), tmp_path / "m.png")
    assert np.array_equal(load_mask_png(tmp_path / "m.png"), m)


# -- inpainting -------------------------------------------------------------------------


def test_all_ones_mask_equals_plain_reverse(tiny_denoiser, short_schedule, rng):
    x = rng.random((2, 3, 32, 32)).astype(np.float32)
    xi = rng.random((2, 3, 32, 32)).astype(np.float32)
    ones = np.ones((2, 32, 32), dtype=np.uint8)
    a = inpaint(x, xi, ones, tiny_denoiser, short_schedule, 7, seed=3)
    b = reverse_from(xi, tiny_denoiser, short_schedule, 7, seed=3)
    assert torch.equal(a, b)


def test_inpaint_is_deterministic_and_in_range(tiny_denoiser, short_schedule, rng):
    x = rng.random((3, 32, 32)).astype(np.float32)
    xi = rng.random((3, 32, 32)).astype(np.float32)
    m = (rng.random((32, 32)) > 0.5).astype(np.uint8)
    a = inpaint(x, xi, m, tiny_denoiser, short_schedule, 5, seed=1)
    b = inpaint(x, xi, BinaryMask(m), tiny_denoiser, short_schedule, 5, seed=1)
    c = inpaint(x, xi, m, tiny_denoiser, short_schedule, 5, seed=2)
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert a.shape == (3, 32, 32) and a.min() >= 0 and a.max() <= 1


def test_literal_convention_swaps_regions(tiny_denoiser, short_schedule, rng):
    x = rng.random((1, 3, 32, 32)).astype(np.float32)
    xi = rng.random((1, 3, 32, 32)).astype(np.float32)
    m = (rng.random((1, 32, 32)) > 0.5).astype(np.uint8)
    a = inpaint(x, xi, m, tiny_denoiser, short_schedule, 4, seed=0, literal=True)
    b = inpaint(x, xi, 1 - m, tiny_denoiser, short_schedule, 4, seed=0)
    assert torch.equal(a, b)


def test_paste_restores_unmodified_pixels(tiny_denoiser, short_schedule, rng):
    x = rng.random((1, 3, 32, 32)).astype(np.float32)
    xi = rng.random((1, 3, 32, 32)).astype(np.float32)
    m = np.zeros((1, 32, 32), dtype=np.uint8)
    m[:, 8:16, 8:16] = 1
    out = inpaint(x, xi, m, tiny_denoiser, short_schedule, 4, paste=True)
    keep = np.broadcast_to(m[:, None] == 0, out.shape)
    assert np.array_equal(out.numpy()[keep], x[keep])


def test_zero_refine_steps_returns_initial(tiny_denoiser, short_schedule, rng):
    x = rng.random((1, 3, 32, 32)).astype(np.float32)
    xi = rng.random((1, 3, 32, 32)).astype(np.float32)
    out = inpaint(x, xi, np.ones((1, 32, 32)), tiny_denoiser, short_schedule, 0)
    assert np.array_equal(out.numpy(), xi)


def test_inpaint_validation(tiny_denoiser, short_schedule):
    x = np.zeros((1, 3, 32, 32), dtype=np.float32)
    with pytest.raises(InputError):
        inpaint(x, x, np.ones((1, 16, 16)), tiny_denoiser, short_schedule, 2)
    with pytest.raises(ConfigError):
        inpaint(x, x, np.ones((1, 32, 32)), tiny_denoiser, short_schedule, 11)


# -- trained denoiser --------------------------------------------------------------------


@pytest.fixture(scope="module")
def refine_batch(desk_artifacts):
    a = desk_artifacts
    x = a.test.images[:32]
    return a, x


@pytest.mark.slow
def test_empty_mask_reconstructs_original(refine_batch):
    a, x = refine_batch
    t = -(-a.schedule.T // 2)
    zeros = np.zeros((len(x), 32, 32), dtype=np.uint8)
    out = inpaint(x, x, zeros, a.denoiser, a.schedule, t, seed=0)
    assert float(np.abs(out.numpy() - x).mean()) < 0.05


@pytest.mark.slow
def test_checkerboard_unmasked_pixels_stay_closer(refine_batch):
    a, x = refine_batch
    t = -(-a.schedule.T // 2)
    board = ((np.indices((32, 32)) // 4).sum(axis=0) % 2).astype(np.uint8)
    masks = np.broadcast_to(board, (len(x), 32, 32))
    other = a.test.images[32:64]
    out = inpaint(x, other, masks, a.denoiser, a.schedule, t, seed=0).numpy()
    err = np.abs(out - x).mean(axis=1)
    assert err[:, board == 0].mean() < err[:, board == 1].mean()


@pytest.mark.slow
def test_unmodified_fidelity_improves_as_refine_steps_shrink(refine_batch):
    a, x = refine_batch
    T = a.schedule.T
    board = ((np.indices((32, 32)) // 8).sum(axis=0) % 2).astype(np.uint8)
    masks = np.broadcast_to(board, (len(x), 32, 32))
    other = a.test.images[32:64]
    maes = []
    for t in (T // 4, T // 2, T):
        out = inpaint(x, other, masks, a.denoiser, a.schedule, t, seed=0).numpy()
        maes.append(float(np.abs(out - x).mean(axis=1)[:, board == 0].mean()))
    print("unmasked MAE at 25/50/100% of T:", maes)
    assert maes[0] < maes[1] < maes[2]
