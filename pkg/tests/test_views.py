import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from wsidistill.config import DataConfig, ViewConfig
from wsidistill.pyramid import Patch
from wsidistill.views import (
    ViewStream,
    build_view_set,
    center_box,
    grayscale,
    make_color_view,
    make_global_views,
    make_local_views,
    make_mask,
    make_shuffle_view,
    resized_crop,
    rotate_hue,
    sample_crop_box,
    to_tensor,
    unshuffle,
)

IDENTITY = ViewConfig(global_size=32, local_size=16, augment=False, color_brightness=0.0, color_saturation=0.0,
                      color_hue=0.0, channel_perm_p=0.0, gray_p=0.0, base_gray_p=0.0)


def patch(seed=0, size=64, level=0):
    px = np.random.default_rng(seed).integers(0, 256, size=(size, size, 3)).astype(np.uint8)
    return Patch(px, level, (0, 0), "s")


def test_identity_globals_are_center_crops():
    base = patch()
    g = make_global_views(base, None, IDENTITY, np.random.default_rng(0))
    expected = resized_crop(to_tensor(base.pixels), center_box(64, 64, 1.0), 32)
    assert torch.equal(g[0], expected) and torch.equal(g[1], expected)


def test_identity_local_is_forty_percent_center_crop():
    base = patch()
    (view,) = make_local_views(base, 1, IDENTITY, np.random.default_rng(0))
    box = center_box(64, 64, 0.4)
    assert box[2] == round(math.sqrt(0.4) * 64)
    assert torch.equal(view, resized_crop(to_tensor(base.pixels), box, 16))


def test_views_are_deterministic():
    cfg = ViewConfig(global_size=32, local_size=16, n_local=3, shuffle_grid=4)
    a = build_view_set(patch(), patch(1, 64, 1), cfg, 16, np.random.default_rng(5))
    b = build_view_set(patch(), patch(1, 64, 1), cfg, 16, np.random.default_rng(5))
    for x, y in zip(a.globals + a.locals + [a.color_view, a.shuffle_view],
                    b.globals + b.locals + [b.color_view, b.shuffle_view]):
        assert torch.equal(x, y)
    assert a.seeds == b.seeds and np.array_equal(a.mask_spec.token_mask, b.mask_spec.token_mask)


def test_view_set_shape_contract():
    cfg = ViewConfig(global_size=32, local_size=16, n_local=8, shuffle_grid=4)
    vs = build_view_set(patch(), patch(1, 64, 1), cfg, 16, np.random.default_rng(0))
    assert len(vs.globals) == 3 and len(vs.locals) == 8
    assert all(g.shape == (3, 32, 32) for g in vs.globals)
    assert all(v.shape == (3, 16, 16) for v in vs.locals)
    assert len({vs.seeds[f"l{i}"] for i in range(8)}) == 8
    assert vs.mask_spec.token_mask.sum() == round(0.3 * 16)


def test_coarse_view_pixel_is_two_by_two_mean():
    # a level-1 coarse patch already holds 2x2 level-0 means; x3 is its plain resize
    level0 = np.random.default_rng(1).integers(0, 256, size=(64, 64, 3)).astype(np.uint8)
    level1 = level0.reshape(32, 2, 32, 2, 3).mean(axis=(1, 3))
    coarse = Patch(np.round(level1).astype(np.uint8), 1, (0, 0), "s")
    g = make_global_views(patch(), coarse, IDENTITY, np.random.default_rng(0))
    assert torch.allclose(g[2], to_tensor(coarse.pixels))
    assert abs(g[2][0, 3, 5].item() * 255 - level0[6:8, 10:12, 0].mean()) <= 0.5


def test_crop_boxes_stay_inside():
    rng = np.random.default_rng(0)
    for i in range(10_000):
        h, w = int(rng.integers(8, 300)), int(rng.integers(8, 300))
        scale = (0.05, 0.4) if i % 2 else (0.4, 1.0)
        x, y, bw, bh = sample_crop_box(h, w, scale, rng)
        assert 0 <= x and 0 <= y and bw > 0 and bh > 0 and x + bw <= w and y + bh <= h


# ----- color view ----------------------------------------------------------------

def test_zero_strength_color_view_is_plain_local():
    cfg = replace(IDENTITY, augment=True, jitter_p=0.0, blur_p=0.0, flip_p=0.0)
    base = patch(3)
    color = make_color_view(base, cfg, np.random.default_rng(4))
    (local,) = make_local_views(base, 1, cfg, np.random.default_rng(4))
    assert torch.equal(color, local)


def test_grayscale_channels_equal():
    cfg = replace(IDENTITY, gray_p=1.0)
    view = make_color_view(patch(), cfg, np.random.default_rng(0))
    assert torch.equal(view[0], view[1]) and torch.equal(view[1], view[2])
    g = grayscale(torch.rand(3, 4, 4))
    assert torch.equal(g[0], g[2])


def test_full_hue_turn_is_identity():
    img = to_tensor(patch(7).pixels).double()
    out = rotate_hue(img, 2 * math.pi)
    assert torch.max(torch.abs(out - img)).item() * 255 <= 1.0


# ----- shuffle -------------------------------------------------------------------

def test_identity_permutation():
    img = torch.rand(3, 8, 8)
    out, spec = make_shuffle_view(img, 2, np.random.default_rng(0), perm=np.arange(4))
    assert torch.equal(out, img) and spec.resized_from is None


def test_hand_permutation_swaps_blocks():
    img = torch.arange(16, dtype=torch.float32).view(1, 4, 4).expand(3, 4, 4).clone()
    out, _ = make_shuffle_view(img, 2, np.random.default_rng(0), perm=np.array([1, 0, 3, 2]))
    expected = torch.tensor([[2, 3, 0, 1], [6, 7, 4, 5], [10, 11, 8, 9], [14, 15, 12, 13]], dtype=torch.float32)
    assert torch.equal(out[0], expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_shuffle_roundtrip_and_multiset(grid, block, seed):
    side = grid * block
    img = torch.rand(3, side, side, generator=torch.Generator().manual_seed(seed))
    out, spec = make_shuffle_view(img, grid, np.random.default_rng(seed))
    assert torch.equal(unshuffle(out, spec), img)
    assert torch.equal(out.flatten().sort().values, img.flatten().sort().values)
    assert np.array_equal(spec.perm[spec.inverse()], np.arange(grid * grid))


def test_shuffle_resizes_indivisible_views():
    out, spec = make_shuffle_view(torch.rand(3, 10, 10), 4, np.random.default_rng(0))
    assert out.shape[-1] % 4 == 0 and spec.resized_from == 10
    with pytest.raises(ValueError):
        make_shuffle_view(torch.rand(3, 8, 8), 0, np.random.default_rng(0))


# ----- mask ----------------------------------------------------------------------

def test_mask_counts():
    rng = np.random.default_rng(0)
    assert not make_mask(10, 0.0, rng).token_mask.any()
    assert make_mask(10, 1.0, rng).token_mask.all()
    assert make_mask(196, 0.5, rng).token_mask.sum() == 98
    with pytest.raises(ValueError):
        make_mask(0, 0.5, rng)


def test_mask_positions_uniform():
    rng = np.random.default_rng(1)
    n, draws = 16, 100_000
    counts = np.zeros(n)
    for _ in range(draws):
        counts += make_mask(n, 0.25, rng).token_mask
    assert chisquare(counts).pvalue > 0.01


# ----- stream ----------------------------------------------------------------------

def test_stream_batches_are_pure_functions_of_step(tiny_manifest):
    views = ViewConfig(global_size=16, local_size=8, n_local=2, shuffle_grid=2, multiscale_size=32)
    data = DataConfig(samples_per_slide=2)
    a = ViewStream(tiny_manifest, data, views, 16, 2, seed=4)
    b = ViewStream(tiny_manifest, data, views, 16, 2, seed=4)
    x, y = a.batch(3), b.batch(3)
    a.batch(0)
    z = a.batch(3)
    for t1, t2, t3 in zip(x.globals + x.locals, y.globals + y.locals, z.globals + z.locals):
        assert torch.equal(t1, t2) and torch.equal(t1, t3)
    assert x.source_ids == y.source_ids
