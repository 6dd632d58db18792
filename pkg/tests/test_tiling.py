import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from banet.tensor import InvalidArgument
from banet.tiling import extract, make_tile_plan, stitch


def test_exact_grid():
    plan = make_tile_plan(1024, 1024, 512, 512)
    assert plan.origins == ((0, 0), (0, 512), (512, 0), (512, 512))


def test_last_tile_clamped_to_edge():
    plan = make_tile_plan(700, 700, 512, 512)
    assert plan.origins == ((0, 0), (0, 188), (188, 0), (188, 188))


def test_small_scene_single_padded_tile():
    plan = make_tile_plan(100, 300, 512)
    assert plan.origins == ((0, 0),) and plan.pad == (412, 212)
    tile = extract(np.arange(100 * 300.0).reshape(1, 100, 300), plan, 0)
    assert tile.shape == (1, 512, 512)


def test_invalid_plans():
    with pytest.raises(InvalidArgument):
        make_tile_plan(64, 64, 32, 48)
    with pytest.raises(InvalidArgument):
        make_tile_plan(0, 64, 32)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 90), st.integers(1, 90), st.sampled_from([8, 16, 32]), st.data())
def test_plan_covers_every_pixel_and_stitch_is_identity(h, w, tile, data):
    stride = data.draw(st.integers(1, tile))
    plan = make_tile_plan(h, w, tile, stride)
    hits = np.zeros((h, w), int)
    for r, c in plan.origins:
        assert 0 <= r and 0 <= c and (r + tile <= h or r == 0) and (c + tile <= w or c == 0)
        hits[r:r + tile, c:c + tile] += 1
    assert (hits > 0).all()
    scene = np.random.default_rng(h * w).normal(size=(3, h, w)).astype(np.float32)
    tiles = [extract(scene, plan, i) for i in range(len(plan))]
    np.testing.assert_allclose(stitch(tiles, plan), scene, rtol=1e-6, atol=1e-6)


def test_overlap_is_averaged():
    plan = make_tile_plan(2, 3, 2, 1)
    a = np.full((1, 2, 2), 1.0)
    b = np.full((1, 2, 2), 3.0)
    out = stitch([a, b], plan)
    np.testing.assert_array_equal(out[0, 0], [1.0, 2.0, 3.0])


def test_stitch_rejects_wrong_tiles():
    plan = make_tile_plan(4, 4, 2)
    with pytest.raises(InvalidArgument):
        stitch([np.zeros((1, 2, 2))], plan)
