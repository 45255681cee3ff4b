"""Supporter search: enumeration, selection invariants, oracle equivalence."""

import numpy as np
import pytest

from ciss.evaluation import iou
from ciss.features import (
    Box,
    DistanceParams,
    build_integral_stack,
    compute_channel_stack,
)
from ciss.search import (
    SearchConfig,
    candidate_sizes,
    find_supporters,
    find_supporters_bruteforce,
)
from util import constant_image, random_image


def stack_for(img):
    return build_integral_stack(compute_channel_stack(img))


def test_candidate_sizes_by_hand():
    # 20x20 anchor at the default scales: round(s * 20) = 16, 18, 20, 22, 24
    out = candidate_sizes(Box(0, 0, 20, 20), SearchConfig())
    assert out == [(0, 16, 16), (1, 18, 18), (2, 20, 20), (3, 22, 22), (4, 24, 24)]
    # aspect ratio is preserved per side
    out = candidate_sizes(Box(0, 0, 20, 30), SearchConfig(scales=(0.9,)))
    assert out == [(0, 18, 27)]


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(scales=())
    with pytest.raises(ValueError):
        SearchConfig(scales=(0.5, 1.0))
    with pytest.raises(ValueError):
        SearchConfig(scales=(1.0, 1.3))
    with pytest.raises(ValueError):
        SearchConfig(stride=0)
    with pytest.raises(ValueError):
        SearchConfig(n_max=-1)
    with pytest.raises(ValueError):
        SearchConfig(d_max=-0.1)
    with pytest.raises(ValueError):
        SearchConfig(max_overlap_iou=1.5)
    # scales normalize to a sorted unique tuple
    assert SearchConfig(scales=(1.2, 0.8, 1.2)).scales == (0.8, 1.2)


def test_fast_path_matches_bruteforce_exactly():
    params = DistanceParams()
    cfg = SearchConfig(min_side=8, d_max=0.6)
    for seed in range(8):
        rng = np.random.default_rng(300 + seed)
        w = int(rng.integers(32, 64))
        h = int(rng.integers(32, 64))
        ist = stack_for(random_image(rng, w, h))
        side = int(rng.integers(8, 16))
        anchor = Box(
            int(rng.integers(0, w - side + 1)),
            int(rng.integers(0, h - side + 1)),
            side,
            side,
        )
        fast = find_supporters(ist, anchor, params, cfg)
        slow = find_supporters_bruteforce(ist, anchor, params, cfg)
        assert len(fast) == len(slow)
        for a, b in zip(fast, slow):
            assert a.box == b.box
            assert a.distance == b.distance  # bitwise, not approximately


def test_supporter_invariants():
    params = DistanceParams()
    cfg = SearchConfig(min_side=8, d_max=0.5)
    for seed in range(10):
        rng = np.random.default_rng(400 + seed)
        ist = stack_for(random_image(rng, 48, 40))
        anchor = Box(int(rng.integers(0, 33)), int(rng.integers(0, 25)), 12, 12)
        sups = find_supporters(ist, anchor, params, cfg)
        assert len(sups) <= cfg.n_max
        distances = [s.distance for s in sups]
        assert distances == sorted(distances)
        for i, sup in enumerate(sups):
            assert sup.distance <= cfg.d_max
            assert 0 <= sup.box.x and sup.box.x2 <= 48
            assert 0 <= sup.box.y and sup.box.y2 <= 40
            assert iou(sup.box, anchor) == 0.0
            for other in sups[i + 1 :]:
                assert iou(sup.box, other.box) == 0.0


def test_flat_image_tie_breaking():
    # every candidate is at distance 0, so selection follows (y, x, scale)
    ist = stack_for(constant_image(64, 64, (90, 140, 200)))
    anchor = Box(40, 40, 16, 16)
    cfg = SearchConfig(min_side=8)
    sups = find_supporters(ist, anchor, DistanceParams(), cfg)
    assert len(sups) == cfg.n_max
    assert all(s.distance == 0.0 for s in sups)
    # the first pick is the earliest non-overlapping candidate: origin corner
    assert (sups[0].box.x, sups[0].box.y) == (0, 0)
    keys = [(s.box.y, s.box.x) for s in sups]
    assert keys == sorted(keys)
    slow = find_supporters_bruteforce(ist, anchor, DistanceParams(), cfg)
    assert [s.box for s in slow] == [s.box for s in sups]


def test_anchor_validation():
    ist = stack_for(constant_image(40, 40, (10, 10, 10)))
    cfg = SearchConfig()
    with pytest.raises(ValueError):
        find_supporters(ist, Box(0, 0, 14, 20), DistanceParams(), cfg)  # thin side
    with pytest.raises(ValueError):
        find_supporters(ist, Box(30, 30, 16, 16), DistanceParams(), cfg)  # out of bounds


def test_n_max_zero_short_circuits():
    ist = stack_for(constant_image(40, 40, (10, 10, 10)))
    cfg = SearchConfig(n_max=0)
    assert find_supporters(ist, Box(0, 0, 16, 16), DistanceParams(), cfg) == []
    assert find_supporters_bruteforce(ist, Box(0, 0, 16, 16), DistanceParams(), cfg) == []


def test_tiny_d_max_filters_noise():
    rng = np.random.default_rng(17)
    ist = stack_for(random_image(rng, 48, 48))
    cfg = SearchConfig(min_side=8, d_max=1e-12)
    sups = find_supporters(ist, Box(2, 2, 12, 12), DistanceParams(), cfg)
    assert sups == []


def test_max_overlap_allows_touching_boxes():
    # with a permissive overlap cap, more supporters fit around the anchor
    ist = stack_for(constant_image(48, 48, (50, 100, 150)))
    anchor = Box(16, 16, 16, 16)
    strict = find_supporters(
        ist, anchor, DistanceParams(), SearchConfig(min_side=8, n_max=30)
    )
    loose = find_supporters(
        ist,
        anchor,
        DistanceParams(),
        SearchConfig(min_side=8, n_max=30, max_overlap_iou=0.5),
    )
    assert len(loose) >= len(strict)
    for i, sup in enumerate(loose):
        assert iou(sup.box, anchor) <= 0.5
        for other in loose[i + 1 :]:
            assert iou(sup.box, other.box) <= 0.5


def test_anchor_box_itself_is_excluded():
    # the anchor position scores distance 0 but overlaps the anchor fully
    ist = stack_for(constant_image(64, 64, (20, 20, 220)))
    anchor = Box(16, 16, 16, 16)  # stride-aligned so its own box is a candidate
    sups = find_supporters(ist, anchor, DistanceParams(), SearchConfig(min_side=8))
    assert all(s.box != anchor for s in sups)
