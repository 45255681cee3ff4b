"""Channel stacks, integral tables, descriptors, and distances.

Expected values come from independent oracles: colorsys for HSV, direct
per-pixel summation for integral tables, and hand arithmetic for the distance
formulas. Integral-vs-direct comparisons assert exact equality; the channel
quantization makes both paths sum the same dyadic rationals.
"""

import colorsys

import numpy as np
import pytest

from ciss.errors import ChannelMapError, CorruptImageData, UnsupportedImageFormat
from ciss.features import (
    BUILTIN_TEXTURE_CHANNELS,
    CHI2_EPSILON,
    COLOR_CHANNELS,
    QUANT_SCALE,
    Box,
    DistanceParams,
    Image,
    PatchDescriptor,
    build_integral_stack,
    chi_square,
    clamp01,
    compute_channel_stack,
    describe_patch,
    describe_patch_direct,
    grid_box_sums,
    histograms_from_sums,
    load_image,
    patch_distance,
    pyramid_cells,
    quantize_channels,
    read_channel_map,
    rgb_to_hsv_unit,
    write_channel_map,
    write_png,
    write_ppm,
)
from util import constant_image, random_box, random_image


# ---------------------------------------------------------------------------
# quantization


def test_quantize_snaps_to_dyadic_grid():
    # round(2^20 / 3) = 349525, so 1/3 snaps to 349525 / 2^20
    got = quantize_channels(np.array([1.0 / 3.0]))
    assert got[0] == 349525.0 / QUANT_SCALE


def test_quantize_half_even_rounding():
    # numpy rounds half to even: 0.5 -> 0, 1.5 -> 2, 2.5 -> 2 grid steps
    vals = np.array([0.5, 1.5, 2.5]) / QUANT_SCALE
    got = quantize_channels(vals) * QUANT_SCALE
    assert got.tolist() == [0.0, 2.0, 2.0]


def test_quantize_idempotent():
    rng = np.random.default_rng(0)
    x = rng.random(1000)
    once = quantize_channels(x)
    assert np.array_equal(quantize_channels(once), once)


# ---------------------------------------------------------------------------
# color channels


def test_hsv_matches_colorsys():
    rng = np.random.default_rng(1)
    colors = rng.integers(0, 256, size=(500, 3))
    specials = [
        (0, 0, 0),
        (255, 255, 255),
        (128, 128, 128),
        (255, 0, 0),
        (0, 255, 0),
        (0, 0, 255),
        (200, 200, 100),  # max tie between r and g
        (100, 200, 200),  # max tie between g and b
    ]
    for rgb in list(colors) + [np.array(s) for s in specials]:
        unit = np.asarray(rgb, dtype=np.float64) / 255.0
        expected = colorsys.rgb_to_hsv(*unit)
        got = rgb_to_hsv_unit(unit)
        assert got.tolist() == pytest.approx(list(expected), abs=0.0), rgb


def test_white_pixel_channels():
    # white: h=0 -> channel 0, s=0 -> channel 10, v=1 -> bin 9 -> channel 29
    cs = compute_channel_stack(constant_image(1, 1, (255, 255, 255)))
    active = np.flatnonzero(cs.color[:, 0, 0])
    assert active.tolist() == [0, 10, 29]


def test_red_pixel_channels():
    # saturated red: h=0, s=1 -> bin 9, v=1 -> bin 9
    cs = compute_channel_stack(constant_image(1, 1, (255, 0, 0)))
    active = np.flatnonzero(cs.color[:, 0, 0])
    assert active.tolist() == [0, 19, 29]


def test_every_pixel_one_hot_per_component():
    rng = np.random.default_rng(2)
    cs = compute_channel_stack(random_image(rng, 17, 11))
    for group in range(3):
        block = cs.color[group * 10 : (group + 1) * 10]
        assert np.array_equal(block.sum(axis=0), np.ones((11, 17)))


# ---------------------------------------------------------------------------
# texture channels


def test_constant_image_texture_channels():
    img = constant_image(9, 7, (128, 128, 128))
    cs = compute_channel_stack(img)
    assert cs.texture.shape == (BUILTIN_TEXTURE_CHANNELS, 7, 9)
    # derivative and LoG responses on a constant are zero after quantization
    assert not cs.texture[:6].any()
    # plain Gaussian channels reproduce the constant luma
    luma = quantize_channels(np.array(128 / 255.0))
    assert np.array_equal(cs.texture[6], np.full((7, 9), luma))
    assert np.array_equal(cs.texture[7], np.full((7, 9), luma))


def test_texture_channels_nonnegative_and_quantized():
    rng = np.random.default_rng(3)
    cs = compute_channel_stack(random_image(rng, 21, 18))
    assert (cs.texture >= 0.0).all()
    assert np.array_equal(quantize_channels(cs.texture), cs.texture)


def test_external_texture_maps_replace_builtin():
    rng = np.random.default_rng(4)
    img = random_image(rng, 8, 6)
    maps = rng.random((23, 6, 8))
    cs = compute_channel_stack(img, texture_maps=maps)
    assert cs.texture.shape == (23, 6, 8)
    assert np.array_equal(cs.texture, quantize_channels(np.maximum(maps, 0.0)))


def test_external_texture_maps_shape_mismatch():
    rng = np.random.default_rng(5)
    img = random_image(rng, 8, 6)
    with pytest.raises(ChannelMapError):
        compute_channel_stack(img, texture_maps=rng.random((23, 8, 6)))
    with pytest.raises(ChannelMapError):
        compute_channel_stack(img, texture_maps=rng.random((6, 8)))


# ---------------------------------------------------------------------------
# integral tables


def test_box_sum_counts_pixels():
    cs = compute_channel_stack(constant_image(10, 10, (255, 255, 255)))
    ist = build_integral_stack(cs)
    box = Box(2, 3, 5, 4)
    assert ist.box_sum(0, box) == box.area  # hue bin 0 holds every pixel
    assert ist.box_sum(1, box) == 0.0


def test_box_sums_match_direct_slices_exactly():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        w = int(rng.integers(4, 64))
        h = int(rng.integers(4, 64))
        cs = compute_channel_stack(random_image(rng, w, h))
        ist = build_integral_stack(cs)
        for _ in range(10):
            box = random_box(rng, w, h, min_side=1)
            color_sums, texture_sums = ist.box_sums(box)
            direct_c = cs.color[:, box.y : box.y2, box.x : box.x2].sum(axis=(1, 2))
            direct_t = cs.texture[:, box.y : box.y2, box.x : box.x2].sum(axis=(1, 2))
            assert np.array_equal(color_sums, direct_c)
            assert np.array_equal(texture_sums, direct_t)


def test_grid_box_sums_match_single_box_sums():
    rng = np.random.default_rng(6)
    cs = compute_channel_stack(random_image(rng, 40, 32))
    ist = build_integral_stack(cs)
    xs = np.arange(0, 40 - 9 + 1, 4)
    ys = np.arange(0, 32 - 7 + 1, 4)
    grid = grid_box_sums(ist.color_tables, xs, ys, 9, 7)
    assert grid.shape == (len(ys), len(xs), COLOR_CHANNELS)
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            single, _ = ist.box_sums(Box(int(x), int(y), 9, 7))
            assert np.array_equal(grid[iy, ix], single)


def test_box_bounds_checked():
    cs = compute_channel_stack(constant_image(8, 8, (0, 0, 0)))
    ist = build_integral_stack(cs)
    with pytest.raises(ValueError):
        ist.box_sum(0, Box(5, 5, 4, 4))
    with pytest.raises(ValueError):
        ist.box_sum(0, Box(-1, 0, 4, 4))


# ---------------------------------------------------------------------------
# descriptors


def test_describe_patch_matches_direct_oracle_exactly():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        w = int(rng.integers(8, 56))
        h = int(rng.integers(8, 56))
        cs = compute_channel_stack(random_image(rng, w, h))
        ist = build_integral_stack(cs)
        for _ in range(5):
            box = random_box(rng, w, h, min_side=2)
            for use_pyramid in (False, True):
                fast = describe_patch(ist, box, use_pyramid)
                direct = describe_patch_direct(cs, box, use_pyramid)
                assert np.array_equal(fast.color, direct.color)
                assert np.array_equal(fast.texture, direct.texture)
                assert fast.has_pyramid == direct.has_pyramid == use_pyramid
                if use_pyramid:
                    for a, b in zip(fast.cell_color, direct.cell_color):
                        assert np.array_equal(a, b)
                    for a, b in zip(fast.cell_texture, direct.cell_texture):
                        assert np.array_equal(a, b)


def test_descriptor_histograms_normalized():
    rng = np.random.default_rng(7)
    cs = compute_channel_stack(random_image(rng, 30, 30))
    ist = build_integral_stack(cs)
    desc = describe_patch(ist, Box(3, 4, 20, 21), use_pyramid=True)
    assert desc.color.sum() == pytest.approx(1.0, abs=1e-12)
    assert desc.texture.sum() == pytest.approx(1.0, abs=1e-12)
    for cell in desc.cell_color + desc.cell_texture:
        assert cell.sum() == pytest.approx(1.0, abs=1e-12)
        assert (cell >= 0.0).all()


def test_constant_patch_histograms_by_hand():
    # gray 128: color mass splits 1/3 over channels 0, 10, 25 (v=128/255->bin 5);
    # texture means are [0]*6 + [luma, luma], normalizing to 0.5 / 0.5.
    cs = compute_channel_stack(constant_image(12, 12, (128, 128, 128)))
    ist = build_integral_stack(cs)
    desc = describe_patch(ist, Box(0, 0, 12, 12), use_pyramid=False)
    expected_color = np.zeros(COLOR_CHANNELS)
    v_bin = int(np.floor((128 / 255.0) * 10))
    assert v_bin == 5
    expected_color[[0, 10, 20 + v_bin]] = 1.0 / 3.0
    assert desc.color == pytest.approx(expected_color, abs=1e-15)
    expected_texture = np.zeros(BUILTIN_TEXTURE_CHANNELS)
    expected_texture[6] = expected_texture[7] = 0.5
    assert desc.texture == pytest.approx(expected_texture, abs=1e-15)


def test_black_patch_texture_uniform_convention():
    cs = compute_channel_stack(constant_image(6, 6, (0, 0, 0)))
    ist = build_integral_stack(cs)
    desc = describe_patch(ist, Box(0, 0, 6, 6), use_pyramid=False)
    assert np.array_equal(
        desc.texture, np.full(BUILTIN_TEXTURE_CHANNELS, 1.0 / BUILTIN_TEXTURE_CHANNELS)
    )


def test_histograms_from_sums_zero_conventions():
    color, texture = histograms_from_sums(np.zeros(30), np.zeros(8), 10.0)
    assert np.array_equal(color, np.full(30, 1.0 / 30.0))
    assert np.array_equal(texture, np.full(8, 1.0 / 8.0))


def test_describe_patch_rejects_bad_boxes():
    cs = compute_channel_stack(constant_image(8, 8, (1, 2, 3)))
    ist = build_integral_stack(cs)
    with pytest.raises(ValueError):
        describe_patch(ist, Box(0, 0, 0, 5), use_pyramid=False)
    with pytest.raises(ValueError):
        describe_patch(ist, Box(4, 4, 8, 8), use_pyramid=False)
    with pytest.raises(ValueError):
        describe_patch_direct(cs, Box(4, 4, 8, 8), use_pyramid=False)


def test_pyramid_cells_partition():
    box = Box(3, 5, 7, 9)
    tl, tr, bl, br = pyramid_cells(box)
    assert (tl, tr) == (Box(3, 5, 3, 4), Box(6, 5, 4, 4))
    assert (bl, br) == (Box(3, 9, 3, 5), Box(6, 9, 4, 5))
    assert tl.area + tr.area + bl.area + br.area == box.area
    # random boxes: cells tile the box without overlap
    rng = np.random.default_rng(8)
    for _ in range(50):
        b = random_box(rng, 100, 100, min_side=2)
        cells = pyramid_cells(b)
        covered = np.zeros((100, 100), dtype=int)
        for c in cells:
            covered[c.y : c.y2, c.x : c.x2] += 1
        assert (covered[b.y : b.y2, b.x : b.x2] == 1).all()
        assert covered.sum() == b.area


# ---------------------------------------------------------------------------
# distances


def test_chi_square_hand_values():
    assert chi_square(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    # disjoint support: 0.5 * (1/(1+eps) + 1/(1+eps)) = 1/(1+eps)
    expected = 1.0 / (1.0 + CHI2_EPSILON)
    assert chi_square(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == expected
    # half-overlap case, by hand
    p = np.array([0.5, 0.5])
    q = np.array([1.0, 0.0])
    expected = 0.5 * (0.25 / (1.5 + CHI2_EPSILON) + 0.25 / (0.5 + CHI2_EPSILON))
    assert chi_square(p, q) == pytest.approx(expected, rel=1e-15)


def test_chi_square_range_and_symmetry():
    rng = np.random.default_rng(9)
    for _ in range(100):
        p = rng.random(30)
        q = rng.random(30)
        p /= p.sum()
        q /= q.sum()
        d = chi_square(p, q)
        assert 0.0 <= d <= 1.0
        assert chi_square(q, p) == d


def test_chi_square_batched_matches_scalar():
    rng = np.random.default_rng(10)
    batch = rng.random((7, 5, 16))
    ref = rng.random(16)
    out = chi_square(batch, ref)
    assert out.shape == (7, 5)
    for i in range(7):
        for j in range(5):
            assert out[i, j] == chi_square(batch[i, j], ref)


def test_patch_distance_formula_by_hand():
    rng = np.random.default_rng(11)

    def norm(n):
        v = rng.random(n)
        return v / v.sum()

    a = PatchDescriptor(
        color=norm(30),
        texture=norm(8),
        cell_color=tuple(norm(30) for _ in range(4)),
        cell_texture=tuple(norm(8) for _ in range(4)),
    )
    b = PatchDescriptor(
        color=norm(30),
        texture=norm(8),
        cell_color=tuple(norm(30) for _ in range(4)),
        cell_texture=tuple(norm(8) for _ in range(4)),
    )
    params = DistanceParams(alpha=0.3, beta=0.7)
    whole = 0.3 * chi_square(a.color, b.color) + 0.7 * chi_square(a.texture, b.texture)
    cells = sum(
        0.3 * chi_square(ac, bc) + 0.7 * chi_square(at, bt)
        for ac, bc, at, bt in zip(a.cell_color, b.cell_color, a.cell_texture, b.cell_texture)
    )
    expected = 0.5 * whole + 0.5 * (cells / 4.0)
    assert patch_distance(a, b, params) == pytest.approx(expected, rel=1e-15)
    assert patch_distance(a, a, params) == 0.0
    assert patch_distance(b, a, params) == patch_distance(a, b, params)


def test_alpha_beta_isolate_color_and_texture():
    # same pixels, shuffled spatially: identical color histogram, different
    # texture, so alpha-only distance is 0 and beta-only is positive.
    rng = np.random.default_rng(12)
    img_a = random_image(rng, 16, 16)
    flat = img_a.pixels.reshape(-1, 3).copy()
    rng.shuffle(flat, axis=0)
    img_b = Image(width=16, height=16, pixels=flat.reshape(16, 16, 3))
    box = Box(0, 0, 16, 16)
    descs = []
    for img in (img_a, img_b):
        ist = build_integral_stack(compute_channel_stack(img))
        descs.append(describe_patch(ist, box, use_pyramid=False))
    color_only = DistanceParams(alpha=1.0, beta=0.0, use_pyramid=False)
    texture_only = DistanceParams(alpha=0.0, beta=1.0, use_pyramid=False)
    assert patch_distance(descs[0], descs[1], color_only) == 0.0
    assert patch_distance(descs[0], descs[1], texture_only) > 0.0


def test_patch_distance_layout_mismatch():
    rng = np.random.default_rng(13)
    img = random_image(rng, 20, 20)
    ist = build_integral_stack(compute_channel_stack(img))
    ist23 = build_integral_stack(
        compute_channel_stack(img, texture_maps=rng.random((23, 20, 20)))
    )
    box = Box(0, 0, 10, 10)
    with_pyr = describe_patch(ist, box, use_pyramid=True)
    without = describe_patch(ist, box, use_pyramid=False)
    other_bank = describe_patch(ist23, box, use_pyramid=True)
    params = DistanceParams()
    with pytest.raises(ValueError):
        patch_distance(with_pyr, without, params)
    with pytest.raises(ValueError):
        patch_distance(with_pyr, other_bank, params)


def test_distance_params_validation():
    with pytest.raises(ValueError):
        DistanceParams(alpha=-0.1)
    with pytest.raises(ValueError):
        DistanceParams(pyramid_weight_cells=-1.0)


def test_clamp01():
    assert clamp01(-0.5) == 0.0
    assert clamp01(0.25) == 0.25
    assert clamp01(1.5) == 1.0


# ---------------------------------------------------------------------------
# image and channel-map IO


def test_ppm_round_trip_and_determinism(tmp_path):
    rng = np.random.default_rng(14)
    img = random_image(rng, 13, 9)
    p1 = tmp_path / "a.ppm"
    p2 = tmp_path / "b.ppm"
    write_ppm(img, p1)
    write_ppm(img, p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_image(p1)
    assert back.width == 13 and back.height == 9
    assert np.array_equal(back.pixels, img.pixels)


def test_ppm_with_comments(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6 # six\n# a comment line\n2 1\n255\n" + bytes(6))
    img = load_image(path)
    assert (img.width, img.height) == (2, 1)
    assert not img.pixels.any()


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    img = random_image(rng, 11, 17)
    path = tmp_path / "img.png"
    write_png(img, path)
    back = load_image(path)
    assert np.array_equal(back.pixels, img.pixels)


def test_load_image_error_cases(tmp_path):
    missing = tmp_path / "nope.ppm"
    with pytest.raises(FileNotFoundError):
        load_image(missing)

    bad_magic = tmp_path / "bad.ppm"
    bad_magic.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(UnsupportedImageFormat):
        load_image(bad_magic)

    wide = tmp_path / "wide.ppm"
    wide.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(UnsupportedImageFormat):
        load_image(wide)

    short = tmp_path / "short.ppm"
    short.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(CorruptImageData):
        load_image(short)


def test_channel_map_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    data = quantize_channels(rng.random((5, 4, 6)))
    path = tmp_path / "maps.chan"
    write_channel_map(path, data)
    back = read_channel_map(path)
    # quantized values fit float32 exactly, so the trip is lossless
    assert np.array_equal(back, data)


def test_channel_map_errors(tmp_path):
    path = tmp_path / "bad.chan"
    path.write_bytes(b"NOTCHAN!")
    with pytest.raises(ChannelMapError):
        read_channel_map(path)
    truncated = tmp_path / "short.chan"
    write_channel_map(truncated, np.ones((2, 3, 3)))
    raw = truncated.read_bytes()
    truncated.write_bytes(raw[:-4])
    with pytest.raises(ChannelMapError):
        read_channel_map(truncated)
