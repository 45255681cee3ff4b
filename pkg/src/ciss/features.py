"""Patch appearance descriptors and the integral-image machinery behind them.

A patch is described by two L1-normalized histograms:

* color: 10 bins per HSV channel, computed as 30 binary indicator channels so
  any box histogram is a box sum;
* texture: the per-channel mean response of a filter bank (a builtin 8-filter
  bank, or externally supplied channel maps), again reduced to box sums.

All channels live in one ChannelStack. Descriptors for arbitrary boxes come
from an IntegralStack (summed-area tables) in O(channels) per box, or from
direct per-pixel summation (describe_patch_direct) which exists as an oracle
for the integral path.

Every channel is quantized to the fixed grid 2^-20 when the stack is built.
Box sums are then integer multiples of 2^-20 well below 2^53, so summed-area
lookups and direct summation agree bit for bit, regardless of summation order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ChannelMapError, CorruptImageData, UnsupportedImageFormat

COLOR_BINS_PER_CHANNEL = 10
COLOR_CHANNELS = 3 * COLOR_BINS_PER_CHANNEL
BUILTIN_TEXTURE_CHANNELS = 8
CHI2_EPSILON = 1e-10
QUANT_SCALE = float(1 << 20)  # channel values snap to multiples of 2^-20

CHANNEL_MAP_MAGIC = b"CISSCHAN"

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box: columns x .. x+w-1, rows y .. y+h-1."""

    x: int
    y: int
    w: int
    h: int

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def min_side(self) -> int:
        return min(self.w, self.h)


@dataclass(frozen=True)
class Image:
    """8-bit RGB raster; pixels is (height, width, 3) uint8."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError("pixel buffer does not match declared dimensions")
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")


@dataclass(frozen=True)
class DistanceParams:
    """Weights of the combined patch distance.

    distance = alpha * chi2(color) + beta * chi2(texture), optionally blended
    with a one-level 2x2 pyramid: whole-patch term weighted by
    pyramid_weight_whole plus the mean of the four cell terms weighted by
    pyramid_weight_cells.
    """

    alpha: float = 0.5
    beta: float = 0.5
    use_pyramid: bool = True
    pyramid_weight_whole: float = 0.5
    pyramid_weight_cells: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("distance weights must be non-negative")
        if self.pyramid_weight_whole < 0 or self.pyramid_weight_cells < 0:
            raise ValueError("pyramid weights must be non-negative")


# ---------------------------------------------------------------------------
# image IO


def load_image(path) -> Image:
    """Load a PNG or binary PPM (P6) file.

    Raises FileNotFoundError, UnsupportedImageFormat, or CorruptImageData;
    the three failure modes stay distinct for callers.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(_PNG_SIGNATURE):
        return _decode_png(data)
    if data.startswith(b"P6"):
        return _decode_ppm(data)
    raise UnsupportedImageFormat(f"{path}: not a PNG or binary PPM file")


def _decode_png(data: bytes) -> Image:
    from PIL import Image as PILImage

    try:
        with PILImage.open(io.BytesIO(data)) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise CorruptImageData(f"broken PNG stream: {exc}") from exc
    h, w = rgb.shape[:2]
    return Image(width=w, height=h, pixels=rgb)


def _decode_ppm(data: bytes) -> Image:
    pos = 2  # past magic
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise CorruptImageData("PPM header ended early")
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif c.isdigit():
            end = pos
            while end < len(data) and data[end : end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise CorruptImageData("malformed PPM header")
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedImageFormat(f"only 8-bit PPM supported, maxval={maxval}")
    if width <= 0 or height <= 0:
        raise CorruptImageData("non-positive PPM dimensions")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise CorruptImageData(f"PPM payload truncated: {len(raw)}/{need} bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return Image(width=width, height=height, pixels=pixels.copy())


def write_ppm(image: Image, path) -> None:
    """Write binary PPM; output bytes are a pure function of the pixels."""
    header = b"P6\n%d %d\n255\n" % (image.width, image.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.pixels.tobytes())


def write_png(image: Image, path) -> None:
    from PIL import Image as PILImage

    PILImage.fromarray(image.pixels, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# channel-map files (texture channels, dense score rasters)


def write_channel_map(path, data: np.ndarray) -> None:
    """Write a (channels, height, width) float32 stack in CISSCHAN layout."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError("channel map must be (channels, height, width)")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(CHANNEL_MAP_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(arr.tobytes())


def read_channel_map(path) -> np.ndarray:
    """Read a CISSCHAN file back as (channels, height, width) float32."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHANNEL_MAP_MAGIC)] != CHANNEL_MAP_MAGIC:
        raise ChannelMapError(f"{path}: bad channel-map magic")
    header_end = len(CHANNEL_MAP_MAGIC) + 12
    if len(blob) < header_end:
        raise ChannelMapError(f"{path}: truncated channel-map header")
    w, h, c = struct.unpack("<III", blob[len(CHANNEL_MAP_MAGIC) : header_end])
    need = w * h * c * 4
    payload = blob[header_end:]
    if len(payload) != need:
        raise ChannelMapError(
            f"{path}: payload size {len(payload)} does not match header ({need})"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    return flat.reshape(c, h, w).copy()


# ---------------------------------------------------------------------------
# channel stack


@dataclass(frozen=True)
class ChannelStack:
    """Per-pixel descriptor channels for one image.

    color: (30, H, W) binary indicators, texture: (T, H, W) non-negative
    responses, both float64 on the 2^-20 grid.
    """

    width: int
    height: int
    color: np.ndarray
    texture: np.ndarray

    @property
    def texture_channels(self) -> int:
        return int(self.texture.shape[0])


def quantize_channels(data: np.ndarray) -> np.ndarray:
    """Snap channel values to the 2^-20 grid (see module docstring)."""
    return np.round(np.asarray(data, dtype=np.float64) * QUANT_SCALE) / QUANT_SCALE


def rgb_to_hsv_unit(rgb01: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV, all components in [0, 1] (hue in [0, 1)).

    Matches colorsys.rgb_to_hsv pixel-for-pixel, including its tie rules
    (red checked before green when channels share the maximum).
    """
    r, g, b = rgb01[..., 0], rgb01[..., 1], rgb01[..., 2]
    maxc = np.max(rgb01, axis=-1)
    minc = np.min(rgb01, axis=-1)
    spread = maxc - minc
    v = maxc
    s = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(spread > 0, spread, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = (h / 6.0) % 1.0
    h = np.where(spread > 0, h, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_bin_indices(hsv: np.ndarray) -> np.ndarray:
    """floor(value * 10) per channel; a component equal to 1.0 takes bin 9."""
    idx = np.floor(hsv * COLOR_BINS_PER_CHANNEL).astype(np.int64)
    return np.minimum(idx, COLOR_BINS_PER_CHANNEL - 1)


def _builtin_filter_bank(luma: np.ndarray) -> np.ndarray:
    """Eight rectified responses on unit-range grayscale.

    Four first derivatives of a sigma=2 Gaussian at 0/45/90/135 degrees,
    Laplacian of Gaussian at sigma 1 and 2, Gaussians at sigma 1 and 2.
    Boundary handling is scipy's default reflect mode.
    """
    gx = ndimage.gaussian_filter(luma, sigma=2.0, order=(0, 1))
    gy = ndimage.gaussian_filter(luma, sigma=2.0, order=(1, 0))
    inv_sqrt2 = np.sqrt(0.5)
    responses = [
        gx,
        (gx + gy) * inv_sqrt2,
        gy,
        (gy - gx) * inv_sqrt2,
        ndimage.gaussian_laplace(luma, sigma=1.0),
        ndimage.gaussian_laplace(luma, sigma=2.0),
        ndimage.gaussian_filter(luma, sigma=1.0),
        ndimage.gaussian_filter(luma, sigma=2.0),
    ]
    return np.stack([np.maximum(resp, 0.0) for resp in responses])


def compute_channel_stack(
    image: Image, texture_maps: np.ndarray | None = None
) -> ChannelStack:
    """Build the 30 color indicator channels plus texture channels.

    texture_maps, when given, replaces the builtin filter bank with external
    per-pixel channels shaped (T, height, width); they are quantized like the
    builtin responses. Dimension mismatches raise ChannelMapError.
    """
    rgb01 = image.pixels.astype(np.float64) / 255.0
    bins = _hsv_bin_indices(rgb_to_hsv_unit(rgb01))
    color = np.zeros((COLOR_CHANNELS, image.height, image.width))
    for channel in range(3):
        for b in range(COLOR_BINS_PER_CHANNEL):
            color[channel * COLOR_BINS_PER_CHANNEL + b] = bins[..., channel] == b

    if texture_maps is None:
        luma = rgb01 @ _LUMA_WEIGHTS
        texture = quantize_channels(_builtin_filter_bank(luma))
    else:
        maps = np.asarray(texture_maps, dtype=np.float64)
        if maps.ndim != 3 or maps.shape[1:] != (image.height, image.width):
            raise ChannelMapError(
                f"texture maps shaped {maps.shape} do not cover a "
                f"{image.height}x{image.width} image"
            )
        texture = quantize_channels(np.maximum(maps, 0.0))
    return ChannelStack(
        width=image.width, height=image.height, color=color, texture=texture
    )


# ---------------------------------------------------------------------------
# integral stack


@dataclass(frozen=True)
class IntegralStack:
    """Summed-area tables over a ChannelStack.

    Tables are (channels, H+1, W+1) float64 with a zero top row and left
    column; the sum over box (x, y, w, h) of channel k is

        t[k, y+h, x+w] - t[k, y, x+w] - t[k, y+h, x] + t[k, y, x]

    The source stack is retained so oracle paths can bypass the tables.
    """

    width: int
    height: int
    color_tables: np.ndarray
    texture_tables: np.ndarray
    source: ChannelStack = field(repr=False)

    @property
    def texture_channels(self) -> int:
        return int(self.texture_tables.shape[0])

    def _check_box(self, box: Box) -> None:
        if box.w < 0 or box.h < 0:
            raise ValueError(f"negative box dimensions: {box}")
        if box.x < 0 or box.y < 0 or box.x2 > self.width or box.y2 > self.height:
            raise ValueError(f"box {box} exceeds {self.width}x{self.height} image")

    def box_sum(self, channel: int, box: Box) -> float:
        """Sum of one channel over a box; channels index color then texture."""
        self._check_box(box)
        if channel < COLOR_CHANNELS:
            t = self.color_tables[channel]
        else:
            t = self.texture_tables[channel - COLOR_CHANNELS]
        return float(
            t[box.y2, box.x2] - t[box.y, box.x2] - t[box.y2, box.x] + t[box.y, box.x]
        )

    def box_sums(self, box: Box) -> tuple[np.ndarray, np.ndarray]:
        """(color sums (30,), texture sums (T,)) over one box."""
        self._check_box(box)
        return (
            _table_box_sum(self.color_tables, box),
            _table_box_sum(self.texture_tables, box),
        )


def _table_box_sum(tables: np.ndarray, box: Box) -> np.ndarray:
    return (
        tables[:, box.y2, box.x2]
        - tables[:, box.y, box.x2]
        - tables[:, box.y2, box.x]
        + tables[:, box.y, box.x]
    )


def grid_box_sums(
    tables: np.ndarray, xs: np.ndarray, ys: np.ndarray, w: int, h: int
) -> np.ndarray:
    """Box sums for a full grid of positions at one box size.

    Returns (len(ys), len(xs), channels) for boxes anchored at every (x, y)
    pair. Exact (see module docstring), so shared by search fast paths.
    """
    x1 = np.asarray(xs, dtype=np.intp)
    y1 = np.asarray(ys, dtype=np.intp)
    x2 = x1 + w
    y2 = y1 + h
    ix1 = x1[None, :]
    ix2 = x2[None, :]
    iy1 = y1[:, None]
    iy2 = y2[:, None]
    sums = (
        tables[:, iy2, ix2] - tables[:, iy1, ix2] - tables[:, iy2, ix1] + tables[:, iy1, ix1]
    )
    return np.moveaxis(sums, 0, -1)


def build_integral_stack(cs: ChannelStack) -> IntegralStack:
    def tables_for(stack: np.ndarray) -> np.ndarray:
        k = stack.shape[0]
        t = np.zeros((k, cs.height + 1, cs.width + 1))
        t[:, 1:, 1:] = stack.cumsum(axis=1).cumsum(axis=2)
        return t

    return IntegralStack(
        width=cs.width,
        height=cs.height,
        color_tables=tables_for(cs.color),
        texture_tables=tables_for(cs.texture),
        source=cs,
    )


# ---------------------------------------------------------------------------
# descriptors


@dataclass(frozen=True)
class PatchDescriptor:
    """Whole-patch histograms plus optional 2x2 pyramid cell histograms."""

    color: np.ndarray
    texture: np.ndarray
    cell_color: tuple[np.ndarray, ...] | None = None
    cell_texture: tuple[np.ndarray, ...] | None = None

    @property
    def has_pyramid(self) -> bool:
        return self.cell_color is not None


def histograms_from_sums(
    color_sums: np.ndarray, texture_sums: np.ndarray, area: float
) -> tuple[np.ndarray, np.ndarray]:
    """Normalize raw box sums into the two descriptor histograms.

    Color: L1-normalized bin counts. Texture: per-channel mean response,
    L1-normalized. An all-zero part (or an empty box) becomes the uniform
    histogram. The exact operation order here is the contract both the
    integral path and the direct path compile down to.
    """
    color_sums = np.asarray(color_sums, dtype=np.float64)
    texture_sums = np.asarray(texture_sums, dtype=np.float64)
    color_total = color_sums.sum(axis=-1, keepdims=True)
    color_hist = np.where(
        color_total > 0,
        color_sums / np.where(color_total > 0, color_total, 1.0),
        1.0 / color_sums.shape[-1],
    )
    if area > 0:
        texture_means = texture_sums / area
    else:
        texture_means = np.zeros_like(texture_sums)
    tex_total = texture_means.sum(axis=-1, keepdims=True)
    texture_hist = np.where(
        tex_total > 0,
        texture_means / np.where(tex_total > 0, tex_total, 1.0),
        1.0 / texture_sums.shape[-1],
    )
    return color_hist, texture_hist


def pyramid_cells(box: Box) -> tuple[Box, Box, Box, Box]:
    """2x2 split, integer halves, remainder to the trailing cells (TL TR BL BR)."""
    w0 = box.w // 2
    h0 = box.h // 2
    return (
        Box(box.x, box.y, w0, h0),
        Box(box.x + w0, box.y, box.w - w0, h0),
        Box(box.x, box.y + h0, w0, box.h - h0),
        Box(box.x + w0, box.y + h0, box.w - w0, box.h - h0),
    )


def describe_patch(ist: IntegralStack, box: Box, use_pyramid: bool) -> PatchDescriptor:
    """Descriptor of one box via summed-area lookups (O(channels))."""
    if box.area < 1:
        raise ValueError(f"patch box must have positive area: {box}")
    color_hist, texture_hist = histograms_from_sums(*ist.box_sums(box), box.area)
    if not use_pyramid:
        return PatchDescriptor(color=color_hist, texture=texture_hist)
    cc, ct = [], []
    for cell in pyramid_cells(box):
        c, t = histograms_from_sums(*ist.box_sums(cell), cell.area)
        cc.append(c)
        ct.append(t)
    return PatchDescriptor(
        color=color_hist,
        texture=texture_hist,
        cell_color=tuple(cc),
        cell_texture=tuple(ct),
    )


def describe_patch_direct(
    cs: ChannelStack, box: Box, use_pyramid: bool
) -> PatchDescriptor:
    """Oracle twin of describe_patch: direct per-pixel summation, no tables."""
    if box.area < 1:
        raise ValueError(f"patch box must have positive area: {box}")
    if box.x < 0 or box.y < 0 or box.x2 > cs.width or box.y2 > cs.height:
        raise ValueError(f"box {box} exceeds {cs.width}x{cs.height} image")

    def sums(b: Box) -> tuple[np.ndarray, np.ndarray]:
        csl = cs.color[:, b.y : b.y2, b.x : b.x2]
        tsl = cs.texture[:, b.y : b.y2, b.x : b.x2]
        return csl.sum(axis=(1, 2)), tsl.sum(axis=(1, 2))

    color_hist, texture_hist = histograms_from_sums(*sums(box), box.area)
    if not use_pyramid:
        return PatchDescriptor(color=color_hist, texture=texture_hist)
    cc, ct = [], []
    for cell in pyramid_cells(box):
        c, t = histograms_from_sums(*sums(cell), cell.area)
        cc.append(c)
        ct.append(t)
    return PatchDescriptor(
        color=color_hist,
        texture=texture_hist,
        cell_color=tuple(cc),
        cell_texture=tuple(ct),
    )


# ---------------------------------------------------------------------------
# distances


def chi_square(p: np.ndarray, q: np.ndarray) -> np.ndarray | float:
    """0.5 * sum (p-q)^2 / (p+q+eps) along the last axis.

    In [0, 1] for L1-normalized non-negative inputs; 0 for identical
    histograms, 1 for disjoint support.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = p - q
    out = 0.5 * (d * d / (p + q + CHI2_EPSILON)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def combine_distance_terms(
    color_term,
    texture_term,
    cell_color_terms,
    cell_texture_terms,
    params: DistanceParams,
):
    """Weighted combination shared by scalar and batched distance paths.

    Inputs are chi-square values (scalars or equal-shaped arrays); cell term
    sequences are length 4 or None when the pyramid is off. Keeping one
    operation order here keeps every caller bit-compatible.
    """
    whole = params.alpha * color_term + params.beta * texture_term
    if cell_color_terms is None:
        return whole
    cell_sum = None
    for cc, ct in zip(cell_color_terms, cell_texture_terms):
        term = params.alpha * cc + params.beta * ct
        cell_sum = term if cell_sum is None else cell_sum + term
    return (
        params.pyramid_weight_whole * whole
        + params.pyramid_weight_cells * (cell_sum / 4.0)
    )


def patch_distance(
    a: PatchDescriptor, b: PatchDescriptor, params: DistanceParams
) -> float:
    """Combined appearance distance between two descriptors."""
    if a.texture.shape != b.texture.shape:
        raise ValueError("descriptors built with different texture layouts")
    if a.has_pyramid != b.has_pyramid:
        raise ValueError("descriptors built with different pyramid settings")
    cell_c = cell_t = None
    if a.has_pyramid:
        cell_c = [chi_square(ac, bc) for ac, bc in zip(a.cell_color, b.cell_color)]
        cell_t = [
            chi_square(at, bt) for at, bt in zip(a.cell_texture, b.cell_texture)
        ]
    return float(
        combine_distance_terms(
            chi_square(a.color, b.color),
            chi_square(a.texture, b.texture),
            cell_c,
            cell_t,
            params,
        )
    )


def clamp01(value: float) -> float:
    """Clamp a score into [0, 1] for human-facing reporting."""
    return min(1.0, max(0.0, value))
