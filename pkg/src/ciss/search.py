"""Supporter search: visually similar, non-overlapping patches for an anchor.

Candidates are every stride-aligned in-bounds position at five anchor-relative
scales. The production path scores whole scale-grids at once through the
summed-area tables; the bruteforce twin walks the same candidates one by one
computing each descriptor by direct per-pixel summation. Both share candidate
enumeration and greedy selection, so they are comparable box-for-box, and the
channel quantization (see features) makes their distances bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import iou
from .features import (
    Box,
    DistanceParams,
    IntegralStack,
    PatchDescriptor,
    chi_square,
    combine_distance_terms,
    describe_patch,
    describe_patch_direct,
    grid_box_sums,
    histograms_from_sums,
    patch_distance,
    pyramid_cells,
)

SCALE_BAND = (0.8, 1.2)  # supporters stay within 20% of the anchor size


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the supporter search; defaults are the operating point."""

    n_max: int = 5
    d_max: float = 0.25
    scales: tuple[float, ...] = (0.8, 0.9, 1.0, 1.1, 1.2)
    stride: int = 4
    max_overlap_iou: float = 0.0
    min_side: int = 15

    def __post_init__(self):
        scales = tuple(sorted(set(float(s) for s in self.scales)))
        if not scales:
            raise ValueError("at least one scale multiplier required")
        if scales[0] < SCALE_BAND[0] or scales[-1] > SCALE_BAND[1]:
            raise ValueError(f"scale multipliers must stay within {SCALE_BAND}")
        object.__setattr__(self, "scales", scales)
        if self.n_max < 0:
            raise ValueError("n_max must be >= 0")
        if self.d_max < 0:
            raise ValueError("d_max must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 <= self.max_overlap_iou <= 1.0:
            raise ValueError("max_overlap_iou must be in [0, 1]")
        if self.min_side < 1:
            raise ValueError("min_side must be >= 1")


@dataclass(frozen=True)
class Supporter:
    box: Box
    distance: float


def candidate_sizes(anchor: Box, cfg: SearchConfig) -> list[tuple[int, int, int]]:
    """(scale index, width, height) per scale; dims are round(s * side)."""
    return [
        (si, int(round(s * anchor.w)), int(round(s * anchor.h)))
        for si, s in enumerate(cfg.scales)
    ]


def _position_grid(limit: int, size: int, stride: int) -> np.ndarray:
    return np.arange(0, limit - size + 1, stride, dtype=np.intp)


def _check_anchor(width: int, height: int, anchor: Box, cfg: SearchConfig) -> None:
    if anchor.min_side() < cfg.min_side:
        raise ValueError(
            f"anchor {anchor} smaller than min_side {cfg.min_side}"
        )
    if anchor.x < 0 or anchor.y < 0 or anchor.x2 > width or anchor.y2 > height:
        raise ValueError(f"anchor {anchor} exceeds {width}x{height} image")


def _greedy_select(ordered, anchor: Box, cfg: SearchConfig) -> list[Supporter]:
    """Ascending-distance sweep keeping candidates that overlap nothing kept.

    `ordered` holds (distance, y, x, scale_index, Box) tuples already filtered
    to distance <= d_max and sorted by (distance, y, x, scale index).
    """
    selected: list[Supporter] = []
    for d, _, _, _, box in ordered:
        if len(selected) == cfg.n_max:
            break
        if iou(box, anchor) > cfg.max_overlap_iou:
            continue
        if any(iou(box, s.box) > cfg.max_overlap_iou for s in selected):
            continue
        selected.append(Supporter(box=box, distance=float(d)))
    return selected


def _anchor_terms(desc: PatchDescriptor):
    return desc.color, desc.texture, desc.cell_color, desc.cell_texture


def find_supporters(
    ist: IntegralStack, anchor: Box, params: DistanceParams, cfg: SearchConfig
) -> list[Supporter]:
    """Up to n_max nearest patches by appearance, none overlapping.

    Returned ascending by distance; ties resolve to smaller y, then x, then
    scale multiplier.
    """
    _check_anchor(ist.width, ist.height, anchor, cfg)
    if cfg.n_max == 0:
        return []
    anchor_desc = describe_patch(ist, anchor, params.use_pyramid)
    a_color, a_texture, a_cell_color, a_cell_texture = _anchor_terms(anchor_desc)

    cand_d: list[np.ndarray] = []
    cand_y: list[np.ndarray] = []
    cand_x: list[np.ndarray] = []
    cand_si: list[np.ndarray] = []
    cand_wh: list[tuple[int, int]] = []
    for si, cw, ch in candidate_sizes(anchor, cfg):
        if cw < 1 or ch < 1 or cw > ist.width or ch > ist.height:
            continue
        xs = _position_grid(ist.width, cw, cfg.stride)
        ys = _position_grid(ist.height, ch, cfg.stride)
        if xs.size == 0 or ys.size == 0:
            continue
        dists = _grid_distances(
            ist, xs, ys, cw, ch, params,
            a_color, a_texture, a_cell_color, a_cell_texture,
        )
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        cand_d.append(dists.ravel())
        cand_y.append(yy.ravel())
        cand_x.append(xx.ravel())
        cand_si.append(np.full(dists.size, si, dtype=np.intp))
        cand_wh.append((cw, ch))

    if not cand_d:
        return []
    sizes = {si: (cw, ch) for (si, cw, ch) in candidate_sizes(anchor, cfg)}
    d = np.concatenate(cand_d)
    y = np.concatenate(cand_y)
    x = np.concatenate(cand_x)
    si = np.concatenate(cand_si)
    keep = d <= cfg.d_max
    d, y, x, si = d[keep], y[keep], x[keep], si[keep]
    order = np.lexsort((si, x, y, d))
    ordered = [
        (
            float(d[i]),
            int(y[i]),
            int(x[i]),
            int(si[i]),
            Box(int(x[i]), int(y[i]), *sizes[int(si[i])]),
        )
        for i in order
    ]
    return _greedy_select(ordered, anchor, cfg)


def _grid_distances(
    ist: IntegralStack,
    xs: np.ndarray,
    ys: np.ndarray,
    cw: int,
    ch: int,
    params: DistanceParams,
    a_color: np.ndarray,
    a_texture: np.ndarray,
    a_cell_color,
    a_cell_texture,
) -> np.ndarray:
    """Distance of every grid candidate of one size to the anchor descriptor."""

    def grid_hists(x0: int, y0: int, w: int, h: int):
        color = grid_box_sums(ist.color_tables, xs + x0, ys + y0, w, h)
        texture = grid_box_sums(ist.texture_tables, xs + x0, ys + y0, w, h)
        return histograms_from_sums(color, texture, w * h)

    color_hist, texture_hist = grid_hists(0, 0, cw, ch)
    color_term = chi_square(color_hist, a_color)
    texture_term = chi_square(texture_hist, a_texture)
    cell_color_terms = cell_texture_terms = None
    if params.use_pyramid:
        cell_color_terms = []
        cell_texture_terms = []
        # Cell geometry relative to the candidate origin mirrors pyramid_cells.
        w0, h0 = cw // 2, ch // 2
        offsets = (
            (0, 0, w0, h0),
            (w0, 0, cw - w0, h0),
            (0, h0, w0, ch - h0),
            (w0, h0, cw - w0, ch - h0),
        )
        for j, (ox, oy, w, h) in enumerate(offsets):
            c_hist, t_hist = grid_hists(ox, oy, w, h)
            cell_color_terms.append(chi_square(c_hist, a_cell_color[j]))
            cell_texture_terms.append(chi_square(t_hist, a_cell_texture[j]))
    return combine_distance_terms(
        color_term, texture_term, cell_color_terms, cell_texture_terms, params
    )


def find_supporters_bruteforce(
    ist: IntegralStack, anchor: Box, params: DistanceParams, cfg: SearchConfig
) -> list[Supporter]:
    """Oracle twin of find_supporters.

    Identical contract and candidate walk, but every descriptor is computed by
    direct per-pixel summation over the source channel stack; the integral
    tables are never read.
    """
    _check_anchor(ist.width, ist.height, anchor, cfg)
    if cfg.n_max == 0:
        return []
    cs = ist.source
    anchor_desc = describe_patch_direct(cs, anchor, params.use_pyramid)

    candidates = []
    for si, cw, ch in candidate_sizes(anchor, cfg):
        if cw < 1 or ch < 1 or cw > cs.width or ch > cs.height:
            continue
        for y in _position_grid(cs.height, ch, cfg.stride):
            for x in _position_grid(cs.width, cw, cfg.stride):
                box = Box(int(x), int(y), cw, ch)
                d = patch_distance(
                    describe_patch_direct(cs, box, params.use_pyramid),
                    anchor_desc,
                    params,
                )
                if d <= cfg.d_max:
                    candidates.append((d, int(y), int(x), si, box))
    candidates.sort(key=lambda rec: rec[:4])
    return _greedy_select(candidates, anchor, cfg)
