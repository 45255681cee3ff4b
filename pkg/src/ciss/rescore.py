"""Anchor rescoring: linear MMSE estimation from supporter scores.

A detection is an anchor when its base score exceeds 0.05 and both sides
exceed 15 px. For an anchor with supporters at appearance distances d_j the
estimator solves

    C m = R

where C couples scores through gamma_ss(d) (supporter self-terms get
gamma_ss(0) plus a small ridge on the diagonal) and R couples the anchor's
unknown identity to each score through gamma_ls(d). The rescored value is

    p = E[l] + m . (s_vec - E[s])

with per-category priors from the model. Boxes that are not anchors, anchors
with no supporters, and anchors whose system cannot be solved all receive the
supporter-free form of the same estimator (revise_base_score), which is
strictly increasing in the base score whenever gamma_ls(0) > 0, so base-score
order is preserved per category.

Raw estimates are kept unclamped: downstream ranking and the order
preservation guarantee need the raw values (features.clamp01 exists for
display). n_supporters and a fallback flag record what happened per box.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputDataError, MissingScoreRaster
from .evaluation import iou
from .features import (
    Box,
    Image,
    build_integral_stack,
    compute_channel_stack,
    describe_patch,
    patch_distance,
    quantize_channels,
    read_channel_map,
)
from .model import DependencyModel
from .search import SearchConfig, Supporter, find_supporters

ANCHOR_SCORE_THRESHOLD = 0.05
ANCHOR_MIN_SIDE = 15
LOOKUP_MIN_IOU = 0.3
RESIDUAL_RTOL = 1e-9

RESCORED_CSV_COLUMNS = (
    "image_id",
    "category",
    "x",
    "y",
    "w",
    "h",
    "base_score",
    "revised_base",
    "ciss_score",
    "n_supporters",
    "fallback_flag",
)


@dataclass(frozen=True)
class Detection:
    """A scored box, before or after rescoring."""

    image_id: str
    category: str
    box: Box
    score: float
    revised_base: float | None = None
    ciss_score: float | None = None
    n_supporters: int = 0
    fallback: bool = False
    is_anchor: bool = False


@dataclass(frozen=True)
class RescoreConfig:
    anchor_score_threshold: float = ANCHOR_SCORE_THRESHOLD
    anchor_min_side: int = ANCHOR_MIN_SIDE
    lookup_min_iou: float = LOOKUP_MIN_IOU


def anchor_eligible(det: Detection, cfg: RescoreConfig) -> bool:
    """Strictly above the score threshold and strictly wider/taller than
    the side threshold; everything else keeps its supporter-free estimate."""
    return (
        det.score > cfg.anchor_score_threshold
        and det.box.min_side() > cfg.anchor_min_side
    )


# ---------------------------------------------------------------------------
# supporter score providers


class DetectionLookupProvider:
    """Supporter scores from the image's own detections.

    The same-category detection with the highest IoU against the supporter
    box provides its base score, if that IoU reaches min_iou; otherwise the
    supporter scores 0. IoU ties resolve to the earliest detection.
    """

    def __init__(self, detections: list[Detection], min_iou: float = LOOKUP_MIN_IOU):
        self.min_iou = min_iou
        self._by_key: dict[tuple[str, str], list[Detection]] = {}
        for det in detections:
            self._by_key.setdefault((det.image_id, det.category), []).append(det)

    def score(self, image_id: str, category: str, box: Box) -> float:
        best_iou = 0.0
        best_score = 0.0
        for det in self._by_key.get((image_id, category), []):
            ov = iou(box, det.box)
            if ov > best_iou:
                best_iou = ov
                best_score = det.score
        return best_score if best_iou >= self.min_iou else 0.0


class DenseMapProvider:
    """Supporter scores from per-(image, category) score rasters.

    Rasters live as single-channel CISSCHAN files named
    "<image_id>.<category>.chan" under the root directory; a supporter's
    score is the raster mean over its box, computed through a summed-area
    table (quantized like every other channel, see features).
    """

    def __init__(self, root: str):
        self.root = root
        self._tables: dict[tuple[str, str], np.ndarray] = {}

    def _table(self, image_id: str, category: str) -> np.ndarray:
        key = (image_id, category)
        if key not in self._tables:
            path = os.path.join(self.root, f"{image_id}.{category}.chan")
            if not os.path.exists(path):
                raise MissingScoreRaster(f"no score raster at {path}")
            raster = quantize_channels(read_channel_map(path))
            if raster.shape[0] != 1:
                raise MissingScoreRaster(
                    f"{path}: score raster must have one channel, has {raster.shape[0]}"
                )
            h, w = raster.shape[1:]
            table = np.zeros((h + 1, w + 1))
            table[1:, 1:] = raster[0].cumsum(axis=0).cumsum(axis=1)
            self._tables[key] = table
        return self._tables[key]

    def score(self, image_id: str, category: str, box: Box) -> float:
        t = self._table(image_id, category)
        if box.area < 1:
            return 0.0
        total = t[box.y2, box.x2] - t[box.y, box.x2] - t[box.y2, box.x] + t[box.y, box.x]
        return float(total) / box.area


def supporter_score_lookup(provider, image_id: str, category: str, box: Box) -> float:
    """Score of one supporter box under either provider mode."""
    return provider.score(image_id, category, box)


# ---------------------------------------------------------------------------
# the estimator


@dataclass(frozen=True)
class MmseSystem:
    """C m = R with the anchor first; s and e_s align with the solution."""

    c: np.ndarray
    r: np.ndarray
    s: np.ndarray
    e_s: np.ndarray
    e_l: float

    @property
    def size(self) -> int:
        return int(self.r.shape[0])


def build_covariance_system(
    anchor_score: float,
    category: str,
    supporters: list[Supporter],
    supporter_scores: list[float],
    pairwise_distances: np.ndarray,
    model: DependencyModel,
) -> MmseSystem:
    """Assemble the (n+1)-dimensional system for one anchor.

    pairwise_distances is the symmetric (n, n) matrix of supporter-supporter
    appearance distances (diagonal unused).
    """
    n = len(supporters)
    if len(supporter_scores) != n:
        raise ValueError("one score per supporter required")
    gamma = model.gamma
    diag = gamma.a_ss + model.ridge
    c = np.empty((n + 1, n + 1))
    r = np.empty(n + 1)
    c[0, 0] = diag
    r[0] = gamma.a_ls
    if n:
        d_anchor = np.array([sup.distance for sup in supporters])
        cross = gamma.gamma_ss(d_anchor)
        c[0, 1:] = cross
        c[1:, 0] = cross
        pw = np.asarray(pairwise_distances, dtype=np.float64)
        if pw.shape != (n, n):
            raise ValueError(f"pairwise distances must be ({n}, {n}), got {pw.shape}")
        block = gamma.gamma_ss(pw)
        np.fill_diagonal(block, diag)
        c[1:, 1:] = block
        r[1:] = gamma.gamma_ls(d_anchor)
    prior = model.priors.get(category)
    s = np.empty(n + 1)
    s[0] = anchor_score
    s[1:] = supporter_scores
    return MmseSystem(
        c=c, r=r, s=s, e_s=np.full(n + 1, prior.e_s), e_l=prior.e_l
    )


def solve_mmse(system: MmseSystem) -> tuple[np.ndarray, bool]:
    """Solve C m = R directly; fall back to the supporter-free 1x1 system.

    The solution must reproduce R to within RESIDUAL_RTOL * (1 + |R|_inf) in
    the infinity norm; otherwise (or on a singular C) the returned
    coefficients zero out every supporter and the fallback flag is set.
    """
    c, r = system.c, system.r
    n1 = system.size
    if n1 == 1:
        return np.array([r[0] / c[0, 0]]), False
    m: np.ndarray | None = None
    try:
        candidate = np.linalg.solve(c, r)
        if np.all(np.isfinite(candidate)):
            residual = float(np.max(np.abs(c @ candidate - r)))
            if residual <= RESIDUAL_RTOL * (1.0 + float(np.max(np.abs(r)))):
                m = candidate
    except np.linalg.LinAlgError:
        m = None
    if m is not None:
        return m, False
    fallback = np.zeros(n1)
    fallback[0] = r[0] / c[0, 0]
    return fallback, True


def rescore_anchor(system: MmseSystem, m: np.ndarray) -> float:
    """p = E[l] + m . (s - E[s]); raw, unclamped."""
    return float(system.e_l + np.dot(m, system.s - system.e_s))


def revise_base_score(score: float, category: str, model: DependencyModel) -> float:
    """Supporter-free estimate applied to every box (the 1x1 system)."""
    system = build_covariance_system(score, category, [], [], np.zeros((0, 0)), model)
    m, _ = solve_mmse(system)
    return rescore_anchor(system, m)


def rescore_image(
    image: Image,
    image_id: str,
    detections: list[Detection],
    model: DependencyModel,
    provider,
    search_cfg: SearchConfig | None = None,
    rescore_cfg: RescoreConfig | None = None,
    texture_maps: np.ndarray | None = None,
) -> list[Detection]:
    """Rescore every detection of one image; input order is preserved.

    Anchors go through supporter search and the full estimator; everything
    else (and any anchor whose rescoring fails) carries the supporter-free
    estimate, failures with the fallback flag raised.
    """
    if search_cfg is None:
        search_cfg = SearchConfig()
    if rescore_cfg is None:
        rescore_cfg = RescoreConfig()
    ist = build_integral_stack(compute_channel_stack(image, texture_maps))
    out: list[Detection] = []
    for det in detections:
        s_prime = revise_base_score(det.score, det.category, model)
        if not anchor_eligible(det, rescore_cfg):
            out.append(
                replace(
                    det,
                    revised_base=s_prime,
                    ciss_score=s_prime,
                    n_supporters=0,
                    fallback=False,
                    is_anchor=False,
                )
            )
            continue
        try:
            supporters = find_supporters(ist, det.box, model.distance, search_cfg)
            scores = [
                supporter_score_lookup(provider, image_id, det.category, sup.box)
                for sup in supporters
            ]
            descs = [
                describe_patch(ist, sup.box, model.distance.use_pyramid)
                for sup in supporters
            ]
            n = len(supporters)
            pairwise = np.zeros((n, n))
            for j1 in range(n):
                for j2 in range(j1 + 1, n):
                    d = patch_distance(descs[j1], descs[j2], model.distance)
                    pairwise[j1, j2] = d
                    pairwise[j2, j1] = d
            system = build_covariance_system(
                det.score, det.category, supporters, scores, pairwise, model
            )
            m, used_fallback = solve_mmse(system)
            p = rescore_anchor(system, m)
            out.append(
                replace(
                    det,
                    revised_base=s_prime,
                    ciss_score=p,
                    n_supporters=n,
                    fallback=used_fallback,
                    is_anchor=True,
                )
            )
        except (ValueError, FloatingPointError):
            # A malformed anchor (e.g. box outside the raster) degrades to
            # the supporter-free estimate instead of poisoning the run.
            out.append(
                replace(
                    det,
                    revised_base=s_prime,
                    ciss_score=s_prime,
                    n_supporters=0,
                    fallback=True,
                    is_anchor=True,
                )
            )
    return out


# ---------------------------------------------------------------------------
# rescored CSV


def write_rescored_csv(path, detections: list[Detection]) -> None:
    """One row per detection; floats as their shortest round-trip repr."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESCORED_CSV_COLUMNS)
        for det in detections:
            writer.writerow(
                [
                    det.image_id,
                    det.category,
                    det.box.x,
                    det.box.y,
                    det.box.w,
                    det.box.h,
                    repr(float(det.score)),
                    repr(float(det.revised_base)),
                    repr(float(det.ciss_score)),
                    det.n_supporters,
                    int(det.fallback),
                ]
            )


def read_rescored_csv(path) -> list[Detection]:
    out: list[Detection] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RESCORED_CSV_COLUMNS:
            raise InputDataError(f"{path}: unexpected rescored CSV header: {header}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                out.append(
                    Detection(
                        image_id=row[0],
                        category=row[1],
                        box=Box(int(row[2]), int(row[3]), int(row[4]), int(row[5])),
                        score=float(row[6]),
                        revised_base=float(row[7]),
                        ciss_score=float(row[8]),
                        n_supporters=int(row[9]),
                        fallback=bool(int(row[10])),
                    )
                )
            except (IndexError, ValueError) as exc:
                raise InputDataError(f"{path}:{lineno}: bad rescored row: {exc}")
    return out
