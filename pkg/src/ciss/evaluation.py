"""Detection evaluation: greedy matching, precision/recall, AP, F, NMS.

Matching follows the usual protocol: detections sorted by descending score
each claim the highest-overlap unclaimed ground truth of their category
(match threshold 0.5 by default). Two filter modes exist:

* all-errors: every unmatched detection is a false positive;
* ignore-loc-sim: localization errors (best same-category overlap >= 0.1 that
  did not produce a match, duplicates included) and similar-object errors
  (overlap >= 0.1 with a ground truth whose category shares a similarity
  group) are dropped from the tally instead of counted against precision.

Matches to ground truth flagged difficult are always dropped and difficult
boxes never count toward recall.

Functions here take any detection-shaped objects (image_id, category, box,
score attributes); ground truth uses the GroundTruth type below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputDataError
from .features import Box

MATCH_IOU_THRESHOLD = 0.5
LOC_ERROR_MIN_IOU = 0.1

DEFAULT_SIMILARITY_GROUPS: tuple[frozenset[str], ...] = (
    frozenset({"bird", "cat", "cow", "dog", "horse", "sheep", "person"}),
    frozenset({"plane", "bike", "boat", "bus", "car", "motorbike", "train"}),
    frozenset({"chair", "table", "sofa"}),
)

TP = "tp"
FP = "fp"
IGNORED = "ignored"


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    category: str
    box: Box
    difficult: bool = False


@dataclass(frozen=True)
class DetRecord:
    """Minimal scored detection; the rescoring module's Detection also fits."""

    image_id: str
    category: str
    box: Box
    score: float


@dataclass(frozen=True)
class ErrorFilterConfig:
    mode: str = "all"  # "all" or "ignore-loc-sim"
    loc_iou_low: float = LOC_ERROR_MIN_IOU
    similarity_groups: tuple[frozenset[str], ...] = DEFAULT_SIMILARITY_GROUPS

    def __post_init__(self):
        if self.mode not in ("all", "ignore-loc-sim"):
            raise ValueError(f"unknown filter mode: {self.mode!r}")

    @property
    def ignore_loc_sim(self) -> bool:
        return self.mode == "ignore-loc-sim"

    def similar_categories(self, category: str) -> frozenset[str]:
        out: set[str] = set()
        for group in self.similarity_groups:
            if category in group:
                out |= group
        out.discard(category)
        return frozenset(out)


@dataclass(frozen=True)
class PrCurve:
    """One precision/recall point per detection, descending score."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    n_gt: int

    def as_lists(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "precision": [float(p) for p in self.precision],
            "recall": [float(r) for r in self.recall],
            "n_gt": self.n_gt,
        }


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when either is degenerate."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _detection_order(dets) -> list[int]:
    """Descending score, input index breaking ties."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(
    dets,
    gts: list[GroundTruth],
    iou_threshold: float = MATCH_IOU_THRESHOLD,
    filters: ErrorFilterConfig | None = None,
) -> list[str]:
    """Label every detection TP, FP, or IGNORED (aligned with input order)."""
    if filters is None:
        filters = ErrorFilterConfig()
    by_image_cat: dict[tuple[str, str], list[int]] = {}
    by_image: dict[str, list[int]] = {}
    for j, gt in enumerate(gts):
        by_image_cat.setdefault((gt.image_id, gt.category), []).append(j)
        by_image.setdefault(gt.image_id, []).append(j)
    claimed = [False] * len(gts)
    labels: list[str] = [FP] * len(dets)

    for i in _detection_order(dets):
        det = dets[i]
        same_cat = by_image_cat.get((det.image_id, det.category), [])
        best_iou = 0.0
        best_j = -1
        for j in same_cat:
            ov = iou(det.box, gts[j].box)
            if ov > best_iou:
                best_iou = ov
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold:
            if gts[best_j].difficult:
                labels[i] = IGNORED
            elif not claimed[best_j]:
                claimed[best_j] = True
                labels[i] = TP
            else:
                # Duplicate of an already-claimed object: a localization
                # error under the permissive mode, a plain FP otherwise.
                labels[i] = IGNORED if filters.ignore_loc_sim else FP
            continue
        if filters.ignore_loc_sim:
            if best_iou >= filters.loc_iou_low:
                labels[i] = IGNORED
                continue
            similar = filters.similar_categories(det.category)
            if similar:
                hit = False
                for j in by_image.get(det.image_id, []):
                    if gts[j].category in similar and (
                        iou(det.box, gts[j].box) >= filters.loc_iou_low
                    ):
                        hit = True
                        break
                if hit:
                    labels[i] = IGNORED
                    continue
        labels[i] = FP
    return labels


def _ap_all_point(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the precision envelope, summed over recall increments."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _ap_voc07(precision: np.ndarray, recall: np.ndarray) -> float:
    """Eleven-point interpolated mean precision."""
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / 11.0


def pr_ap_f(
    labels, scores, n_gt: int, ap_mode: str = "area"
) -> tuple[PrCurve, float | None, float]:
    """Precision/recall curve, average precision, and best F1.

    labels must contain only TP/FP (drop IGNORED first). AP is None when the
    category has no ground truth. Both AP modes and f_best are invariant to
    strictly monotone transforms of the scores.
    """
    if ap_mode not in ("area", "voc07"):
        raise ValueError(f"unknown ap_mode: {ap_mode!r}")
    labels = list(labels)
    if any(lab not in (TP, FP) for lab in labels):
        raise ValueError("labels must be tp/fp only; filter ignored first")
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(labels)), key=lambda i: (-scores[i], i))
    is_tp = np.array([labels[i] == TP for i in order], dtype=np.float64)
    tp_cum = np.cumsum(is_tp)
    fp_cum = np.cumsum(1.0 - is_tp)
    denom = tp_cum + fp_cum
    precision = np.divide(tp_cum, denom, out=np.zeros_like(tp_cum), where=denom > 0)
    if n_gt > 0:
        recall = tp_cum / n_gt
    else:
        recall = np.zeros_like(tp_cum)
    curve = PrCurve(
        thresholds=scores[order],
        precision=precision,
        recall=recall,
        n_gt=int(n_gt),
    )
    if n_gt <= 0:
        return curve, None, 0.0
    if precision.size == 0:
        return curve, 0.0, 0.0
    ap = _ap_all_point(precision, recall) if ap_mode == "area" else _ap_voc07(
        precision, recall
    )
    pr_sum = precision + recall
    f_vals = np.divide(
        2.0 * precision * recall, pr_sum, out=np.zeros_like(pr_sum), where=pr_sum > 0
    )
    return curve, ap, float(f_vals.max())


def greedy_nms(dets, iou_threshold: float = 0.5) -> list:
    """Standard greedy suppression within each (image, category) group.

    Keeps the highest-scored remaining detection, discards others overlapping
    it at IoU >= iou_threshold, repeats. Survivors come back in input order.
    """
    groups: dict[tuple[str, str], list[int]] = {}
    for i, det in enumerate(dets):
        groups.setdefault((det.image_id, det.category), []).append(i)
    keep: set[int] = set()
    for indices in groups.values():
        ordered = sorted(indices, key=lambda i: (-dets[i].score, i))
        chosen: list[int] = []
        for i in ordered:
            if any(iou(dets[i].box, dets[j].box) >= iou_threshold for j in chosen):
                continue
            chosen.append(i)
        keep.update(chosen)
    return [dets[i] for i in sorted(keep)]


def evaluate_detections(
    dets,
    gts: list[GroundTruth],
    iou_threshold: float = MATCH_IOU_THRESHOLD,
    filters: ErrorFilterConfig | None = None,
    ap_mode: str = "area",
) -> dict:
    """Full per-category evaluation; returns a JSON-ready report dict.

    Categories never seen in the ground truth get ap null and are excluded
    from the means (noted via "in_ground_truth": false).
    """
    labels = match_detections(dets, gts, iou_threshold, filters)
    gt_counts: dict[str, int] = {}
    for gt in gts:
        if not gt.difficult:
            gt_counts[gt.category] = gt_counts.get(gt.category, 0) + 1
    categories = sorted(
        {gt.category for gt in gts} | {det.category for det in dets}
    )
    per_category: dict[str, dict] = {}
    aps: list[float] = []
    fs: list[float] = []
    for cat in categories:
        idx = [i for i, det in enumerate(dets) if det.category == cat]
        kept = [i for i in idx if labels[i] != IGNORED]
        n_gt = gt_counts.get(cat, 0)
        in_gt = any(gt.category == cat for gt in gts)
        curve, ap, f_best = pr_ap_f(
            [labels[i] for i in kept],
            [dets[i].score for i in kept],
            n_gt,
            ap_mode,
        )
        per_category[cat] = {
            "ap": None if ap is None else float(ap),
            "f_best": float(f_best),
            "n_gt": n_gt,
            "n_detections": len(idx),
            "n_ignored": len(idx) - len(kept),
            "in_ground_truth": in_gt,
            "pr": curve.as_lists(),
        }
        if ap is not None:
            aps.append(float(ap))
            fs.append(float(f_best))
    return {
        "per_category": per_category,
        "mean_ap": float(np.mean(aps)) if aps else None,
        "mean_f": float(np.mean(fs)) if fs else None,
    }


# ---------------------------------------------------------------------------
# file formats


def _parse_box(raw) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise InputDataError(f"box must be [x, y, w, h], got {raw!r}")
    return Box(int(raw[0]), int(raw[1]), int(raw[2]), int(raw[3]))


def read_ground_truth(path) -> list[GroundTruth]:
    """Read JSON lines: {image_id, category, box: [x,y,w,h], difficult}."""
    out: list[GroundTruth] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    GroundTruth(
                        image_id=str(rec["image_id"]),
                        category=str(rec["category"]),
                        box=_parse_box(rec["box"]),
                        difficult=bool(rec.get("difficult", False)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise InputDataError(f"{path}:{lineno}: bad ground-truth record: {exc}")
    return out


def read_detections(path) -> list[DetRecord]:
    """Read JSON lines: {image_id, category, box: [x,y,w,h], score}."""
    out: list[DetRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    DetRecord(
                        image_id=str(rec["image_id"]),
                        category=str(rec["category"]),
                        box=_parse_box(rec["box"]),
                        score=float(rec["score"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise InputDataError(f"{path}:{lineno}: bad detection record: {exc}")
    return out


def write_ground_truth(path, gts: list[GroundTruth]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for gt in gts:
            fh.write(
                json.dumps(
                    {
                        "image_id": gt.image_id,
                        "category": gt.category,
                        "box": [gt.box.x, gt.box.y, gt.box.w, gt.box.h],
                        "difficult": gt.difficult,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def write_detections(path, dets) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in dets:
            fh.write(
                json.dumps(
                    {
                        "image_id": det.image_id,
                        "category": det.category,
                        "box": [det.box.x, det.box.y, det.box.w, det.box.h],
                        "score": float(det.score),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
