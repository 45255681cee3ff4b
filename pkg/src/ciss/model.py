"""Score-dependency model: binned covariances, exponential fits, priors.

Training data is a set of patch pairs sampled within images, each carrying an
appearance distance, the two base scores, binary identities, and a same-label
flag. Pairs are bucketed by distance; per bucket the score/score covariance

    cov_ss(d) = E[s1 s2] - E[s1] E[s2]

and the identity/score covariance

    cov_ls(d) = E[l s] - E[l] E[s]      (each pair used in both orientations)

are estimated, then both curves are fitted with a * exp(-b * d) by weighted
least squares over a fixed logarithmic grid of decay rates. The model file
also carries per-category priors (label fraction, mean base score) and the
distance parameters the pairs were computed with.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientBins, ModelFormatError, NoValidBins
from .features import DistanceParams

MODEL_VERSION = 1
DEFAULT_BIN_WIDTH = 0.05
MIN_PAIRS_PER_BIN = 50
DECAY_GRID_MIN = 0.1
DECAY_GRID_MAX = 50.0
DECAY_GRID_POINTS = 200
DEFAULT_RIDGE_FACTOR = 1e-6
DEFAULT_FALLBACK_PRIOR = (0.5, 0.5)  # (e_l, e_s) when a model file omits them


def default_bin_edges() -> np.ndarray:
    """Edges of width 0.05 covering distances in [0, 1]."""
    n = int(round(1.0 / DEFAULT_BIN_WIDTH))
    return np.arange(n + 1) * DEFAULT_BIN_WIDTH


def decay_grid() -> np.ndarray:
    return np.logspace(
        math.log10(DECAY_GRID_MIN), math.log10(DECAY_GRID_MAX), DECAY_GRID_POINTS
    )


@dataclass(frozen=True)
class PairSample:
    """One within-image patch pair from the training sampler."""

    distance: float
    s1: float
    s2: float
    l1: float
    l2: float
    same_label: bool


@dataclass(frozen=True)
class BinnedCov:
    """Per-distance-bin pair counts and covariance estimates.

    cov arrays hold nan for empty bins; valid marks bins whose pair count
    reaches min_count.
    """

    edges: np.ndarray
    counts: np.ndarray
    cov_ss: np.ndarray
    cov_ls: np.ndarray
    min_count: int

    @property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def valid(self) -> np.ndarray:
        return self.counts >= self.min_count


def _bin_index(distances: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Right-open bins, the last bin right-closed; overflow clamps into it."""
    idx = np.searchsorted(edges, distances, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def bin_covariances(
    pairs: list[PairSample],
    edges: np.ndarray | None = None,
    min_count: int = MIN_PAIRS_PER_BIN,
) -> BinnedCov:
    """Bucket pairs by distance and estimate both covariances per bucket.

    Invariant to the order of the pair list. Raises NoValidBins when no
    bucket reaches min_count (in particular for an empty pair list).
    """
    if edges is None:
        edges = default_bin_edges()
    edges = np.asarray(edges, dtype=np.float64)
    n_bins = len(edges) - 1
    counts = np.zeros(n_bins, dtype=np.int64)
    cov_ss = np.full(n_bins, np.nan)
    cov_ls = np.full(n_bins, np.nan)
    if pairs:
        d = np.array([p.distance for p in pairs])
        s1 = np.array([p.s1 for p in pairs])
        s2 = np.array([p.s2 for p in pairs])
        l1 = np.array([p.l1 for p in pairs])
        l2 = np.array([p.l2 for p in pairs])
        idx = _bin_index(d, edges)
        for b in range(n_bins):
            mask = idx == b
            counts[b] = int(mask.sum())
            if counts[b] == 0:
                continue
            cov_ss[b] = float(
                (s1[mask] * s2[mask]).mean() - s1[mask].mean() * s2[mask].mean()
            )
            # Both orientations of every pair contribute to the label/score
            # estimate, so the bucket is symmetric in the pair ordering.
            ls_l = np.concatenate([l1[mask], l2[mask]])
            ls_s = np.concatenate([s2[mask], s1[mask]])
            cov_ls[b] = float((ls_l * ls_s).mean() - ls_l.mean() * ls_s.mean())
    bc = BinnedCov(
        edges=edges,
        counts=counts,
        cov_ss=cov_ss,
        cov_ls=cov_ls,
        min_count=int(min_count),
    )
    if not bc.valid.any():
        raise NoValidBins("no valid bins")
    return bc


# ---------------------------------------------------------------------------
# exponential fit


def weighted_residual(
    mids: np.ndarray, values: np.ndarray, counts: np.ndarray, a: float, b: float
) -> float:
    """Count-weighted squared error of a*exp(-b*d) against binned values."""
    pred = a * np.exp(-b * np.asarray(mids, dtype=np.float64))
    w = np.asarray(counts, dtype=np.float64)
    diff = np.asarray(values, dtype=np.float64) - pred
    return float((w * diff * diff).sum())


def fit_exponential_curve(
    mids: np.ndarray, values: np.ndarray, counts: np.ndarray
) -> tuple[float, float, float, bool]:
    """Fit a * exp(-b * d) to one binned curve.

    The decay rate b runs over a fixed 200-point logarithmic grid in
    [0.1, 50]; the amplitude a has a closed weighted-least-squares form per b,
    clamped to a >= 0. Returns (a, b, residual, degenerate); degenerate means
    the best amplitude collapsed to zero (all-nonpositive input values).
    """
    mids = np.asarray(mids, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    w = np.asarray(counts, dtype=np.float64)
    if mids.size < 2:
        raise InsufficientBins(
            f"need at least 2 valid bins to fit two parameters, got {mids.size}"
        )
    best: tuple[float, float, float] | None = None
    for b in decay_grid():
        e = np.exp(-b * mids)
        denom = float((w * e * e).sum())
        a = max(0.0, float((w * values * e).sum()) / denom)
        resid = float((w * (values - a * e) ** 2).sum())
        if best is None or resid < best[0]:
            best = (resid, a, float(b))
    resid, a, b = best
    return a, b, resid, a == 0.0


@dataclass(frozen=True)
class GammaParams:
    """Fitted covariance-vs-distance curves for both covariances."""

    a_ss: float
    b_ss: float
    a_ls: float
    b_ls: float

    def gamma_ss(self, d):
        return self.a_ss * np.exp(-self.b_ss * np.asarray(d, dtype=np.float64))

    def gamma_ls(self, d):
        return self.a_ls * np.exp(-self.b_ls * np.asarray(d, dtype=np.float64))


def fit_exponential(bc: BinnedCov) -> GammaParams:
    """Fit both covariance curves over the valid bins.

    Raises InsufficientBins with fewer than two valid bins; warns when a
    curve degenerates to zero amplitude.
    """
    mask = bc.valid
    mids = bc.mids[mask]
    counts = bc.counts[mask]
    a_ss, b_ss, _, degen_ss = fit_exponential_curve(mids, bc.cov_ss[mask], counts)
    a_ls, b_ls, _, degen_ls = fit_exponential_curve(mids, bc.cov_ls[mask], counts)
    if degen_ss:
        warnings.warn(
            "score/score covariance fit degenerated to zero amplitude; "
            "the model cannot drive rescoring",
            stacklevel=2,
        )
    if degen_ls:
        warnings.warn(
            "label/score covariance fit degenerated to zero amplitude; "
            "rescoring will return the prior for every box",
            stacklevel=2,
        )
    return GammaParams(a_ss=a_ss, b_ss=b_ss, a_ls=a_ls, b_ls=b_ls)


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class CategoryPrior:
    e_l: float  # probability that a patch carries the category label
    e_s: float  # mean base score of the category

    def __post_init__(self):
        if not 0.0 <= self.e_l <= 1.0:
            raise ValueError(f"e_l must be in [0, 1], got {self.e_l}")


@dataclass(frozen=True)
class CategoryPriors:
    entries: dict[str, CategoryPrior] = field(default_factory=dict)
    fallback: CategoryPrior = CategoryPrior(*DEFAULT_FALLBACK_PRIOR)

    def get(self, category: str) -> CategoryPrior:
        return self.entries.get(category, self.fallback)


@dataclass(frozen=True)
class PriorPatch:
    """A training patch: its true category labels and per-category scores."""

    categories: tuple[str, ...]
    scores: dict[str, float]


def estimate_priors(patches: list[PriorPatch]) -> CategoryPriors:
    """Label fractions and mean base scores per category.

    E_l(c) is the fraction of patches whose label set contains c; E_s(c) the
    mean of the c-scores over patches that have one. The fallback entry is
    the unweighted mean over categories and covers categories missing from
    the training set.
    """
    if not patches:
        raise ValueError("estimate_priors requires at least one patch")
    categories = sorted(
        {c for p in patches for c in p.categories}
        | {c for p in patches for c in p.scores}
    )
    n = len(patches)
    entries: dict[str, CategoryPrior] = {}
    e_ls: list[float] = []
    e_ss: list[float] = []
    pending_scoreless: list[tuple[str, float]] = []
    for cat in categories:
        e_l = sum(1 for p in patches if cat in p.categories) / n
        scored = [p.scores[cat] for p in patches if cat in p.scores]
        if scored:
            e_s = float(np.mean(scored))
            entries[cat] = CategoryPrior(e_l=e_l, e_s=e_s)
            e_ss.append(e_s)
        else:
            pending_scoreless.append((cat, e_l))
        e_ls.append(e_l)
    fallback = CategoryPrior(
        e_l=float(np.mean(e_ls)) if e_ls else DEFAULT_FALLBACK_PRIOR[0],
        e_s=float(np.mean(e_ss)) if e_ss else DEFAULT_FALLBACK_PRIOR[1],
    )
    for cat, e_l in pending_scoreless:
        entries[cat] = CategoryPrior(e_l=e_l, e_s=fallback.e_s)
    return CategoryPriors(entries=entries, fallback=fallback)


# ---------------------------------------------------------------------------
# distance statistics


@dataclass(frozen=True)
class DistanceStats:
    """Normalized distance histograms of same-label and not-same pairs."""

    edges: np.ndarray
    same_hist: np.ndarray
    not_same_hist: np.ndarray
    same_count: int
    not_same_count: int


def pair_distance_stats(
    pairs: list[PairSample], edges: np.ndarray | None = None
) -> DistanceStats:
    """Split pair distances by the same-label flag into two L1 histograms.

    An empty side yields the uniform histogram so downstream comparisons stay
    defined.
    """
    if edges is None:
        edges = default_bin_edges()
    edges = np.asarray(edges, dtype=np.float64)
    n_bins = len(edges) - 1

    def hist(distances: list[float]) -> np.ndarray:
        if not distances:
            return np.full(n_bins, 1.0 / n_bins)
        counts = np.bincount(
            _bin_index(np.asarray(distances), edges), minlength=n_bins
        ).astype(np.float64)
        return counts / counts.sum()

    same = [p.distance for p in pairs if p.same_label]
    not_same = [p.distance for p in pairs if not p.same_label]
    return DistanceStats(
        edges=edges,
        same_hist=hist(same),
        not_same_hist=hist(not_same),
        same_count=len(same),
        not_same_count=len(not_same),
    )


def mass_below(hist: np.ndarray, edges: np.ndarray, threshold: float) -> float:
    """Histogram mass below a distance threshold (linear within a cut bin)."""
    total = 0.0
    for i in range(len(hist)):
        lo, hi = edges[i], edges[i + 1]
        if hi <= threshold:
            total += float(hist[i])
        elif lo < threshold:
            total += float(hist[i]) * (threshold - lo) / (hi - lo)
    return total


# ---------------------------------------------------------------------------
# model file


@dataclass(frozen=True)
class DependencyModel:
    """Everything rescoring needs, as written to / read from the model file."""

    gamma: GammaParams
    priors: CategoryPriors
    distance: DistanceParams
    ridge: float
    version: int = MODEL_VERSION


def build_model(
    gamma: GammaParams,
    priors: CategoryPriors,
    distance: DistanceParams,
    ridge: float | None = None,
) -> DependencyModel:
    """Assemble a model, defaulting the ridge to 1e-6 * gamma_ss(0)."""
    if ridge is None:
        ridge = DEFAULT_RIDGE_FACTOR * gamma.a_ss
    return DependencyModel(gamma=gamma, priors=priors, distance=distance, ridge=ridge)


def model_to_dict(model: DependencyModel) -> dict:
    return {
        "version": model.version,
        "gamma_ss": {"a": model.gamma.a_ss, "b": model.gamma.b_ss},
        "gamma_ls": {"a": model.gamma.a_ls, "b": model.gamma.b_ls},
        "priors": {
            cat: {"e_l": p.e_l, "e_s": p.e_s}
            for cat, p in sorted(model.priors.entries.items())
        },
        "fallback": {
            "e_l": model.priors.fallback.e_l,
            "e_s": model.priors.fallback.e_s,
        },
        "distance": {
            "alpha": model.distance.alpha,
            "beta": model.distance.beta,
            "pyramid": {
                "enabled": model.distance.use_pyramid,
                "weight_whole": model.distance.pyramid_weight_whole,
                "weight_cells": model.distance.pyramid_weight_cells,
            },
        },
        "ridge": model.ridge,
    }


def save_model(model: DependencyModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ModelFormatError(f"invariant violation: {message}")


def model_from_dict(raw: dict) -> DependencyModel:
    try:
        version = int(raw.get("version", MODEL_VERSION))
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        g_ss = raw["gamma_ss"]
        g_ls = raw["gamma_ls"]
        gamma = GammaParams(
            a_ss=float(g_ss["a"]),
            b_ss=float(g_ss["b"]),
            a_ls=float(g_ls["a"]),
            b_ls=float(g_ls["b"]),
        )
        entries = {
            str(cat): CategoryPrior(e_l=float(p["e_l"]), e_s=float(p["e_s"]))
            for cat, p in raw.get("priors", {}).items()
        }
        fb = raw.get(
            "fallback",
            {"e_l": DEFAULT_FALLBACK_PRIOR[0], "e_s": DEFAULT_FALLBACK_PRIOR[1]},
        )
        priors = CategoryPriors(
            entries=entries,
            fallback=CategoryPrior(e_l=float(fb["e_l"]), e_s=float(fb["e_s"])),
        )
        dist_raw = raw.get("distance", {})
        pyr = dist_raw.get("pyramid", {})
        distance = DistanceParams(
            alpha=float(dist_raw.get("alpha", 0.5)),
            beta=float(dist_raw.get("beta", 0.5)),
            use_pyramid=bool(pyr.get("enabled", True)),
            pyramid_weight_whole=float(pyr.get("weight_whole", 0.5)),
            pyramid_weight_cells=float(pyr.get("weight_cells", 0.5)),
        )
        ridge = float(raw.get("ridge", DEFAULT_RIDGE_FACTOR * gamma.a_ss))
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from exc
    _require(gamma.a_ss > 0, f"gamma_ss(0) must be positive, got {gamma.a_ss}")
    _require(gamma.a_ls >= 0, f"gamma_ls amplitude must be >= 0, got {gamma.a_ls}")
    _require(gamma.b_ss >= 0, f"gamma_ss decay must be >= 0, got {gamma.b_ss}")
    _require(gamma.b_ls >= 0, f"gamma_ls decay must be >= 0, got {gamma.b_ls}")
    _require(ridge >= 0, f"ridge must be >= 0, got {ridge}")
    return DependencyModel(
        gamma=gamma, priors=priors, distance=distance, ridge=ridge, version=version
    )


def load_model(path) -> DependencyModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ModelFormatError(f"{path}: model file must hold a JSON object")
    return model_from_dict(raw)


# ---------------------------------------------------------------------------
# training-pair and prior-patch files


def read_pairs(path) -> list[PairSample]:
    """Read JSON lines: {distance, s1, s2, l1, l2, same}."""
    out: list[PairSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    PairSample(
                        distance=float(rec["distance"]),
                        s1=float(rec["s1"]),
                        s2=float(rec["s2"]),
                        l1=float(rec["l1"]),
                        l2=float(rec["l2"]),
                        same_label=bool(rec["same"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"{path}:{lineno}: bad pair record: {exc}")
    return out


def write_pairs(path, pairs: list[PairSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(
                json.dumps(
                    {
                        "distance": p.distance,
                        "s1": p.s1,
                        "s2": p.s2,
                        "l1": p.l1,
                        "l2": p.l2,
                        "same": p.same_label,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_prior_patches(path) -> list[PriorPatch]:
    """Read JSON lines: {categories: [...], scores: {category: score}}."""
    out: list[PriorPatch] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    PriorPatch(
                        categories=tuple(str(c) for c in rec["categories"]),
                        scores={
                            str(c): float(s) for c, s in rec["scores"].items()
                        },
                    )
                )
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise ModelFormatError(f"{path}:{lineno}: bad patch record: {exc}")
    return out


def write_prior_patches(path, patches: list[PriorPatch]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in patches:
            fh.write(
                json.dumps(
                    {"categories": list(p.categories), "scores": p.scores},
                    sort_keys=True,
                )
                + "\n"
            )
