"""Synthetic benchmark: textured scenes with repeated objects plus a noisy
simulated base detector.

Each scene draws one category; its instances share a per-scene appearance
(striped, saturated color) rendered on a gray noise background, so same-image
instances look alike while the same category varies across images. A declared
fraction of instances gets an occluding background-textured band. The
simulated detector emits one detection per instance with score

    clamp01(mu_object + sigma * gauss + occlusion_penalty * [occluded])

plus background false alarms scored from the mu_background branch. Everything
runs off the splitmix-style generator in ciss.rng, so a seed reproduces the
same scene bytes anywhere.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .errors import SceneGenerationError
from .evaluation import GroundTruth, iou
from .features import (
    Box,
    DistanceParams,
    Image,
    build_integral_stack,
    compute_channel_stack,
    describe_patch,
    patch_distance,
)
from .model import PairSample, PriorPatch
from .rescore import Detection
from .rng import SplitMix64, mix64, uniform_field

BACKGROUND_LABEL = "background"


@dataclass(frozen=True)
class SynthConfig:
    """Scene geometry and appearance knobs."""

    width: int = 128
    height: int = 128
    categories: tuple[str, ...] = ("alpha", "beta", "gamma")
    instances_per_scene: int = 3
    instance_min_side: int = 22
    instance_max_side: int = 30
    occluded_fraction: float = 0.3
    occlusion_coverage: float = 0.3  # fraction of the occluded side covered
    placement_max_iou: float = 0.2
    max_place_attempts: int = 1000
    background_value: float = 0.5
    background_noise: float = 0.08
    object_noise: float = 0.06
    hue_jitter: float = 0.08


@dataclass(frozen=True)
class NoiseConfig:
    """Simulated base-detector behavior."""

    mu_object: float = 0.8
    mu_background: float = 0.2
    sigma: float = 0.15
    occlusion_penalty: float = -0.4
    clutter_per_scene: int = 2


@dataclass(frozen=True)
class Scene:
    image_id: str
    image: Image
    category: str
    ground_truth: list[GroundTruth]
    occluded: tuple[bool, ...]


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, value))


def _place_boxes(
    rng: SplitMix64,
    count: int,
    cfg: SynthConfig,
    avoid: list[Box],
) -> list[Box]:
    """Rejection-sample non-overlapping boxes (IoU cap against all others)."""
    placed: list[Box] = []
    for _ in range(count):
        for attempt in range(cfg.max_place_attempts):
            w = cfg.instance_min_side + rng.randint(
                cfg.instance_max_side - cfg.instance_min_side + 1
            )
            h = cfg.instance_min_side + rng.randint(
                cfg.instance_max_side - cfg.instance_min_side + 1
            )
            if w >= cfg.width or h >= cfg.height:
                continue
            box = Box(
                rng.randint(cfg.width - w + 1), rng.randint(cfg.height - h + 1), w, h
            )
            others = avoid + placed
            if all(iou(box, other) <= cfg.placement_max_iou for other in others):
                placed.append(box)
                break
        else:
            raise SceneGenerationError(
                f"could not place a {cfg.instance_min_side}px+ box after "
                f"{cfg.max_place_attempts} attempts"
            )
    return placed


def _noise_grid(seed: int, h: int, w: int, amplitude: float) -> np.ndarray:
    """(h, w) of uniform noise in [-amplitude, amplitude)."""
    return amplitude * (2.0 * uniform_field(seed, h * w).reshape(h, w) - 1.0)


def _background_patch(rng: SplitMix64, h: int, w: int, cfg: SynthConfig) -> np.ndarray:
    """(h, w, 3) exact-gray noise field around the background level."""
    values = np.clip(
        cfg.background_value + _noise_grid(rng.next_u64(), h, w, cfg.background_noise),
        0.0,
        1.0,
    )
    return np.repeat(values[:, :, None], 3, axis=2)


@dataclass(frozen=True)
class _Appearance:
    hue: float
    saturation: float
    value_a: float
    value_b: float
    period: int
    horizontal: bool

    def render(self, rng: SplitMix64, w: int, h: int, noise: float) -> np.ndarray:
        """(h, w, 3) striped patch in local coordinates plus gray noise."""
        color_a = np.array(colorsys.hsv_to_rgb(self.hue, self.saturation, self.value_a))
        color_b = np.array(colorsys.hsv_to_rgb(self.hue, self.saturation, self.value_b))
        axis = np.arange(h)[:, None] if self.horizontal else np.arange(w)[None, :]
        stripe = (axis // self.period) % 2 == 0
        stripe = np.broadcast_to(stripe, (h, w))
        patch = np.where(stripe[:, :, None], color_a, color_b)
        patch = patch + _noise_grid(rng.next_u64(), h, w, noise)[:, :, None]
        return np.clip(patch, 0.0, 1.0)


def _draw_appearance(rng: SplitMix64, category_index: int, n_categories: int,
                     cfg: SynthConfig) -> _Appearance:
    base_hue = category_index / n_categories
    return _Appearance(
        hue=(base_hue + rng.uniform_in(-cfg.hue_jitter, cfg.hue_jitter)) % 1.0,
        saturation=rng.uniform_in(0.7, 0.95),
        value_a=rng.uniform_in(0.65, 0.85),
        value_b=rng.uniform_in(0.35, 0.5),
        period=3 + rng.randint(4),
        horizontal=rng.uniform() < 0.5,
    )


def generate_scene(cfg: SynthConfig, seed: int) -> Scene:
    """Render one scene deterministically from its seed.

    Instance boxes stay in bounds with pairwise IoU at most
    cfg.placement_max_iou; impossible constraints raise SceneGenerationError.
    """
    rng = SplitMix64(seed)
    category_index = rng.randint(len(cfg.categories))
    category = cfg.categories[category_index]
    appearance = _draw_appearance(rng, category_index, len(cfg.categories), cfg)

    canvas = _background_patch(rng, cfg.height, cfg.width, cfg)
    boxes = _place_boxes(rng, cfg.instances_per_scene, cfg, avoid=[])
    occluded = tuple(rng.uniform() < cfg.occluded_fraction for _ in boxes)

    for box, occ in zip(boxes, occluded):
        patch = appearance.render(rng, box.w, box.h, cfg.object_noise)
        if occ:
            band = max(1, int(round(cfg.occlusion_coverage * box.h)))
            offset = rng.randint(max(1, box.h - band + 1))
            cover = _background_patch(rng, band, box.w, cfg)
            patch[offset : offset + band, :, :] = cover
        canvas[box.y : box.y2, box.x : box.x2, :] = patch

    pixels = np.round(canvas * 255.0).astype(np.uint8)
    image = Image(width=cfg.width, height=cfg.height, pixels=pixels)
    image_id = f"scene-{seed & 0xFFFFFFFFFFFFFFFF:016x}"
    gts = [
        GroundTruth(image_id=image_id, category=category, box=box, difficult=False)
        for box in boxes
    ]
    return Scene(
        image_id=image_id,
        image=image,
        category=category,
        ground_truth=gts,
        occluded=occluded,
    )


def simulate_base_scores(
    scene: Scene, noise: NoiseConfig, seed: int, cfg: SynthConfig | None = None
) -> list[Detection]:
    """One detection per instance plus clutter false alarms on background.

    Clutter boxes are placed like instances (low overlap against ground truth
    and each other) and scored from the background branch under the scene's
    category hypothesis.
    """
    if cfg is None:
        cfg = SynthConfig()
    rng = SplitMix64(seed)
    detections: list[Detection] = []
    for gt, occ in zip(scene.ground_truth, scene.occluded):
        score = _clamp01(
            noise.mu_object
            + noise.sigma * rng.gauss()
            + (noise.occlusion_penalty if occ else 0.0)
        )
        detections.append(
            Detection(
                image_id=scene.image_id,
                category=gt.category,
                box=gt.box,
                score=score,
            )
        )
    clutter_boxes = _place_boxes(
        rng, noise.clutter_per_scene, cfg, avoid=[gt.box for gt in scene.ground_truth]
    )
    for box in clutter_boxes:
        score = _clamp01(noise.mu_background + noise.sigma * rng.gauss())
        detections.append(
            Detection(
                image_id=scene.image_id,
                category=scene.category,
                box=box,
                score=score,
            )
        )
    return detections


def extract_training_pairs(
    scene: Scene,
    detections: list[Detection],
    params: DistanceParams,
) -> tuple[list[PairSample], list[PriorPatch]]:
    """Within-image pair samples and prior patches for model fitting.

    Detections whose box coincides with a ground-truth box are labeled with
    the scene category; everything else is background. Pair identities are
    binary (object of its hypothesized category or not) and the same-label
    flag compares the two annotations.
    """
    ist = build_integral_stack(compute_channel_stack(scene.image))
    gt_boxes = {(gt.box, gt.category) for gt in scene.ground_truth}
    annotations = [
        det.category if (det.box, det.category) in gt_boxes else BACKGROUND_LABEL
        for det in detections
    ]
    descriptors = [
        describe_patch(ist, det.box, params.use_pyramid) for det in detections
    ]
    pairs: list[PairSample] = []
    for i in range(len(detections)):
        for j in range(i + 1, len(detections)):
            pairs.append(
                PairSample(
                    distance=patch_distance(descriptors[i], descriptors[j], params),
                    s1=detections[i].score,
                    s2=detections[j].score,
                    l1=float(annotations[i] != BACKGROUND_LABEL),
                    l2=float(annotations[j] != BACKGROUND_LABEL),
                    same_label=annotations[i] == annotations[j],
                )
            )
    patches = [
        PriorPatch(
            categories=(ann,) if ann != BACKGROUND_LABEL else (),
            scores={det.category: det.score},
        )
        for det, ann in zip(detections, annotations)
    ]
    return pairs, patches


def derive_scene_seed(master_seed: int, index: int) -> int:
    """Per-scene seed: mix64(master ^ mix64(index + 1)), same rule as fork."""
    return mix64(master_seed ^ mix64(index + 1))
