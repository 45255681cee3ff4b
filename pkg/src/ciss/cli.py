"""Command line pipeline: the synth, fit, rescore, and eval subcommands.

Configuration lives in a single JSON file (every section optional, strict key
checking) with a few flag overrides per subcommand. Exit codes: 0 success,
1 usage error, 2 data or pipeline error. All outputs are deterministic given
the config and seeds: images are processed in sorted id order, files are
written by the parent process only, and floats are serialized via repr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CissError, ConfigError
from .evaluation import (
    DetRecord,
    ErrorFilterConfig,
    evaluate_detections,
    greedy_nms,
    read_detections,
    read_ground_truth,
    write_detections,
    write_ground_truth,
)
from .features import DistanceParams, load_image, read_channel_map, write_ppm
from .model import (
    DEFAULT_BIN_WIDTH,
    MIN_PAIRS_PER_BIN,
    bin_covariances,
    build_model,
    estimate_priors,
    fit_exponential,
    load_model,
    model_from_dict,
    model_to_dict,
    read_pairs,
    read_prior_patches,
    save_model,
    weighted_residual,
    write_pairs,
    write_prior_patches,
)
from .rescore import (
    DenseMapProvider,
    Detection,
    DetectionLookupProvider,
    RescoreConfig,
    read_rescored_csv,
    rescore_image,
    write_rescored_csv,
)
from .search import SearchConfig
from .synth import (
    NoiseConfig,
    SynthConfig,
    derive_scene_seed,
    extract_training_pairs,
    generate_scene,
    simulate_base_scores,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

# CSV column name -> Detection attribute holding that score.
RESCORED_SCORE_COLUMNS = {
    "base_score": "score",
    "revised_base": "revised_base",
    "ciss_score": "ciss_score",
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything the four subcommands read, merged from JSON plus flags."""

    images_dir: str | None = None
    detections: str | None = None
    annotations: str | None = None
    model: str | None = None
    texture_maps_dir: str | None = None
    score_rasters_dir: str | None = None
    output: str | None = None
    pairs: str | None = None
    prior_patches: str | None = None
    workers: int = 1
    distance: DistanceParams = field(default_factory=DistanceParams)
    search: SearchConfig = field(default_factory=SearchConfig)
    rescore: RescoreConfig = field(default_factory=RescoreConfig)
    eval_errors: str = "all"
    eval_ap_mode: str = "area"
    eval_iou: float = 0.5
    pre_nms: bool = False
    nms_iou: float = 0.5
    fit_bin_width: float = DEFAULT_BIN_WIDTH
    fit_min_pairs: int = MIN_PAIRS_PER_BIN
    fit_ridge_factor: float | None = None
    synth_n: int = 100
    synth_seed: int = 0
    scene: SynthConfig = field(default_factory=SynthConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.eval_errors not in ("all", "ignore-loc-sim"):
            raise ConfigError(f"unknown eval errors mode {self.eval_errors!r}")
        if self.eval_ap_mode not in ("area", "voc07"):
            raise ConfigError(f"unknown ap_mode {self.eval_ap_mode!r}")

    def require(self, attr: str, why: str) -> str:
        value = getattr(self, attr)
        if value is None:
            raise ConfigError(f"missing config path {attr!r} ({why})")
        return value


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return value


def _distance_from_config(raw: dict) -> DistanceParams:
    _check_keys(raw, {"alpha", "beta", "pyramid"}, "distance")
    pyr = raw.get("pyramid", {})
    if not isinstance(pyr, dict):
        raise ConfigError("distance.pyramid must be an object")
    _check_keys(pyr, {"enabled", "weight_whole", "weight_cells"}, "distance.pyramid")
    base = DistanceParams()
    return DistanceParams(
        alpha=float(raw.get("alpha", base.alpha)),
        beta=float(raw.get("beta", base.beta)),
        use_pyramid=bool(pyr.get("enabled", base.use_pyramid)),
        pyramid_weight_whole=float(
            pyr.get("weight_whole", base.pyramid_weight_whole)
        ),
        pyramid_weight_cells=float(
            pyr.get("weight_cells", base.pyramid_weight_cells)
        ),
    )


def _search_from_config(raw: dict) -> SearchConfig:
    allowed = {"n_max", "d_max", "scales", "stride", "max_overlap_iou", "min_side"}
    _check_keys(raw, allowed, "search")
    base = SearchConfig()
    return SearchConfig(
        n_max=int(raw.get("n_max", base.n_max)),
        d_max=float(raw.get("d_max", base.d_max)),
        scales=tuple(float(s) for s in raw.get("scales", base.scales)),
        stride=int(raw.get("stride", base.stride)),
        max_overlap_iou=float(raw.get("max_overlap_iou", base.max_overlap_iou)),
        min_side=int(raw.get("min_side", base.min_side)),
    )


def _rescore_from_config(raw: dict) -> RescoreConfig:
    allowed = {"anchor_score_threshold", "anchor_min_side", "lookup_min_iou"}
    _check_keys(raw, allowed, "rescore")
    base = RescoreConfig()
    return RescoreConfig(
        anchor_score_threshold=float(
            raw.get("anchor_score_threshold", base.anchor_score_threshold)
        ),
        anchor_min_side=int(raw.get("anchor_min_side", base.anchor_min_side)),
        lookup_min_iou=float(raw.get("lookup_min_iou", base.lookup_min_iou)),
    )


def _scene_from_config(raw: dict) -> SynthConfig:
    allowed = {
        "width",
        "height",
        "categories",
        "instances_per_scene",
        "instance_min_side",
        "instance_max_side",
        "occluded_fraction",
        "occlusion_coverage",
        "placement_max_iou",
        "max_place_attempts",
        "background_value",
        "background_noise",
        "object_noise",
        "hue_jitter",
    }
    _check_keys(raw, allowed, "synth.scene")
    base = SynthConfig()
    kwargs = {}
    for name in allowed:
        if name in raw:
            value = raw[name]
            kwargs[name] = tuple(str(c) for c in value) if name == "categories" else value
    return replace(base, **kwargs)


def _noise_from_config(raw: dict) -> NoiseConfig:
    allowed = {
        "mu_object",
        "mu_background",
        "sigma",
        "occlusion_penalty",
        "clutter_per_scene",
    }
    _check_keys(raw, allowed, "synth.noise")
    base = NoiseConfig()
    return replace(base, **{k: raw[k] for k in allowed if k in raw})


_PATH_KEYS = {
    "images_dir",
    "detections",
    "annotations",
    "model",
    "texture_maps_dir",
    "score_rasters_dir",
    "output",
    "pairs",
    "prior_patches",
}


def parse_config(raw: dict) -> RunConfig:
    """Build a RunConfig from the JSON object, rejecting unknown keys."""
    top = {"paths", "distance", "search", "rescore", "eval", "nms", "fit", "synth",
           "workers"}
    _check_keys(raw, top, "config")
    paths = _section(raw, "paths")
    _check_keys(paths, _PATH_KEYS, "paths")
    for key, value in paths.items():
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"paths.{key} must be a string")

    eval_raw = _section(raw, "eval")
    _check_keys(eval_raw, {"errors", "ap_mode", "iou_threshold"}, "eval")
    nms_raw = _section(raw, "nms")
    _check_keys(nms_raw, {"pre_nms", "iou"}, "nms")
    fit_raw = _section(raw, "fit")
    _check_keys(fit_raw, {"bin_width", "min_pairs_per_bin", "ridge_factor"}, "fit")
    synth_raw = _section(raw, "synth")
    _check_keys(synth_raw, {"n_scenes", "seed", "scene", "noise"}, "synth")

    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool):
        raise ConfigError("workers must be an integer")

    try:
        return RunConfig(
            **{k: paths.get(k) for k in _PATH_KEYS},
            workers=workers,
            distance=_distance_from_config(_section(raw, "distance")),
            search=_search_from_config(_section(raw, "search")),
            rescore=_rescore_from_config(_section(raw, "rescore")),
            eval_errors=str(eval_raw.get("errors", "all")),
            eval_ap_mode=str(eval_raw.get("ap_mode", "area")),
            eval_iou=float(eval_raw.get("iou_threshold", 0.5)),
            pre_nms=bool(nms_raw.get("pre_nms", False)),
            nms_iou=float(nms_raw.get("iou", 0.5)),
            fit_bin_width=float(fit_raw.get("bin_width", DEFAULT_BIN_WIDTH)),
            fit_min_pairs=int(fit_raw.get("min_pairs_per_bin", MIN_PAIRS_PER_BIN)),
            fit_ridge_factor=(
                None
                if fit_raw.get("ridge_factor") is None
                else float(fit_raw["ridge_factor"])
            ),
            synth_n=int(synth_raw.get("n_scenes", 100)),
            synth_seed=int(synth_raw.get("seed", 0)),
            scene=_scene_from_config(_section(synth_raw, "scene")),
            noise=_noise_from_config(_section(synth_raw, "noise")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return parse_config(raw)


# ---------------------------------------------------------------------------
# fit


def run_fit(cfg: RunConfig) -> int:
    pairs = read_pairs(cfg.require("pairs", "training pairs for fit"))
    patches = read_prior_patches(
        cfg.require("prior_patches", "prior patches for fit")
    )
    model_path = cfg.model if cfg.model is not None else cfg.output
    if model_path is None:
        raise ConfigError("fit needs paths.model (or -o) to write the model")

    n_bins = int(round(1.0 / cfg.fit_bin_width))
    edges = np.arange(n_bins + 1, dtype=np.float64) * cfg.fit_bin_width
    bc = bin_covariances(pairs, edges=edges, min_count=cfg.fit_min_pairs)

    print(f"pairs={len(pairs)} patches={len(patches)}")
    print("bin      lo      hi   count  used  cov_ss  cov_ls")
    for i in range(bc.counts.size):
        used = "yes" if bc.valid[i] else "no"
        cs = repr(float(bc.cov_ss[i])) if bc.valid[i] else "-"
        cl = repr(float(bc.cov_ls[i])) if bc.valid[i] else "-"
        print(
            f"{i:3d}  {bc.edges[i]:.4f}  {bc.edges[i + 1]:.4f}  "
            f"{int(bc.counts[i]):6d}  {used:4s}  {cs}  {cl}"
        )

    gamma = fit_exponential(bc)
    mask = bc.valid
    r_ss = weighted_residual(
        bc.mids[mask], bc.cov_ss[mask], bc.counts[mask], gamma.a_ss, gamma.b_ss
    )
    r_ls = weighted_residual(
        bc.mids[mask], bc.cov_ls[mask], bc.counts[mask], gamma.a_ls, gamma.b_ls
    )
    print(f"gamma_ss: a={gamma.a_ss!r} b={gamma.b_ss!r} residual={r_ss!r}")
    print(f"gamma_ls: a={gamma.a_ls!r} b={gamma.b_ls!r} residual={r_ls!r}")

    priors = estimate_priors(patches)
    ridge = None
    if cfg.fit_ridge_factor is not None:
        ridge = cfg.fit_ridge_factor * gamma.a_ss
    model = build_model(gamma, priors, cfg.distance, ridge=ridge)
    save_model(model, model_path)
    print(f"model written ({len(priors.entries)} category priors)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# rescore


def _resolve_image_path(images_dir: str, image_id: str) -> str:
    for ext in (".ppm", ".png"):
        candidate = Path(images_dir) / f"{image_id}{ext}"
        if candidate.exists():
            return str(candidate)
    raise FileNotFoundError(f"no image file for id {image_id!r} under {images_dir}")


def _rescore_one(payload: tuple) -> tuple[str, list | None, str | None]:
    """Worker: rescore one image. Returns (image_id, detections, error)."""
    (
        image_id,
        image_path,
        texture_path,
        dets,
        model_dict,
        search_cfg,
        rescore_cfg,
        rasters_dir,
    ) = payload
    try:
        model = model_from_dict(model_dict)
        image = load_image(image_path)
        texture = read_channel_map(texture_path) if texture_path else None
        if rasters_dir is not None:
            provider = DenseMapProvider(rasters_dir)
        else:
            provider = DetectionLookupProvider(dets, rescore_cfg.lookup_min_iou)
        out = rescore_image(
            image,
            image_id,
            dets,
            model,
            provider,
            search_cfg,
            rescore_cfg,
            texture_maps=texture,
        )
        return image_id, out, None
    except (CissError, OSError, ValueError, FloatingPointError) as exc:
        return image_id, None, f"{type(exc).__name__}: {exc}"


@dataclass(frozen=True)
class _NmsProxy:
    """Adapter so NMS can rank rescored detections by their new score."""

    image_id: str
    category: str
    box: object
    score: float
    index: int


def run_rescore(cfg: RunConfig) -> int:
    model = load_model(cfg.require("model", "fitted model for rescore"))
    images_dir = cfg.require("images_dir", "scene images for rescore")
    out_path = cfg.require("output", "rescored CSV destination")
    records = read_detections(cfg.require("detections", "base detections"))
    dets = [
        Detection(image_id=r.image_id, category=r.category, box=r.box, score=r.score)
        for r in records
    ]

    by_image: dict[str, list[Detection]] = {}
    for det in dets:
        by_image.setdefault(det.image_id, []).append(det)

    model_dict = model_to_dict(model)
    payloads = []
    skipped: list[str] = []
    for image_id in sorted(by_image):
        try:
            image_path = _resolve_image_path(images_dir, image_id)
            texture_path = None
            if cfg.texture_maps_dir is not None:
                candidate = Path(cfg.texture_maps_dir) / f"{image_id}.chan"
                if not candidate.exists():
                    raise FileNotFoundError(f"no texture map for id {image_id!r}")
                texture_path = str(candidate)
        except FileNotFoundError as exc:
            print(f"skip {image_id}: {exc}", file=sys.stderr)
            skipped.append(image_id)
            continue
        payloads.append(
            (
                image_id,
                image_path,
                texture_path,
                by_image[image_id],
                model_dict,
                cfg.search,
                cfg.rescore,
                cfg.score_rasters_dir,
            )
        )

    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_rescore_one, payloads))
    else:
        results = [_rescore_one(p) for p in payloads]

    rescored: list[Detection] = []
    for image_id, out, error in results:
        if error is not None:
            print(f"skip {image_id}: {error}", file=sys.stderr)
            skipped.append(image_id)
            continue
        rescored.extend(out)

    if cfg.pre_nms:
        proxies = [
            _NmsProxy(d.image_id, d.category, d.box, d.ciss_score, i)
            for i, d in enumerate(rescored)
        ]
        rescored = [rescored[p.index] for p in greedy_nms(proxies, cfg.nms_iou)]

    write_rescored_csv(out_path, rescored)
    n_images = len(payloads) + len(skipped)
    print(
        f"rescored {len(rescored)} detections over "
        f"{n_images - len(skipped)}/{n_images} images "
        f"({len(skipped)} skipped)"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _report_line(tag: str, report: dict) -> str:
    mean_ap = report["mean_ap"]
    mean_f = report["mean_f"]
    ap_text = "none" if mean_ap is None else repr(mean_ap)
    f_text = "none" if mean_f is None else repr(mean_f)
    return f"{tag}: mean_ap={ap_text} mean_f={f_text}"


def run_eval(cfg: RunConfig) -> int:
    gts = read_ground_truth(cfg.require("annotations", "ground truth for eval"))
    det_path = cfg.require("detections", "detections (.jsonl) or rescored CSV")
    filters = ErrorFilterConfig(mode=cfg.eval_errors)

    if det_path.endswith(".csv"):
        rows = read_rescored_csv(det_path)
        columns: dict[str, dict] = {}
        for column, attr in RESCORED_SCORE_COLUMNS.items():
            scored = [
                DetRecord(
                    image_id=r.image_id,
                    category=r.category,
                    box=r.box,
                    score=float(getattr(r, attr)),
                )
                for r in rows
            ]
            columns[column] = evaluate_detections(
                scored, gts, cfg.eval_iou, filters, cfg.eval_ap_mode
            )
        report: dict = {"columns": columns}
        summary = [_report_line(col, columns[col]) for col in RESCORED_SCORE_COLUMNS]
    else:
        records = read_detections(det_path)
        report = evaluate_detections(
            records, gts, cfg.eval_iou, filters, cfg.eval_ap_mode
        )
        summary = [_report_line("detections", report)]

    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if cfg.output is not None:
        with open(cfg.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for line in summary:
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def run_synth(cfg: RunConfig) -> int:
    out_dir = Path(cfg.require("output", "dataset directory for synth"))
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    scene_seeds = [derive_scene_seed(cfg.synth_seed, i) for i in range(cfg.synth_n)]
    detector_seeds = [
        derive_scene_seed(cfg.synth_seed, cfg.synth_n + i) for i in range(cfg.synth_n)
    ]
    all_gts = []
    all_dets = []
    all_pairs = []
    all_patches = []
    for scene_seed, det_seed in zip(scene_seeds, detector_seeds):
        scene = generate_scene(cfg.scene, scene_seed)
        dets = simulate_base_scores(scene, cfg.noise, det_seed, cfg.scene)
        pairs, patches = extract_training_pairs(scene, dets, cfg.distance)
        write_ppm(scene.image, images_dir / f"{scene.image_id}.ppm")
        all_gts.extend(scene.ground_truth)
        all_dets.extend(dets)
        all_pairs.extend(pairs)
        all_patches.extend(patches)

    write_ground_truth(out_dir / "ground_truth.jsonl", all_gts)
    write_detections(out_dir / "detections.jsonl", all_dets)
    write_pairs(out_dir / "pairs.jsonl", all_pairs)
    write_prior_patches(out_dir / "prior_patches.jsonl", all_patches)
    manifest = {
        "master_seed": cfg.synth_seed,
        "n_scenes": cfg.synth_n,
        "scene_seeds": scene_seeds,
        "detector_seeds": detector_seeds,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"scenes={cfg.synth_n} detections={len(all_dets)} pairs={len(all_pairs)}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and entry point


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ciss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", default=None, help="JSON config file")
        p.add_argument("-o", "--output", default=None, help="output path override")
        return p

    add("fit", "fit dependency model from training pairs")

    p_rescore = add("rescore", "rescore detections image by image")
    p_rescore.add_argument(
        "--pre-nms",
        action="store_true",
        default=None,
        help="apply NMS on the rescored scores before writing",
    )
    p_rescore.add_argument(
        "--workers", type=int, default=None, help="parallel image workers"
    )

    p_eval = add("eval", "evaluate detections or a rescored CSV")
    p_eval.add_argument(
        "--ignore-loc-sim",
        action="store_true",
        default=None,
        help="ignore localization and similar-category errors",
    )
    p_eval.add_argument(
        "--ap-mode", choices=("area", "voc07"), default=None, help="AP integration"
    )

    p_synth = add("synth", "generate the synthetic benchmark")
    p_synth.add_argument("-n", "--n-scenes", type=int, default=None)
    p_synth.add_argument("--seed", type=int, default=None)

    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.output is not None:
        cfg.output = args.output
    if getattr(args, "pre_nms", None) is not None:
        cfg.pre_nms = True
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
        if cfg.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    if getattr(args, "ignore_loc_sim", None) is not None:
        cfg.eval_errors = "ignore-loc-sim"
    if getattr(args, "ap_mode", None) is not None:
        cfg.eval_ap_mode = args.ap_mode
    if getattr(args, "n_scenes", None) is not None:
        cfg.synth_n = args.n_scenes
    if getattr(args, "seed", None) is not None:
        cfg.synth_seed = args.seed
    return cfg


_COMMANDS = {
    "fit": run_fit,
    "rescore": run_rescore,
    "eval": run_eval,
    "synth": run_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return _COMMANDS[args.command](cfg)
    except (CissError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
