"""Context-driven rescoring of object detections.

A base detector's box/category/score candidates are re-estimated from the
scores of visually similar, non-overlapping regions of the same image found
by a sliding-window search over color and texture histograms. The estimator
is linear MMSE under fitted covariance-vs-distance functions, so scores of
repeated objects support each other while lone false alarms drift back
toward the prior.

Modules:
    features    images, histogram channel stacks, integral tables, distances
    search      supporter enumeration and greedy selection around an anchor
    model       covariance binning and exponential fits, priors, model file
    rescore     anchor eligibility, MMSE systems, per-image rescoring, CSV
    evaluation  matching, PR/AP/F metrics, error filtering, NMS
    synth       deterministic synthetic benchmark and detector simulation
    cli         fit / rescore / eval / synth subcommands
"""

from .errors import (
    ChannelMapError,
    CissError,
    ConfigError,
    CorruptImageData,
    InputDataError,
    InsufficientBins,
    MissingScoreRaster,
    ModelFormatError,
    NoValidBins,
    SceneGenerationError,
    UnsupportedImageFormat,
)
from .evaluation import (
    DetRecord,
    ErrorFilterConfig,
    GroundTruth,
    PrCurve,
    evaluate_detections,
    greedy_nms,
    iou,
    match_detections,
    pr_ap_f,
)
from .features import (
    Box,
    ChannelStack,
    DistanceParams,
    Image,
    IntegralStack,
    PatchDescriptor,
    build_integral_stack,
    chi_square,
    compute_channel_stack,
    describe_patch,
    describe_patch_direct,
    load_image,
    patch_distance,
)
from .model import (
    BinnedCov,
    CategoryPrior,
    CategoryPriors,
    DependencyModel,
    GammaParams,
    PairSample,
    PriorPatch,
    bin_covariances,
    build_model,
    estimate_priors,
    fit_exponential,
    load_model,
    save_model,
)
from .rescore import (
    DenseMapProvider,
    Detection,
    DetectionLookupProvider,
    MmseSystem,
    RescoreConfig,
    build_covariance_system,
    rescore_image,
    revise_base_score,
    solve_mmse,
)
from .search import (
    SearchConfig,
    Supporter,
    find_supporters,
    find_supporters_bruteforce,
)
from .synth import (
    NoiseConfig,
    Scene,
    SynthConfig,
    extract_training_pairs,
    generate_scene,
    simulate_base_scores,
)

__version__ = "0.1.0"

__all__ = [
    "BinnedCov",
    "Box",
    "CategoryPrior",
    "CategoryPriors",
    "ChannelMapError",
    "ChannelStack",
    "CissError",
    "ConfigError",
    "CorruptImageData",
    "DenseMapProvider",
    "DependencyModel",
    "DetRecord",
    "Detection",
    "DetectionLookupProvider",
    "DistanceParams",
    "ErrorFilterConfig",
    "GammaParams",
    "GroundTruth",
    "Image",
    "InputDataError",
    "InsufficientBins",
    "IntegralStack",
    "MissingScoreRaster",
    "MmseSystem",
    "ModelFormatError",
    "NoValidBins",
    "NoiseConfig",
    "PairSample",
    "PatchDescriptor",
    "PrCurve",
    "PriorPatch",
    "RescoreConfig",
    "Scene",
    "SceneGenerationError",
    "SearchConfig",
    "Supporter",
    "SynthConfig",
    "UnsupportedImageFormat",
    "bin_covariances",
    "build_covariance_system",
    "build_integral_stack",
    "build_model",
    "chi_square",
    "compute_channel_stack",
    "describe_patch",
    "describe_patch_direct",
    "estimate_priors",
    "evaluate_detections",
    "extract_training_pairs",
    "find_supporters",
    "find_supporters_bruteforce",
    "fit_exponential",
    "generate_scene",
    "greedy_nms",
    "iou",
    "load_image",
    "load_model",
    "match_detections",
    "patch_distance",
    "pr_ap_f",
    "rescore_image",
    "revise_base_score",
    "save_model",
    "simulate_base_scores",
    "solve_mmse",
]
