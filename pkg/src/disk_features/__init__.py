"""Probabilistic local features trained by policy gradient on per-pixel parameter fields."""

from __future__ import annotations

from .detection import (
    GridSpec,
    SampledDetections,
    cell_probabilities,
    detect_argmax,
    detect_nms,
    partition_grid,
    sample_features,
    subsample_by_score,
)
from .field import (
    DegenerateDescriptorError,
    FeatureField,
    FeatureSet,
    FieldFormatError,
    Keypoint,
    init_field,
    load_field,
    normalized_descriptor,
    save_field,
)
from .geometry import (
    CameraView,
    MatchLabel,
    Scene,
    ZeroBaselineError,
    classify_match,
    epipolar_distance,
    generate_toy_scene,
    reproject,
)
from .gradient import (
    GradientAccumulator,
    RewardConfig,
    heatmap_score_grad,
    pair_gradient,
    reward_matrix,
    triplet_gradient,
)
from .matching import (
    DistanceMatrix,
    MatchDistribution,
    MatchSet,
    distance_matrix,
    expected_reward,
    match_inference,
    match_prob_pair,
    sample_matches,
)
from .trainer import EvalReport, TrainConfig, adam_update, anneal, evaluate_matches, train_toy

__version__ = "0.1.0"
