"""Desk-scale training of per-pixel feature fields on synthetic posed scenes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .detection import detect_argmax, detect_nms, partition_grid, sample_features
from .field import FeatureField, init_field
from .geometry import MatchLabel, Scene, classify_pairs
from .gradient import GradientAccumulator, RewardConfig, pair_gradient, triplet_gradient
from .matching import distance_matrix, match_inference

log = logging.getLogger(__name__)

EVAL_MODES = ("nms", "grid")


class NonFiniteGradientError(RuntimeError):
    def __init__(self, step: int, dump_path: Path | None):
        msg = f"non-finite gradient at step {step}"
        if dump_path is not None:
            msg += f"; state dumped to {dump_path}"
        super().__init__(msg)
        self.step = step
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    heatmap_lr: float | None = None  # default: same as lr
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    h: int = 8
    n: int = 128
    rewards: RewardConfig = field(default_factory=RewardConfig)
    anneal_steps: int | None = None  # default: steps // 6
    theta_m_start: float = 15.0
    theta_m_end: float = 50.0
    theta_m_ramp_steps: int | None = None  # default: steps // 2
    seed: int = 0
    shared_field: bool = False
    eval_interval: int = 100
    eval_mode: str = "nms"
    nms_radius: int = 2
    nms_threshold: float = 0.0
    ratio_threshold: float = 0.95
    eval_samples: int = 8
    dump_dir: Path | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.heatmap_lr is None:
            self.heatmap_lr = self.lr
        if not self.heatmap_lr > 0:
            raise ValueError("heatmap_lr must be positive")
        if self.anneal_steps is None:
            self.anneal_steps = self.steps // 6
        if self.theta_m_ramp_steps is None:
            self.theta_m_ramp_steps = self.steps // 2
        if self.anneal_steps > self.steps or self.theta_m_ramp_steps > self.steps:
            raise ValueError("ramp lengths must not exceed the number of steps")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_update(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8, step=1):
    """One bias-corrected ADAM step in the ascent direction.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if step < 1:
        raise ValueError("ADAM step counter starts at 1")
    b1, b2 = betas
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    return params + lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v)


def anneal(cfg: TrainConfig, step: int) -> tuple[float, float, float]:
    """Effective (lambda_fp, lambda_kp, theta_m) at ``step``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    frac = 1.0 if cfg.anneal_steps == 0 else min(step / cfg.anneal_steps, 1.0)
    ramp = 1.0 if cfg.theta_m_ramp_steps == 0 else min(step / cfg.theta_m_ramp_steps, 1.0)
    theta = cfg.theta_m_start + (cfg.theta_m_end - cfg.theta_m_start) * ramp
    # "+ 0.0" turns the -0.0 of a zero ramp into 0.0 for reports
    return frac * cfg.rewards.lambda_fp + 0.0, frac * cfg.rewards.lambda_kp + 0.0, theta


@dataclass
class EvalReport:
    step: int
    expected_reward: float
    theta_m: float
    lambda_fp_eff: float
    lambda_kp_eff: float
    n_keypoints: float  # mean sampled keypoints per view
    precision: float
    recall: float
    mean_reproj_err: float
    n_matches: int = 0
    n_correct: int = 0
    n_incorrect: int = 0
    n_detected: tuple[int, int] = (0, 0)
    zero_matches: bool = False

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["n_detected"] = list(self.n_detected)
        if not math.isfinite(d["mean_reproj_err"]):
            d["mean_reproj_err"] = None
        return d


def _detect(field: FeatureField, mode: str, h: int, nms_radius: int, nms_threshold: float):
    if mode == "nms":
        return detect_nms(field, nms_radius, nms_threshold)
    if mode == "grid":
        return detect_argmax(field, partition_grid(field.height, field.width, h))
    raise ValueError(f"unknown detection mode {mode!r}")


def evaluate_matches(
    fields,
    scene: Scene,
    mode: str = "nms",
    ratio_threshold: float = 0.95,
    epsilon: float = 2.0,
    h: int = 8,
    nms_radius: int = 2,
    views=(0, 1),
    nms_threshold: float = 0.0,
) -> EvalReport:
    """Detect, match with mutual NN + ratio test, and score against the scene geometry.

    ``fields`` is one shared field or a sequence indexed by view.  Only the
    match-quality fields of the returned report are filled in.
    """
    if isinstance(fields, FeatureField):
        fields = [fields] * len(scene.views)
    va, vb = views
    fa, fb = fields[va], fields[vb]
    for f in (fa, fb):
        if (f.height, f.width) != (scene.height, scene.width):
            raise ValueError(f"field {f.height}x{f.width} does not match scene {scene.height}x{scene.width}")
    feats_a = _detect(fa, mode, h, nms_radius, nms_threshold)
    feats_b = _detect(fb, mode, h, nms_radius, nms_threshold)
    n_det = (len(feats_a), len(feats_b))
    if len(feats_a) == 0 or len(feats_b) == 0:
        return EvalReport(0, math.nan, math.nan, 0.0, 0.0, 0.0, 1.0, 0.0, math.nan, n_detected=n_det, zero_matches=True)

    xy_a, xy_b = feats_a.xy, feats_b.xy
    labels = classify_pairs(scene, va, vb, xy_a, xy_b, epsilon)
    matches = match_inference(distance_matrix(feats_a, feats_b), ratio_threshold)
    i, j = matches.pairs[:, 0], matches.pairs[:, 1]
    matched = labels[i, j]
    n_correct = int(np.sum(matched == MatchLabel.CORRECT))
    n_incorrect = int(np.sum(matched == MatchLabel.INCORRECT))
    decided = n_correct + n_incorrect
    precision = n_correct / decided if decided else 1.0

    # keypoints of A whose true correspondent was also detected in B
    matchable = int(np.sum(np.any(labels == MatchLabel.CORRECT, axis=1)))
    recall = n_correct / matchable if matchable else 0.0

    uv, ok = scene.reprojection_map(va, vb)
    errs = []
    for a, b in zip(i, j):
        x, y = xy_a[a]
        if ok[y, x]:
            errs.append(float(np.linalg.norm(uv[y, x] - xy_b[b])))
    return EvalReport(
        step=0,
        expected_reward=math.nan,
        theta_m=math.nan,
        lambda_fp_eff=0.0,
        lambda_kp_eff=0.0,
        n_keypoints=0.0,
        precision=precision,
        recall=recall,
        mean_reproj_err=float(np.mean(errs)) if errs else math.nan,
        n_matches=len(matches),
        n_correct=n_correct,
        n_incorrect=n_incorrect,
        n_detected=n_det,
        zero_matches=decided == 0,
    )


def _gradient(fields, sampled, scene, theta, rewards) -> GradientAccumulator:
    if len(scene.views) >= 3:
        return triplet_gradient(fields[:3], sampled[:3], scene, theta, rewards)
    return pair_gradient(fields[0], fields[1], sampled[0], sampled[1], scene, theta, rewards)


def sampled_expected_reward(fields, scene, cfg: TrainConfig, theta: float, rng, samples: int):
    """Mean of the closed-form matching reward plus keypoint penalty over resampled features.

    Uses the full (un-annealed) reward constants.  Returns ``(reward, mean keypoints per view)``.
    """
    grid = partition_grid(scene.height, scene.width, cfg.h)
    total, kps = 0.0, 0.0
    n_views = min(len(scene.views), 3)
    for _ in range(samples):
        sampled = [sample_features(fields[v], grid, rng) for v in range(n_views)]
        acc = _gradient(fields, sampled, scene, theta, cfg.rewards)
        total += acc.expected_reward
        kps += acc.counts["keypoints"] / n_views
    return total / samples, kps / samples


def _view_fields(params: list[FeatureField], scene: Scene, shared: bool) -> list[FeatureField]:
    return [params[0]] * len(scene.views) if shared else params


def _evaluate(step, params, scene, cfg) -> EvalReport:
    fields = _view_fields(params, scene, cfg.shared_field)
    lam_fp, lam_kp, theta = anneal(cfg, step)
    report = evaluate_matches(
        fields,
        scene,
        cfg.eval_mode,
        cfg.ratio_threshold,
        cfg.rewards.epsilon,
        cfg.h,
        cfg.nms_radius,
        nms_threshold=cfg.nms_threshold,
    )
    eval_rng = np.random.default_rng([cfg.seed, step, 1])
    reward, kps = sampled_expected_reward(fields, scene, cfg, theta, eval_rng, cfg.eval_samples)
    return replace(
        report,
        step=step,
        expected_reward=reward,
        theta_m=theta,
        lambda_fp_eff=lam_fp,
        lambda_kp_eff=lam_kp,
        n_keypoints=kps,
    )


@dataclass
class TrainResult:
    fields: list[FeatureField]  # one per view, or a single shared field
    history: list[EvalReport]
    reward_trace: np.ndarray  # training-objective value at every step (annealed constants)
    keypoint_trace: np.ndarray


def train_toy(scene: Scene, cfg: TrainConfig) -> TrainResult:
    """Optimize feature fields for ``scene`` by stochastic gradient ascent on expected reward.

    Every ``eval_interval`` steps, and after the last step, an :class:`EvalReport`
    is appended.  With ``cfg.steps == 0`` the initial fields and an empty
    history are returned.
    """
    n_fields = 1 if cfg.shared_field else len(scene.views)
    params = [init_field(scene.height, scene.width, cfg.n, seed=cfg.seed * 1000 + v) for v in range(n_fields)]
    if cfg.steps == 0:
        return TrainResult(params, [], np.zeros(0), np.zeros(0))

    grid = partition_grid(scene.height, scene.width, cfg.h)
    rng = np.random.default_rng(cfg.seed)
    heat_state = [AdamState.like(p.heatmap) for p in params]
    desc_state = [AdamState.like(p.descriptors) for p in params]
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    n_views = min(len(scene.views), 3)
    history: list[EvalReport] = []
    trace = np.zeros(cfg.steps)
    kp_trace = np.zeros(cfg.steps)

    for step in range(cfg.steps):
        if step % cfg.eval_interval == 0:
            history.append(_evaluate(step, params, scene, cfg))
            log.info("step %d: %s", step, history[-1])
        lam_fp, lam_kp, theta = anneal(cfg, step)
        rewards = replace(cfg.rewards, lambda_fp=lam_fp, lambda_kp=lam_kp)
        fields = _view_fields(params, scene, cfg.shared_field)
        sampled = [sample_features(fields[v], grid, rng) for v in range(n_views)]
        acc = _gradient(fields, sampled, scene, theta, rewards)
        if not acc.is_finite():
            raise NonFiniteGradientError(step, _dump(cfg, step, params, acc))
        trace[step] = acc.expected_reward
        kp_trace[step] = acc.counts["keypoints"] / n_views

        if cfg.shared_field:
            heat_grads, desc_grads = [sum(acc.d_heatmap)], [sum(acc.d_descriptors)]
        else:
            heat_grads, desc_grads = acc.d_heatmap, acc.d_descriptors
            heat_grads = list(heat_grads) + [np.zeros_like(p.heatmap) for p in params[len(heat_grads):]]
            desc_grads = list(desc_grads) + [np.zeros_like(p.descriptors) for p in params[len(desc_grads):]]
        for k, p in enumerate(params):
            heat, heat_state[k] = adam_update(p.heatmap, heat_grads[k], heat_state[k], cfg.heatmap_lr, betas, cfg.adam_eps, step + 1)
            desc, desc_state[k] = adam_update(p.descriptors, desc_grads[k], desc_state[k], cfg.lr, betas, cfg.adam_eps, step + 1)
            params[k] = FeatureField(heat, desc)

    history.append(_evaluate(cfg.steps, params, scene, cfg))
    return TrainResult(params, history, trace, kp_trace)


def _dump(cfg: TrainConfig, step: int, params, acc: GradientAccumulator) -> Path | None:
    if cfg.dump_dir is None:
        return None
    path = Path(cfg.dump_dir) / f"nonfinite_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for k, p in enumerate(params):
        arrays[f"heatmap{k}"] = p.heatmap
        arrays[f"descriptors{k}"] = p.descriptors
    for k, (gh, gd) in enumerate(zip(acc.d_heatmap, acc.d_descriptors)):
        arrays[f"d_heatmap{k}"] = gh
        arrays[f"d_descriptors{k}"] = gd
    np.savez(path, step=step, **arrays)
    return path
