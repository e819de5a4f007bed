"""Policy-gradient estimator for the expected match reward.

For sampled feature sets ``F_A`` and ``F_B`` the expected reward of the match
distribution, ``sum_ij P(i<->j) r(i<->j)``, is differentiated exactly with
respect to descriptors and ``theta_m``.  The discrete keypoint choices are
handled with the score function: every sampled feature ``i`` in A receives
``sum_j P(i<->j) r(i<->j) + lambda_kp`` times the gradient of its log
sampling probability, and symmetrically for B.

All gradients are ascent directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detection import SampledDetections, log_sigmoid, log_softmax, partition_grid, sigmoid
from .field import FeatureField, FeatureSet, Keypoint, init_field, normalize
from .geometry import MatchLabel, Scene, classify_pairs


@dataclass(frozen=True)
class RewardConfig:
    lambda_tp: float = 1.0
    lambda_fp: float = -0.25
    lambda_kp: float = -0.001
    epsilon: float = 2.0

    def __post_init__(self):
        if not self.lambda_tp > 0:
            raise ValueError("lambda_tp must be positive")
        if self.lambda_fp > 0 or self.lambda_kp > 0:
            raise ValueError("lambda_fp and lambda_kp must be <= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class GradientAccumulator:
    """Per-view gradients plus diagnostics.

    ``d_heatmap[v]`` and ``d_descriptors[v]`` have the shapes of the field used
    for view ``v``.  When one field is shared by all views, use
    :meth:`shared` to sum them.
    """

    d_heatmap: list[np.ndarray]
    d_descriptors: list[np.ndarray]
    d_theta_m: float = 0.0
    expected_reward: float = 0.0
    counts: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, fields: list[FeatureField]) -> "GradientAccumulator":
        return cls(
            d_heatmap=[np.zeros_like(f.heatmap) for f in fields],
            d_descriptors=[np.zeros_like(f.descriptors) for f in fields],
            counts={"correct": 0.0, "plausible": 0.0, "incorrect": 0.0, "keypoints": 0},
        )

    def shared(self) -> tuple[np.ndarray, np.ndarray]:
        return sum(self.d_heatmap), sum(self.d_descriptors)

    def is_finite(self) -> bool:
        blocks = self.d_heatmap + self.d_descriptors
        return all(np.all(np.isfinite(b)) for b in blocks) and np.isfinite(self.d_theta_m)


def reward_matrix(features_a, features_b, scene: Scene, cfg: RewardConfig, views=(0, 1)) -> np.ndarray:
    """r(i, j) = lambda_tp for Correct, lambda_fp for Incorrect, 0 for Plausible."""
    labels = classify_pairs(scene, views[0], views[1], features_a.xy, features_b.xy, cfg.epsilon)
    values = np.array([cfg.lambda_tp, 0.0, cfg.lambda_fp])
    return values[labels]


def heatmap_score_grad(cell_logits, sampled_pixel) -> np.ndarray:
    """Gradient of ``log softmax(cell)[p] + log sigmoid(cell[p])`` over the cell.

    ``sampled_pixel`` is ``(x, y)`` in cell-local coordinates.
    """
    logits = np.asarray(cell_logits, dtype=np.float64)
    x, y = sampled_pixel
    z = np.exp(logits - logits.max())
    grad = -z / z.sum()
    grad[y, x] += 1.0 + (1.0 - sigmoid(logits[y, x]))
    return grad


def match_gradients(raw_a: np.ndarray, raw_b: np.ndarray, rewards: np.ndarray, theta_m: float):
    """Exact gradient of ``sum_ij P(i<->j) r_ij`` w.r.t. raw descriptors and theta_m.

    Returns ``(value, probs, grad_raw_a, grad_raw_b, grad_theta)``.
    """
    n, m = rewards.shape
    if n == 0 or m == 0:
        return 0.0, np.zeros((n, m)), np.zeros_like(raw_a), np.zeros_like(raw_b), 0.0
    norm_a = np.linalg.norm(raw_a, axis=1, keepdims=True)
    norm_b = np.linalg.norm(raw_b, axis=1, keepdims=True)
    if np.any(norm_a < 1e-12) or np.any(norm_b < 1e-12):
        raise ValueError("zero-length descriptor at a sampled pixel")
    u = raw_a / norm_a
    w = raw_b / norm_b
    diff = u[:, None, :] - w[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))

    logits = -theta_m * d
    fwd = np.exp(logits - logits.max(axis=1, keepdims=True))
    fwd /= fwd.sum(axis=1, keepdims=True)
    rev = np.exp(logits - logits.max(axis=0, keepdims=True))
    rev /= rev.sum(axis=0, keepdims=True)
    probs = fwd * rev
    weighted = probs * rewards
    value = float(weighted.sum())

    # d value / d logits: each factor is a softmax, so its log-derivative is (onehot - probs)
    g_logits = 2.0 * weighted - fwd * weighted.sum(axis=1, keepdims=True) - rev * weighted.sum(axis=0, keepdims=True)
    grad_theta = float(-np.sum(g_logits * d))
    g_d = -theta_m * g_logits
    # subgradient 0 where d == 0
    coef = np.divide(g_d, d, out=np.zeros_like(d), where=d > 0)
    g_u = np.einsum("ij,ijk->ik", coef, diff)
    g_w = -np.einsum("ij,ijk->jk", coef, diff)

    # back through l2 normalization: (I - u u^T) / ||v||
    g_a = (g_u - u * np.sum(g_u * u, axis=1, keepdims=True)) / norm_a
    g_b = (g_w - w * np.sum(g_w * w, axis=1, keepdims=True)) / norm_b
    return value, probs, g_a, g_b, grad_theta


def _check_sampled(sampled: SampledDetections) -> None:
    if sampled.features.log_probs is None:
        raise ValueError("sampled detections must carry log_probs")


def _add_score_terms(grad: np.ndarray, field: FeatureField, sampled: SampledDetections, coef: np.ndarray) -> None:
    """grad += sum_i coef_i * d log P(feature i) / d heatmap, restricted to each feature's cell."""
    if len(coef) == 0:
        return
    grid = sampled.grid
    h = grid.cell_size
    cells = sampled.cells
    logits = grid.blocks(field.heatmap)[cells]
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    soft = z / z.sum(axis=1, keepdims=True)
    block = -coef[:, None] * soft
    xy = sampled.features.xy
    local = (xy[:, 1] % h) * h + xy[:, 0] % h
    rows = np.arange(len(cells))
    block[rows, local] += coef * (2.0 - sigmoid(logits[rows, local]))
    for blk, cell in zip(block, cells):
        y0, y1, x0, x1 = _cell_bounds(grid, cell)
        grad[y0:y1, x0:x1] += blk.reshape(h, h)[: y1 - y0, : x1 - x0]


def _cell_bounds(grid, cell):
    h = grid.cell_size
    r, c = divmod(int(cell), grid.cols)
    return r * h, min((r + 1) * h, grid.height), c * h, min((c + 1) * h, grid.width)


def _raw_at(field: FeatureField, sampled: SampledDetections) -> np.ndarray:
    xy = sampled.features.xy
    return field.descriptors[xy[:, 1], xy[:, 0]]


def _labels_and_rewards(sa, sb, scene, views, cfg, rewards):
    if rewards is not None:
        rewards = np.asarray(rewards, dtype=np.float64)
        if rewards.shape != (len(sa.features), len(sb.features)):
            raise ValueError("reward matrix shape does not match the sampled sets")
        return None, rewards
    labels = classify_pairs(scene, views[0], views[1], sa.features.xy, sb.features.xy, cfg.epsilon)
    return labels, np.array([cfg.lambda_tp, 0.0, cfg.lambda_fp])[labels]


def _accumulate_pair(acc, slot_a, slot_b, field_a, field_b, sa, sb, labels, rewards, theta_m):
    """Add the matching term of one pair to ``acc`` (keypoint penalty excluded)."""
    if len(sa.features) == 0 or len(sb.features) == 0:
        return
    value, probs, g_a, g_b, g_theta = match_gradients(_raw_at(field_a, sa), _raw_at(field_b, sb), rewards, theta_m)
    xy_a, xy_b = sa.features.xy, sb.features.xy
    # sampled pixels within one image are distinct, so fancy-index += does not drop updates
    acc.d_descriptors[slot_a][xy_a[:, 1], xy_a[:, 0]] += g_a
    acc.d_descriptors[slot_b][xy_b[:, 1], xy_b[:, 0]] += g_b
    acc.d_theta_m += g_theta
    acc.expected_reward += value

    weighted = probs * rewards
    _add_score_terms(acc.d_heatmap[slot_a], field_a, sa, weighted.sum(axis=1))
    _add_score_terms(acc.d_heatmap[slot_b], field_b, sb, weighted.sum(axis=0))

    if labels is None:
        labels = np.select([rewards > 0, rewards == 0], [MatchLabel.CORRECT, MatchLabel.PLAUSIBLE], MatchLabel.INCORRECT)
    for name, label in (("correct", MatchLabel.CORRECT), ("plausible", MatchLabel.PLAUSIBLE), ("incorrect", MatchLabel.INCORRECT)):
        acc.counts[name] += float(probs[labels == label].sum())


def _accumulate_penalty(acc, slot, field, sampled, lambda_kp):
    k = len(sampled.features)
    acc.counts["keypoints"] += k
    if lambda_kp == 0.0 or k == 0:
        return
    acc.expected_reward += lambda_kp * k
    _add_score_terms(acc.d_heatmap[slot], field, sampled, np.full(k, float(lambda_kp)))


def pair_gradient(
    field_a: FeatureField,
    field_b: FeatureField,
    sampled_a: SampledDetections,
    sampled_b: SampledDetections,
    scene: Scene,
    theta_m: float,
    cfg: RewardConfig,
    views=(0, 1),
    rewards: np.ndarray | None = None,
) -> GradientAccumulator:
    """Gradient estimate for one image pair; slot 0 of the result is A, slot 1 is B.

    ``views`` selects which scene views A and B are.  ``rewards`` overrides the
    geometric reward matrix when given.
    """
    _check_sampled(sampled_a)
    _check_sampled(sampled_b)
    labels, rewards = _labels_and_rewards(sampled_a, sampled_b, scene, views, cfg, rewards)
    acc = GradientAccumulator.zeros([field_a, field_b])
    _accumulate_pair(acc, 0, 1, field_a, field_b, sampled_a, sampled_b, labels, rewards, theta_m)
    _accumulate_penalty(acc, 0, field_a, sampled_a, cfg.lambda_kp)
    _accumulate_penalty(acc, 1, field_b, sampled_b, cfg.lambda_kp)
    return acc


TRIPLET_PAIRS = ((0, 1), (0, 2), (1, 2))


def triplet_gradient(fields, sampled, scene: Scene, theta_m: float, cfg: RewardConfig) -> GradientAccumulator:
    """Sum of the pair estimates over A-B, A-C and B-C, reduced in that fixed order.

    ``fields`` is either one shared :class:`FeatureField` or one per view.  The
    keypoint penalty is charged once per sampled keypoint per image, not once
    per pair the image takes part in.
    """
    if len(scene.views) < 3 or len(sampled) < 3:
        raise ValueError("triplet gradient needs three views")
    if isinstance(fields, FeatureField):
        fields = [fields] * 3
    fields = list(fields)[:3]
    for s in sampled:
        _check_sampled(s)
    acc = GradientAccumulator.zeros(fields)
    for va, vb in TRIPLET_PAIRS:
        labels, rewards = _labels_and_rewards(sampled[va], sampled[vb], scene, (va, vb), cfg, None)
        _accumulate_pair(acc, va, vb, fields[va], fields[vb], sampled[va], sampled[vb], labels, rewards, theta_m)
    for v in range(3):
        _accumulate_penalty(acc, v, fields[v], sampled[v], cfg.lambda_kp)
    return acc


# ---------------------------------------------------------------------------
# Finite-difference harness
# ---------------------------------------------------------------------------


def _match_objective(raw_a: np.ndarray, raw_b: np.ndarray, rewards: np.ndarray, theta_m) -> float:
    """sum_ij P(i<->j) r_ij evaluated in extended precision for differencing."""
    a = np.asarray(raw_a, dtype=np.longdouble)
    b = np.asarray(raw_b, dtype=np.longdouble)
    theta = np.longdouble(theta_m)
    u = a / np.sqrt(np.sum(a * a, axis=1, keepdims=True))
    w = b / np.sqrt(np.sum(b * b, axis=1, keepdims=True))
    diff = u[:, None, :] - w[None, :, :]
    logits = -theta * np.sqrt(np.sum(diff * diff, axis=2))
    fwd = np.exp(logits - logits.max(axis=1, keepdims=True))
    fwd /= fwd.sum(axis=1, keepdims=True)
    rev = np.exp(logits - logits.max(axis=0, keepdims=True))
    rev /= rev.sum(axis=0, keepdims=True)
    return np.sum(fwd * rev * np.asarray(rewards, dtype=np.longdouble))


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def random_pair_instance(size: int, n: int, features: int, seed: int, h: int = 4, theta_m: float | None = None):
    """A random field pair with fixed sampled sets and a random reward matrix.

    Features sit in distinct grid cells so the sets are valid samples.
    Returns ``(field_a, field_b, sampled_a, sampled_b, rewards, theta_m)``.
    """
    grid = partition_grid(size, size, h)
    if features > grid.n_cells:
        raise ValueError(f"{features} features need at least that many cells, grid has {grid.n_cells}")
    rng = np.random.default_rng(seed)
    if theta_m is None:
        theta_m = float(rng.uniform(1.0, 50.0))
    fields = [init_field(size, size, n, seed=int(rng.integers(2**31))) for _ in range(2)]
    sampled = []
    for f in fields:
        cells = np.sort(rng.choice(grid.n_cells, size=features, replace=False))
        blocks = grid.blocks(f.heatmap)
        kps, logp, xs, ys = [], [], [], []
        for c in cells:
            y0, y1, x0, x1 = grid.cells[c]
            x, y = int(rng.integers(x0, x1)), int(rng.integers(y0, y1))
            local = (y - y0) * h + (x - x0)
            logp.append(float(log_softmax(blocks[c])[local] + log_sigmoid(f.heatmap[y, x])))
            kps.append(Keypoint(x, y, float(f.heatmap[y, x])))
            xs.append(x)
            ys.append(y)
        desc = normalize(f.descriptors[np.array(ys), np.array(xs)])
        sampled.append(SampledDetections(FeatureSet(kps, desc, np.array(logp)), cells, 0, grid))
    rewards = rng.choice([1.0, 0.0, -0.25], size=(features, features))
    return fields[0], fields[1], sampled[0], sampled[1], rewards, theta_m


def check_pair_gradient(field_a, field_b, sampled_a, sampled_b, rewards, theta_m, step: float = 1e-5) -> dict:
    """Compare pair_gradient's descriptor and theta_m gradients with central differences.

    The objective is differenced in extended precision so the check is
    limited by the step, not by float64 rounding of small match probabilities.
    """
    cfg = RewardConfig(lambda_kp=0.0)
    acc = pair_gradient(field_a, field_b, sampled_a, sampled_b, None, theta_m, cfg, rewards=rewards)
    raw_a, raw_b = _raw_at(field_a, sampled_a), _raw_at(field_b, sampled_b)
    xy_a, xy_b = sampled_a.features.xy, sampled_b.features.xy

    num_a = np.zeros_like(raw_a)
    num_b = np.zeros_like(raw_b)
    for raw, num in ((raw_a, num_a), (raw_b, num_b)):
        for idx in np.ndindex(raw.shape):
            orig = raw[idx]
            raw[idx] = orig + step
            up = _match_objective(raw_a, raw_b, rewards, theta_m)
            raw[idx] = orig - step
            down = _match_objective(raw_a, raw_b, rewards, theta_m)
            raw[idx] = orig
            num[idx] = float((up - down) / (2 * np.longdouble(step)))
    num_theta = float(
        (_match_objective(raw_a, raw_b, rewards, np.longdouble(theta_m) + step)
         - _match_objective(raw_a, raw_b, rewards, np.longdouble(theta_m) - step))
        / (2 * np.longdouble(step))
    )

    ana_a = acc.d_descriptors[0][xy_a[:, 1], xy_a[:, 0]]
    ana_b = acc.d_descriptors[1][xy_b[:, 1], xy_b[:, 0]]
    err_desc = _relative_errors(np.concatenate([ana_a.ravel(), ana_b.ravel()]), np.concatenate([num_a.ravel(), num_b.ravel()]))
    err_theta = _relative_errors([acc.d_theta_m], [num_theta])
    return {
        "step": step,
        "theta_m": float(theta_m),
        "features": [len(sampled_a.features), len(sampled_b.features)],
        "descriptors": {"max_rel_err": float(err_desc.max()), "mean_rel_err": float(err_desc.mean()), "count": int(err_desc.size)},
        "theta_m_grad": {"analytic": acc.d_theta_m, "numeric": num_theta, "rel_err": float(err_theta[0])},
        "max_rel_err": float(max(err_desc.max(), err_theta[0])),
    }
