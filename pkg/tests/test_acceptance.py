"""Acceptance criteria, one check each.

Runs under pytest (the pass/fail lines are repeated in the terminal summary)
or standalone::

    python tests/test_acceptance.py

Every tolerance, sample count and runtime bound below is fixed by the
acceptance criteria and must not be relaxed to make a check pass.
"""

from __future__ import annotations

import functools
import sys
import time

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

import oracles
from disk_features.detection import partition_grid, sample_features
from disk_features.field import FeatureField
from disk_features.geometry import MatchLabel, classify_pairs, generate_toy_scene
from disk_features.gradient import RewardConfig, pair_gradient, random_pair_instance
from disk_features.matching import MatchDistribution, expected_reward, match_inference
from disk_features.trainer import TrainConfig, evaluate_matches, train_toy

# --- pinned tolerances ----------------------------------------------------
C1_INSTANCES = 20
C1_REL_TOL = 1e-4
C1_ABS_FLOOR = 1e-8
C1_STEP = 1e-5
C1_SECONDS = 10.0
C2_MATRICES = 200
C2_THETAS = (0.5, 1.0, 5.0)
C2_REL_TOL = 1e-9
C2_SECONDS = 30.0
C3_REPEATS = 10
C4_DRAWS = 100_000
C4_ALPHA = 0.001
C4_SECONDS = 5.0
C5_EVALS = 100_000
C5_SE = 3.0
C5_SECONDS = 60.0
C6_PRECISION = 0.9
C6_EPSILON = 2.0
C6_RATIO = 0.95
C6_SECONDS = 300.0
C7_EPSILON = 1.0
C8_MATRICES = 1000
C8_MAX_SIZE = 50
C8_THRESHOLDS = (1.0, 0.95, 0.8, 0.5)
C9_PRECISION_GAP = 0.05

# Toy-run configuration.  The fields are raw per-pixel parameters, so the
# ADAM step has to be far larger than a network's; NMS keeps only maxima
# whose logit clears the threshold (see README, "Toy training run").
TOY_LR = 0.03
TOY_NMS_THRESHOLD = 8.0


def _line(num: int, name: str, ok: bool, detail: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1. exact gradient vs finite differences
# ---------------------------------------------------------------------------


def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(C1_INSTANCES):
        size = 8 + (3 * s) % 9
        n = (4, 8)[s % 2]
        k = 2 + s % 5
        fa, fb, sa, sb, rewards, theta = random_pair_instance(size, n, k, seed=1000 + s, h=2)
        acc = pair_gradient(fa, fb, sa, sb, None, theta, RewardConfig(lambda_kp=0.0), rewards=rewards)
        xy_a, xy_b = sa.features.xy, sb.features.xy
        raw_a = fa.descriptors[xy_a[:, 1], xy_a[:, 0]].copy()
        raw_b = fb.descriptors[xy_b[:, 1], xy_b[:, 0]].copy()

        step = np.longdouble(C1_STEP)
        numeric, analytic = [], []
        for raw, grad, xy in ((raw_a, acc.d_descriptors[0], xy_a), (raw_b, acc.d_descriptors[1], xy_b)):
            for idx in np.ndindex(raw.shape):
                orig = raw[idx]
                raw[idx] = orig + C1_STEP
                up = oracles.match_objective_ld(raw_a, raw_b, rewards, theta)
                raw[idx] = orig - C1_STEP
                down = oracles.match_objective_ld(raw_a, raw_b, rewards, theta)
                raw[idx] = orig
                numeric.append(float((up - down) / (2 * step)))
                i, c = idx
                analytic.append(grad[xy[i, 1], xy[i, 0], c])
        up = oracles.match_objective_ld(raw_a, raw_b, rewards, np.longdouble(theta) + step)
        down = oracles.match_objective_ld(raw_a, raw_b, rewards, np.longdouble(theta) - step)
        numeric.append(float((up - down) / (2 * step)))
        analytic.append(acc.d_theta_m)

        a, b = np.array(analytic), np.array(numeric)
        rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), C1_ABS_FLOOR)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < C1_REL_TOL and elapsed < C1_SECONDS
    return ok, f"{C1_INSTANCES} instances, max rel err {worst:.2e} (< {C1_REL_TOL:g}), {elapsed:.1f} s (< {C1_SECONDS:g})"


# ---------------------------------------------------------------------------
# 2. closed-form expected reward vs enumeration
# ---------------------------------------------------------------------------


def criterion_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(C2_MATRICES):
        rows, cols = rng.integers(1, 4, size=2)
        d = rng.integers(0, 21, size=(rows, cols)) * 0.1
        r = rng.normal(size=(rows, cols))
        for theta in C2_THETAS:
            got = expected_reward(MatchDistribution(d, theta), r)
            want = oracles.brute_force_expected_reward(d, theta, r)
            worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    elapsed = time.perf_counter() - t0
    ok = worst < C2_REL_TOL and elapsed < C2_SECONDS
    return ok, f"{C2_MATRICES} matrices x {len(C2_THETAS)} thetas, max rel err {worst:.2e} (< {C2_REL_TOL:g}), {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 3. zero-variance matching term
# ---------------------------------------------------------------------------


def criterion_3():
    scene = generate_toy_scene("fronto_planar", 16, 16, 0.1, 0.2, seed=3)
    grid = partition_grid(16, 16, 4)
    rng = np.random.default_rng(3)
    fields = [FeatureField(rng.normal(0, 1, (16, 16)), rng.normal(size=(16, 16, 8))) for _ in range(2)]
    sa, sb = (sample_features(f, grid, rng) for f in fields)

    def snapshot():
        acc = pair_gradient(fields[0], fields[1], sa, sb, scene, 20.0, RewardConfig())
        blocks = acc.d_heatmap + acc.d_descriptors + [np.array([acc.d_theta_m, acc.expected_reward])]
        return b"".join(b.tobytes() for b in blocks)

    first = snapshot()
    same = all(snapshot() == first for _ in range(C3_REPEATS - 1))
    return same, f"{C3_REPEATS} calls on fixed samples ({len(sa.features)}x{len(sb.features)}) byte-identical: {same}"


# ---------------------------------------------------------------------------
# 4. sampling fidelity
# ---------------------------------------------------------------------------


def criterion_4():
    logits = np.array([[0.5, -0.3], [1.2, 0.0]])
    field = FeatureField(logits, np.ones((2, 2, 1)))
    grid = partition_grid(2, 2, 2)
    rng = np.random.default_rng(4)
    counts = np.zeros(5)  # four pixels (row-major) + no feature
    t0 = time.perf_counter()
    for _ in range(C4_DRAWS):
        s = sample_features(field, grid, rng)
        if len(s.features):
            x, y = s.features.xy[0]
            counts[y * 2 + x] += 1
        else:
            counts[4] += 1
    elapsed = time.perf_counter() - t0
    expected = np.array([p for _, p in oracles.cell_outcomes(logits)]) * C4_DRAWS
    pvalue = stats.chisquare(counts, expected).pvalue
    ok = pvalue > C4_ALPHA and elapsed < C4_SECONDS
    return ok, f"chi2 p = {pvalue:.3f} (> {C4_ALPHA:g}) over {C4_DRAWS} draws, {elapsed:.1f} s (< {C4_SECONDS:g})"


# ---------------------------------------------------------------------------
# 5. score-function estimator consistency
# ---------------------------------------------------------------------------


def criterion_5():
    """One 2x2 cell per image (two cells in total, 25 joint outcomes)."""
    rng = np.random.default_rng(5)
    fields = [FeatureField(rng.normal(0, 0.7, (2, 2)), rng.normal(size=(2, 2, 4))) for _ in range(2)]
    table = rng.choice([1.0, 0.0, -0.25], size=(4, 4))
    cfg = RewardConfig(lambda_kp=-0.05)
    theta = 20.0
    grid = partition_grid(2, 2, 2)

    def reward_of(pa, pb):
        return table[pa[1] * 2 + pa[0], pb[1] * 2 + pb[0]]

    def expectation(heat_a, heat_b):
        return oracles.full_expectation(
            heat_a, heat_b, fields[0].descriptors, fields[1].descriptors, 2, reward_of, theta, cfg.lambda_kp
        )

    step = 1e-5
    fd = np.zeros(8)
    for k in range(8):
        heats = [fields[0].heatmap.copy(), fields[1].heatmap.copy()]
        view, pix = divmod(k, 4)
        y, x = divmod(pix, 2)
        heats[view][y, x] += step
        up = expectation(*heats)
        heats[view][y, x] -= 2 * step
        down = expectation(*heats)
        fd[k] = (up - down) / (2 * step)

    t0 = time.perf_counter()
    total = np.zeros(8)
    total_sq = np.zeros(8)
    for _ in range(C5_EVALS):
        sa = sample_features(fields[0], grid, rng)
        sb = sample_features(fields[1], grid, rng)
        ia = [y * 2 + x for x, y in sa.features.xy]
        ib = [y * 2 + x for x, y in sb.features.xy]
        acc = pair_gradient(fields[0], fields[1], sa, sb, None, theta, cfg, rewards=table[np.ix_(ia, ib)])
        g = np.concatenate([acc.d_heatmap[0].ravel(), acc.d_heatmap[1].ravel()])
        total += g
        total_sq += g * g
    elapsed = time.perf_counter() - t0
    mean = total / C5_EVALS
    se = np.sqrt((total_sq / C5_EVALS - mean**2) / (C5_EVALS - 1))
    z = np.abs(mean - fd) / se
    ok = bool(np.all(z <= C5_SE)) and elapsed < C5_SECONDS
    return ok, f"max |mean - fd| = {z.max():.2f} SE (<= {C5_SE:g}) over {C5_EVALS} evaluations, {elapsed:.1f} s (< {C5_SECONDS:g})"


# ---------------------------------------------------------------------------
# 6 and 9. toy training
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=1)
def trained_toy():
    scene = generate_toy_scene("fronto_planar", 64, 64, 0.1, 0.0, seed=0)
    cfg = TrainConfig(
        steps=2000, lr=TOY_LR, n=8, h=8, seed=0, ratio_threshold=C6_RATIO, nms_threshold=TOY_NMS_THRESHOLD,
        eval_mode="nms",
    )
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        result = train_toy(scene, cfg)
    return scene, cfg, result, time.perf_counter() - t0


def criterion_6():
    scene, cfg, result, elapsed = trained_toy()
    first, last = result.history[0], result.history[-1]
    # rescore the final fields independently of the trainer's own report
    final = evaluate_matches(
        result.fields, scene, "nms", C6_RATIO, C6_EPSILON, cfg.h, cfg.nms_radius, nms_threshold=cfg.nms_threshold
    )
    ok = (
        final.precision >= C6_PRECISION
        and not final.zero_matches
        and last.expected_reward > first.expected_reward
        and elapsed < C6_SECONDS
    )
    return ok, (
        f"NMS precision {final.precision:.3f} (>= {C6_PRECISION}) on {final.n_matches} matches, "
        f"expected reward {first.expected_reward:.3f} -> {last.expected_reward:.3f}, {elapsed:.1f} s (< {C6_SECONDS:g})"
    )


def criterion_9():
    scene, cfg, result, _ = trained_toy()
    nms = evaluate_matches(
        result.fields, scene, "nms", C6_RATIO, C6_EPSILON, cfg.h, cfg.nms_radius, nms_threshold=cfg.nms_threshold
    )
    grid = evaluate_matches(result.fields, scene, "grid", C6_RATIO, C6_EPSILON, cfg.h)
    more = all(n >= g for n, g in zip(nms.n_detected, grid.n_detected))
    gap = abs(nms.precision - grid.precision)
    ok = more and gap <= C9_PRECISION_GAP
    return ok, (
        f"keypoints NMS {nms.n_detected} vs grid {grid.n_detected}, "
        f"precision NMS {nms.precision:.3f} vs grid {grid.precision:.3f} (gap <= {C9_PRECISION_GAP})"
    )


# ---------------------------------------------------------------------------
# 7. geometry oracle
# ---------------------------------------------------------------------------

_PLANES = {
    "fronto_planar": np.array([0.0, 0.0, 1.0]),
    "tilted_plane": np.array([np.sin(np.radians(25)), 0.0, np.cos(np.radians(25))]),
}


def _analytic_correspondence(view_a, view_b, normal, x, y):
    """Ray-plane intersection from A (at the world origin) projected into B."""
    ray = np.linalg.solve(view_a.k, [x, y, 1.0])
    lam = normal @ np.array([0.0, 0.0, 1.0]) / (normal @ ray)
    return oracles.pinhole(view_b.k, view_b.r @ (lam * ray) + view_b.t)


def criterion_7():
    counts = {"correct": [0, 0], "plausible": [0, 0], "incorrect": [0, 0]}
    rng = np.random.default_rng(7)
    for kind, normal in _PLANES.items():
        for seed in (0, 1):
            scene = generate_toy_scene(kind, 48, 64, 0.1, 0.3, seed=seed)
            va, vb = scene.views
            valid_a, valid_b = va.depth > 0, vb.depth > 0
            for y in range(scene.height):
                for x in range(scene.width):
                    u, v = _analytic_correspondence(va, vb, normal, x, y)
                    xb, yb = int(round(u)), int(round(v))
                    if not (0 <= xb < scene.width and 0 <= yb < scene.height):
                        continue
                    both = valid_a[y, x] and valid_b[yb, xb]
                    label = classify_pairs(scene, 0, 1, [(x, y)], [(xb, yb)], C7_EPSILON)[0, 0]
                    key = "correct" if both else "plausible"
                    want = MatchLabel.CORRECT if both else MatchLabel.PLAUSIBLE
                    counts[key][0] += label == want
                    counts[key][1] += 1
                    if not both:
                        continue
                    # displace by more than 10 epsilon onto another valid-depth pixel
                    for _ in range(10):
                        ang = rng.uniform(0, 2 * np.pi)
                        dist = rng.uniform(10 * C7_EPSILON + 1, 10 * C7_EPSILON + 10)
                        xo, yo = int(round(u + dist * np.cos(ang))), int(round(v + dist * np.sin(ang)))
                        inside = 0 <= xo < scene.width and 0 <= yo < scene.height
                        if inside and valid_b[yo, xo] and np.hypot(xo - u, yo - v) > 10 * C7_EPSILON:
                            label = classify_pairs(scene, 0, 1, [(x, y)], [(xo, yo)], C7_EPSILON)[0, 0]
                            counts["incorrect"][0] += label == MatchLabel.INCORRECT
                            counts["incorrect"][1] += 1
                            break
    ok = all(good == total and total > 0 for good, total in counts.values())
    detail = ", ".join(f"{k} {g}/{t}" for k, (g, t) in counts.items())
    return ok, detail + f" at eps = {C7_EPSILON:g}"


# ---------------------------------------------------------------------------
# 8. inference matcher properties
# ---------------------------------------------------------------------------


def _mutual_nn_oracle(d):
    rows, cols = d.shape
    out = set()
    for i in range(rows):
        j = min(range(cols), key=lambda c: (d[i, c], c))
        if min(range(rows), key=lambda r: (d[r, j], r)) == i:
            out.add((i, j))
    return out


def criterion_8():
    rng = np.random.default_rng(8)
    bad_subset = bad_one_to_one = bad_monotone = 0
    for m in range(C8_MATRICES):
        rows, cols = rng.integers(1, C8_MAX_SIZE + 1, size=2)
        d = rng.uniform(0, 2, size=(rows, cols))
        if m % 4 == 0:
            d = np.round(d, 1)  # force ties now and then
        mnn = _mutual_nn_oracle(d)
        sizes = []
        for thr in C8_THRESHOLDS:
            ms = match_inference(d, thr)
            bad_subset += not ms.as_set() <= mnn
            bad_one_to_one += not ms.is_one_to_one()
            sizes.append(len(ms))
        bad_monotone += any(b > a for a, b in zip(sizes, sizes[1:]))
    ok = bad_subset == bad_one_to_one == bad_monotone == 0
    return ok, (
        f"{C8_MATRICES} matrices up to {C8_MAX_SIZE}x{C8_MAX_SIZE}: not-subset {bad_subset}, "
        f"not one-to-one {bad_one_to_one}, non-monotone {bad_monotone}"
    )


CRITERIA = {
    1: ("exact gradient", criterion_1),
    2: ("match enumeration", criterion_2),
    3: ("zero-variance matching term", criterion_3),
    4: ("sampling fidelity", criterion_4),
    5: ("score-function consistency", criterion_5),
    6: ("toy training", criterion_6),
    7: ("geometry oracle", criterion_7),
    8: ("inference matcher", criterion_8),
    9: ("grid vs NMS", criterion_9),
}


def _check(num, acceptance_log):
    name, fn = CRITERIA[num]
    ok, detail = fn()
    acceptance_log(_line(num, name, ok, detail))
    assert ok, detail


def test_criterion_1_exact_gradient(acceptance_log):
    _check(1, acceptance_log)


def test_criterion_2_match_enumeration(acceptance_log):
    _check(2, acceptance_log)


def test_criterion_3_zero_variance(acceptance_log):
    _check(3, acceptance_log)


def test_criterion_4_sampling_fidelity(acceptance_log):
    _check(4, acceptance_log)


def test_criterion_5_score_function_consistency(acceptance_log):
    _check(5, acceptance_log)


def test_criterion_6_toy_training(acceptance_log):
    _check(6, acceptance_log)


def test_criterion_7_geometry_oracle(acceptance_log):
    _check(7, acceptance_log)


def test_criterion_8_inference_matcher(acceptance_log):
    _check(8, acceptance_log)


def test_criterion_9_grid_vs_nms(acceptance_log):
    _check(9, acceptance_log)


if __name__ == "__main__":
    failures = 0
    for num, (name, fn) in CRITERIA.items():
        ok, detail = fn()
        failures += not ok
        print(_line(num, name, ok, detail), flush=True)
    sys.exit(1 if failures else 0)
