"""Command-line entry point: ``disk detect|match|gradcheck|train|eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  ``DISK_THREADS``
caps BLAS/OpenMP threads (0 or unset = library default).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .detection import detect_argmax, detect_nms, load_features, partition_grid, save_features, subsample_by_score
from .field import FieldFormatError, load_field, save_field
from .geometry import generate_toy_scene, load_scene, save_scene
from .gradient import RewardConfig, check_pair_gradient, random_pair_instance
from .matching import MatchDistribution, MatchSet, distance_matrix, match_inference, save_matches
from .trainer import EVAL_MODES, NonFiniteGradientError, TrainConfig, evaluate_matches, train_toy

log = logging.getLogger("disk_features")

CSV_COLUMNS = [
    "step",
    "expected_reward",
    "theta_m",
    "lambda_fp_eff",
    "lambda_kp_eff",
    "n_keypoints",
    "precision",
    "recall",
    "mean_reproj_err",
]

GRADCHECK_TOLERANCE = 1e-3


class UsageError(Exception):
    """Flag combination that argparse cannot reject on its own."""


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=False))


def _thread_limit():
    raw = os.environ.get("DISK_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DISK_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("DISK_THREADS must be >= 0")
    if n == 0:
        return nullcontext()
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_detect(args) -> int:
    field = load_field(args.field)
    if args.mode == "grid":
        feats = detect_argmax(field, partition_grid(field.height, field.width, args.h))
    else:
        feats = detect_nms(field, args.nms_radius, args.nms_threshold)
    if args.budget is not None:
        feats = subsample_by_score(feats, args.budget)
    save_features(feats, args.out, field.width, field.height)
    print(f"{len(feats)} keypoints -> {args.out}")
    return 0


def cmd_match(args) -> int:
    fa, _, _ = load_features(args.features_a)
    fb, _, _ = load_features(args.features_b)
    if fa.dim != fb.dim:
        raise ValueError(f"descriptor dimensions differ: {fa.dim} vs {fb.dim}")
    dist = distance_matrix(fa, fb)
    if args.probabilistic:
        if 0 in dist.shape:
            probs = np.zeros(dist.shape)
        else:
            probs = MatchDistribution(dist, args.theta_m).probs()
        i, j = np.nonzero(probs >= args.min_prob)
        matches = MatchSet(np.stack([i, j], axis=1), probs[i, j])
        save_matches(matches, args.out, theta_m=args.theta_m)
    else:
        matches = match_inference(dist, args.ratio)
        save_matches(matches, args.out, ratio_threshold=args.ratio)
    print(f"{len(matches)} matches -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.size < 2 * args.h:
        raise UsageError(f"--size must be at least 2*h = {2 * args.h}")
    if args.step <= 1e-9:
        warnings.warn(
            f"step {args.step:g} is small enough that cancellation in the central difference "
            "may dominate the error",
            RuntimeWarning,
            stacklevel=1,
        )
    instance = random_pair_instance(args.size, args.n, args.features, args.seed, h=args.h, theta_m=args.theta_m)
    report = check_pair_gradient(*instance, step=args.step)
    report["instance"] = {"size": args.size, "n": args.n, "h": args.h, "seed": args.seed}
    report["tolerance"] = GRADCHECK_TOLERANCE
    report["passed"] = report["max_rel_err"] < GRADCHECK_TOLERANCE
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0 if report["passed"] else 1


def _train_config(args) -> TrainConfig:
    rewards = RewardConfig(args.lambda_tp, args.lambda_fp, args.lambda_kp, args.epsilon)
    return TrainConfig(
        steps=args.steps,
        lr=args.lr,
        heatmap_lr=args.heatmap_lr,
        adam_beta1=args.adam_beta1,
        adam_beta2=args.adam_beta2,
        adam_eps=args.adam_eps,
        h=args.h,
        n=args.n,
        rewards=rewards,
        anneal_steps=args.anneal_steps,
        theta_m_start=args.theta_m_start,
        theta_m_end=args.theta_m_end,
        theta_m_ramp_steps=args.theta_m_ramp_steps,
        seed=args.seed,
        shared_field=args.shared_field,
        eval_interval=args.eval_interval,
        eval_mode=args.eval_mode,
        nms_radius=args.nms_radius,
        nms_threshold=args.nms_threshold,
        ratio_threshold=args.ratio,
        eval_samples=args.eval_samples,
        dump_dir=Path(args.dump_dir) if args.dump_dir else Path(args.out_dir),
    )


def _csv_value(v):
    return "" if v is None or (isinstance(v, float) and not np.isfinite(v)) else v


def cmd_train(args) -> int:
    try:
        cfg = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_toy_scene(
        args.scene_kind, args.height, args.width, args.baseline, args.depth_mask, seed=args.seed, n_views=args.views
    )
    save_scene(scene, out / "scene.json")

    t0 = time.perf_counter()
    try:
        result = train_toy(scene, cfg)
    except NonFiniteGradientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - t0

    manifests = [str(save_field(f, out / f"field_{k}.json").name) for k, f in enumerate(result.fields)]
    with open(out / "train.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rep in result.history:
            d = rep.to_dict()
            writer.writerow([_csv_value(d[c]) for c in CSV_COLUMNS])

    config = asdict(cfg)
    config["dump_dir"] = str(cfg.dump_dir)
    summary = {
        "config": config,
        "scene": {"kind": args.scene_kind, "height": args.height, "width": args.width, "baseline": args.baseline,
                  "depth_mask": args.depth_mask, "views": args.views},
        "fields": manifests,
        "runtime_s": elapsed,
        "initial": result.history[0].to_dict() if result.history else None,
        "final": result.history[-1].to_dict() if result.history else None,
    }
    _write_json(out / "summary.json", _json_safe(summary))
    final = summary["final"]
    if final is not None:
        print(
            f"step {final['step']}: expected reward {final['expected_reward']:.4f}, "
            f"precision {final['precision']:.3f}, recall {final['recall']:.3f} ({elapsed:.1f} s)"
        )
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    fields = [load_field(p) for p in args.fields]
    if len(fields) == 1:
        fields = fields[0]
    elif len(fields) != len(scene.views):
        raise ValueError(f"{len(fields)} fields given for a {len(scene.views)}-view scene")
    report = evaluate_matches(
        fields,
        scene,
        args.mode,
        args.ratio,
        args.epsilon,
        args.h,
        args.nms_radius,
        nms_threshold=args.nms_threshold,
    )
    doc = _json_safe(report.to_dict())
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _detect_flags(p, default_mode="nms"):
    p.add_argument("--mode", choices=EVAL_MODES, default=default_mode, help="detection mode (default: %(default)s)")
    p.add_argument("--h", type=int, default=8, help="grid cell size in pixels (default: %(default)s)")
    p.add_argument("--nms-radius", type=int, default=2, help="NMS Chebyshev radius (default: %(default)s)")
    p.add_argument(
        "--nms-threshold", type=float, default=0.0, help="NMS keeps maxima with logit above this (default: %(default)s)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect keypoints on a saved field")
    p.add_argument("field", help="field manifest (JSON)")
    _detect_flags(p)
    p.add_argument("--budget", type=int, default=None, help="keep only the highest-scoring features")
    p.add_argument("--out", required=True, help="output feature file (JSON)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("match", help="match two feature files")
    p.add_argument("features_a")
    p.add_argument("features_b")
    p.add_argument("--theta-m", type=float, default=50.0, help="inverse temperature (default: %(default)s)")
    p.add_argument("--ratio", type=float, default=0.95, help="ratio-test threshold (default: %(default)s)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--probabilistic", action="store_true", help="dump P(i<->j) for all pairs above --min-prob")
    mode.add_argument("--inference", action="store_true", help="mutual NN + ratio test (default)")
    p.add_argument("--min-prob", type=float, default=1e-4, help="probability floor for --probabilistic (default: %(default)s)")
    p.add_argument("--out", required=True, help="output match file (JSON)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("gradcheck", help="compare the exact gradient with finite differences")
    p.add_argument("--size", type=int, default=8, help="field side in pixels (default: %(default)s)")
    p.add_argument("--n", type=int, default=4, help="descriptor dimension (default: %(default)s)")
    p.add_argument("--h", type=int, default=4, help="grid cell size (default: %(default)s)")
    p.add_argument("--features", type=int, default=3, help="sampled features per image (default: %(default)s)")
    p.add_argument("--theta-m", type=float, default=None, help="inverse temperature (default: random in [1, 50])")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step (default: %(default)s)")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train feature fields on a synthetic scene")
    p.add_argument("--scene-kind", choices=("fronto_planar", "tilted_plane"), default="fronto_planar")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--baseline", type=float, default=0.1)
    p.add_argument("--depth-mask", type=float, default=0.0, help="fraction of pixels without depth")
    p.add_argument("--views", type=int, choices=(2, 3), default=2)
    d = TrainConfig()
    r = RewardConfig()
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--lr", type=float, default=d.lr, help="ADAM step size (default: %(default)s)")
    p.add_argument("--heatmap-lr", type=float, default=None, help="ADAM step size for the heatmap (default: --lr)")
    p.add_argument("--adam-beta1", type=float, default=d.adam_beta1)
    p.add_argument("--adam-beta2", type=float, default=d.adam_beta2)
    p.add_argument("--adam-eps", type=float, default=d.adam_eps)
    p.add_argument("--h", type=int, default=d.h, help="grid cell size (default: %(default)s)")
    p.add_argument("--n", type=int, default=d.n, help="descriptor dimension (default: %(default)s)")
    p.add_argument("--lambda-tp", type=float, default=r.lambda_tp)
    p.add_argument("--lambda-fp", type=float, default=r.lambda_fp)
    p.add_argument("--lambda-kp", type=float, default=r.lambda_kp)
    p.add_argument("--epsilon", type=float, default=r.epsilon, help="reward pixel threshold (default: %(default)s)")
    p.add_argument("--anneal-steps", type=int, default=None, help="default: steps // 6")
    p.add_argument("--theta-m-start", type=float, default=d.theta_m_start)
    p.add_argument("--theta-m-end", type=float, default=d.theta_m_end)
    p.add_argument("--theta-m-ramp-steps", type=int, default=None, help="default: steps // 2")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--shared-field", action="store_true", help="one field for all views")
    p.add_argument("--eval-interval", type=int, default=d.eval_interval)
    p.add_argument("--eval-mode", choices=EVAL_MODES, default=d.eval_mode)
    p.add_argument("--nms-radius", type=int, default=d.nms_radius)
    p.add_argument("--nms-threshold", type=float, default=d.nms_threshold)
    p.add_argument("--ratio", type=float, default=d.ratio_threshold)
    p.add_argument("--eval-samples", type=int, default=d.eval_samples, help="feature resamples per reward estimate")
    p.add_argument("--dump-dir", default=None, help="where non-finite gradient dumps go (default: --out-dir)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved fields on a saved scene")
    p.add_argument("--fields", nargs="+", required=True, help="one shared field manifest or one per view")
    p.add_argument("--scene", required=True, help="scene manifest (JSON)")
    _detect_flags(p)
    p.add_argument("--ratio", type=float, default=0.95)
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, FieldFormatError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
