"""Keypoint detection on a heatmap grid.

Training draws at most one feature per ``h x h`` cell: a proposal ``p`` is
sampled from the softmax of the cell logits and then accepted with
probability ``sigmoid(K[p])``.  Inference replaces softmax with argmax and the
sigmoid with a sign test, or uses non-maximum suppression over the whole map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .field import FeatureField, FeatureSet, Keypoint, normalize


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(log_sigmoid(x))


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    cell_size: int

    def __post_init__(self):
        if self.cell_size < 1:
            raise ValueError(f"cell size must be >= 1, got {self.cell_size}")
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be >= 1")

    @cached_property
    def rows(self) -> int:
        return math.ceil(self.height / self.cell_size)

    @cached_property
    def cols(self) -> int:
        return math.ceil(self.width / self.cell_size)

    @cached_property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @cached_property
    def cells(self) -> list[tuple[int, int, int, int]]:
        """Cells as ``(y0, y1, x0, x1)`` half-open ranges, row-major."""
        h = self.cell_size
        return [
            (r * h, min((r + 1) * h, self.height), c * h, min((c + 1) * h, self.width))
            for r in range(self.rows)
            for c in range(self.cols)
        ]

    def cell_of(self, x: int, y: int) -> int:
        return (y // self.cell_size) * self.cols + x // self.cell_size

    def blocks(self, grid: np.ndarray, fill: float = -np.inf) -> np.ndarray:
        """Reshape a (height, width) map to (n_cells, h*h), padding ragged cells with ``fill``."""
        h = self.cell_size
        if self.height % h == 0 and self.width % h == 0:
            padded = np.array(grid, dtype=np.float64)
        else:
            padded = np.full((self.rows * h, self.cols * h), fill, dtype=np.float64)
            padded[: self.height, : self.width] = grid
        return padded.reshape(self.rows, h, self.cols, h).transpose(0, 2, 1, 3).reshape(self.n_cells, h * h)

    def pixel_of(self, cell: np.ndarray, local: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map (cell index, index within padded cell block) to image (x, y)."""
        h = self.cell_size
        cell = np.asarray(cell)
        local = np.asarray(local)
        y = (cell // self.cols) * h + local // h
        x = (cell % self.cols) * h + local % h
        return x, y


def partition_grid(height: int, width: int, h: int = 8) -> GridSpec:
    return GridSpec(height, width, h)


def cell_probabilities(cell_logits) -> tuple[np.ndarray, np.ndarray]:
    """Return (select, accept) probabilities for every pixel of one cell.

    The joint probability of emitting a feature at ``p`` is
    ``select[p] * accept[p]``; the cell yields nothing with probability
    ``sum(select * (1 - accept))``.
    """
    logits = np.asarray(cell_logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty cell")
    flat = logits.reshape(-1)
    select = np.exp(log_softmax(flat)).reshape(logits.shape)
    accept = sigmoid(logits)
    return select, accept


@dataclass
class SampledDetections:
    features: FeatureSet
    cells: np.ndarray  # grid cell index for each feature
    proposals_rejected: int
    grid: GridSpec


def _check_dims(field: FeatureField, grid: GridSpec) -> None:
    if (field.height, field.width) != (grid.height, grid.width):
        raise ValueError(
            f"field is {field.height}x{field.width} but grid is {grid.height}x{grid.width}"
        )


def sample_features(field: FeatureField, grid: GridSpec, rng: np.random.Generator) -> SampledDetections:
    """Draw one proposal per cell and keep it with its sigmoid acceptance probability.

    Each emitted feature carries ``log softmax(cell)[p] + log sigmoid(K[p])``.
    """
    _check_dims(field, grid)
    logits = grid.blocks(field.heatmap)
    # every cell has at least one finite pixel, so the row max is finite
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp_select = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    # Gumbel-max draw; padded pixels stay at -inf and are never chosen.
    gumbel = rng.gumbel(size=logits.shape)
    local = np.argmax(logp_select + gumbel, axis=1)
    rows = np.arange(len(logits))
    chosen = logits[rows, local]
    logp_accept = log_sigmoid(chosen)
    accept = rng.random(len(rows)) < np.exp(logp_accept)

    cells = rows[accept]
    xs, ys = grid.pixel_of(cells, local[accept])
    scores = chosen[accept]
    log_probs = logp_select[rows, local][accept] + logp_accept[accept]
    keypoints = [Keypoint(int(x), int(y), float(s)) for x, y, s in zip(xs.tolist(), ys.tolist(), scores.tolist())]
    desc = normalize(field.descriptors[ys, xs]) if len(cells) else np.zeros((0, field.n))
    return SampledDetections(
        features=FeatureSet(keypoints, desc, log_probs),
        cells=cells,
        proposals_rejected=int(len(rows) - accept.sum()),
        grid=grid,
    )


def _feature_set(field: FeatureField, xs, ys) -> FeatureSet:
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    if xs.size == 0:
        return FeatureSet.empty(field.n)
    scores = field.heatmap[ys, xs]
    keypoints = [Keypoint(int(x), int(y), float(s)) for x, y, s in zip(xs, ys, scores)]
    return FeatureSet(keypoints, normalize(field.descriptors[ys, xs]))


def detect_argmax(field: FeatureField, grid: GridSpec) -> FeatureSet:
    """Inference-mode grid detection: argmax per cell, kept when its logit is positive."""
    _check_dims(field, grid)
    logits = grid.blocks(field.heatmap)
    local = np.argmax(logits, axis=1)  # first occurrence = smallest row-major index
    best = logits[np.arange(grid.n_cells), local]
    keep = best > 0
    xs, ys = grid.pixel_of(np.flatnonzero(keep), local[keep])
    return _feature_set(field, xs, ys)


def nms_mask(heatmap: np.ndarray, radius: int, score_threshold: float = 0.0) -> np.ndarray:
    """Boolean mask of pixels above ``score_threshold`` that survive suppression.

    A pixel is suppressed by any neighbour within Chebyshev distance
    ``radius`` that is larger, or equal and earlier in row-major order.
    The default threshold of 0 is the same sign gate as grid detection.
    """
    if radius < 1:
        raise ValueError(f"NMS radius must be >= 1, got {radius}")
    heat = np.asarray(heatmap, dtype=np.float64)
    hgt, wid = heat.shape
    r = min(radius, max(hgt, wid) - 1)
    padded = np.full((hgt + 2 * r, wid + 2 * r), -np.inf)
    padded[r : r + hgt, r : r + wid] = heat
    keep = heat > score_threshold
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            other = padded[r + dy : r + dy + hgt, r + dx : r + dx + wid]
            if dy < 0 or (dy == 0 and dx < 0):
                keep &= heat > other
            else:
                keep &= heat >= other
    return keep


def detect_nms(field: FeatureField, window_radius: int = 2, score_threshold: float = 0.0) -> FeatureSet:
    """Features at every local maximum of the heatmap above ``score_threshold`` (no grid constraint)."""
    ys, xs = np.nonzero(nms_mask(field.heatmap, window_radius, score_threshold))
    return _feature_set(field, xs, ys)


def subsample_by_score(features: FeatureSet, budget: int) -> FeatureSet:
    """Keep the ``budget`` highest-scoring features, preserving their original order."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if budget >= len(features):
        return features
    order = sorted(
        range(len(features)),
        key=lambda i: (-features.keypoints[i].score, features.keypoints[i].y, features.keypoints[i].x),
    )
    return features.subset(sorted(order[:budget]))


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def save_features(features: FeatureSet, path, width: int, height: int) -> None:
    doc = {
        "width": int(width),
        "height": int(height),
        "n": int(features.dim),
        "features": [
            {"x": k.x, "y": k.y, "score": k.score, "desc": [float(v) for v in d]}
            for k, d in zip(features.keypoints, features.descriptors)
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_features(path) -> tuple[FeatureSet, int, int]:
    """Load a feature file; returns ``(features, width, height)``."""
    doc = json.loads(Path(path).read_text())
    n = int(doc["n"])
    keypoints = [Keypoint(int(f["x"]), int(f["y"]), float(f["score"])) for f in doc["features"]]
    desc = np.array([f["desc"] for f in doc["features"]], dtype=np.float64).reshape(len(keypoints), n)
    return FeatureSet(keypoints, desc), int(doc["width"]), int(doc["height"])
