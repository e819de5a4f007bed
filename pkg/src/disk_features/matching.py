"""Descriptor matching: the relaxed cycle-consistent distribution and the inference matcher.

Given a distance matrix ``d`` between two feature sets, row ``i`` defines a
forward categorical ``softmax(-theta_m * d[i, :])`` over candidates in B and
column ``j`` a reverse categorical ``softmax(-theta_m * d[:, j])`` over
candidates in A.  A pair is matched when both draws agree, so its probability
is the product of the two factors and expected rewards are available in closed
form without sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import FeatureSet


@dataclass
class DistanceMatrix:
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if self.d.ndim != 2:
            raise ValueError("distance matrix must be 2-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)


def distance_matrix(fa: FeatureSet, fb: FeatureSet) -> DistanceMatrix:
    return DistanceMatrix(pairwise_distances(fa.descriptors, fb.descriptors))


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class MatchDistribution:
    dist: DistanceMatrix
    theta_m: float

    def __post_init__(self):
        if not isinstance(self.dist, DistanceMatrix):
            self.dist = DistanceMatrix(self.dist)
        if not self.theta_m > 0:
            raise ValueError(f"theta_m must be positive, got {self.theta_m}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dist.shape

    def forward(self) -> np.ndarray:
        """Row-stochastic P_{A->B}(j | i)."""
        if 0 in self.shape:
            return np.zeros(self.shape)
        return _softmax(-self.theta_m * self.dist.d, axis=1)

    def reverse(self) -> np.ndarray:
        """Column-stochastic P_{A<-B}(i | j)."""
        if 0 in self.shape:
            return np.zeros(self.shape)
        return _softmax(-self.theta_m * self.dist.d, axis=0)

    def probs(self) -> np.ndarray:
        """Exact P(i <-> j) for every pair."""
        return self.forward() * self.reverse()


def match_prob_pair(md: MatchDistribution, i: int, j: int) -> float:
    rows, cols = md.shape
    if not (0 <= i < rows and 0 <= j < cols):
        raise IndexError(f"pair ({i}, {j}) outside {rows}x{cols}")
    return float(md.probs()[i, j])


def expected_reward(md: MatchDistribution, rewards) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != md.shape:
        raise ValueError(f"reward matrix {rewards.shape} does not match distances {md.shape}")
    return float(np.sum(md.probs() * rewards))


@dataclass
class MatchSet:
    pairs: np.ndarray  # (k, 2) int: (index in A, index in B)
    probs: np.ndarray | None = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.pairs)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.pairs}

    def is_one_to_one(self) -> bool:
        return len(set(self.pairs[:, 0])) == len(self) and len(set(self.pairs[:, 1])) == len(self)


def sample_matches(md: MatchDistribution, rng: np.random.Generator) -> MatchSet:
    """Draw forward and reverse choices and keep the consistent pairs.

    Only used to validate :func:`expected_reward` by Monte Carlo.
    """
    rows, cols = md.shape
    if rows == 0 or cols == 0:
        return MatchSet(np.zeros((0, 2)))
    fwd_cdf = np.cumsum(md.forward(), axis=1)
    rev_cdf = np.cumsum(md.reverse(), axis=0)
    u_f = rng.random(rows)
    u_r = rng.random(cols)
    fwd = np.minimum((fwd_cdf < u_f[:, None]).sum(axis=1), cols - 1)
    rev = np.minimum((rev_cdf < u_r[None, :]).sum(axis=0), rows - 1)
    i = np.arange(rows)
    consistent = rev[fwd] == i
    return MatchSet(np.stack([i[consistent], fwd[consistent]], axis=1))


def mutual_nearest_neighbors(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if 0 in d.shape:
        return np.zeros((0, 2), dtype=np.int64)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    i = np.arange(d.shape[0])
    mutual = nn_ba[nn_ab] == i
    return np.stack([i[mutual], nn_ab[mutual]], axis=1)


def _ratio_ok(d: np.ndarray, ratio_threshold: float) -> np.ndarray:
    """Per-row ratio test: best / second-best <= threshold (rows with one entry pass)."""
    if d.shape[1] < 2:
        return np.ones(d.shape[0], dtype=bool)
    two = np.partition(d, 1, axis=1)[:, :2]
    best, second = two[:, 0], two[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = best / second
    # second == 0 means the best is tied at zero: ambiguous, always rejected
    return np.where(second > 0, ratio <= ratio_threshold, False)


def match_inference(dist, ratio_threshold: float = 0.95) -> MatchSet:
    """Mutual nearest neighbours filtered by a ratio test on both the row and the column."""
    if not 0 <= ratio_threshold <= 1:
        raise ValueError(f"ratio threshold must lie in [0, 1], got {ratio_threshold}")
    d = dist.d if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=np.float64)
    pairs = mutual_nearest_neighbors(d)
    if len(pairs) == 0:
        return MatchSet(pairs)
    row_ok = _ratio_ok(d, ratio_threshold)
    col_ok = _ratio_ok(d.T, ratio_threshold)
    keep = row_ok[pairs[:, 0]] & col_ok[pairs[:, 1]]
    return MatchSet(pairs[keep])


def save_matches(matches: MatchSet, path, theta_m=None, ratio_threshold=None) -> None:
    probs = matches.probs if matches.probs is not None else [None] * len(matches)
    doc = {
        "pairs": [{"i": int(i), "j": int(j), "p": None if p is None else float(p)} for (i, j), p in zip(matches.pairs, probs)],
        "theta_m": theta_m,
        "ratio_threshold": ratio_threshold,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_matches(path) -> MatchSet:
    doc = json.loads(Path(path).read_text())
    pairs = [(p["i"], p["j"]) for p in doc["pairs"]]
    ps = [p.get("p") for p in doc["pairs"]]
    probs = None if any(p is None for p in ps) or not ps else ps
    return MatchSet(np.array(pairs, dtype=np.int64).reshape(-1, 2), probs)
