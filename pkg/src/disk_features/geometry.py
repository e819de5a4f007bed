"""Posed synthetic scenes and geometric labelling of matches.

Cameras follow ``X_cam = R @ X_world + t`` with pinhole intrinsics and
z-depth maps.  A depth value of 0 (or anything non-finite or negative) marks
a pixel without ground truth.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import read_tensor, write_tensor

BEHIND_EPS = 1e-9
ZERO_BASELINE = 1e-12


class ZeroBaselineError(ValueError):
    """The two cameras share a centre, so no epipolar geometry exists."""


class MatchLabel(enum.IntEnum):
    CORRECT = 0
    PLAUSIBLE = 1
    INCORRECT = 2


def label_reward(label: MatchLabel, lambda_tp: float, lambda_fp: float) -> float:
    return {MatchLabel.CORRECT: lambda_tp, MatchLabel.PLAUSIBLE: 0.0, MatchLabel.INCORRECT: lambda_fp}[
        MatchLabel(label)
    ]


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


@dataclass
class CameraView:
    k: np.ndarray
    r: np.ndarray
    t: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64).reshape(3, 3)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.k[0, 0] <= 0 or self.k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.r.T @ self.r, np.eye(3), atol=1e-9) or abs(np.linalg.det(self.r) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2-D grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid_depth(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


def relative_pose(src: CameraView, dst: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) taking src camera coordinates to dst camera coordinates."""
    r = dst.r @ src.r.T
    return r, dst.t - r @ src.t


def fundamental_matrix(view_a: CameraView, view_b: CameraView) -> np.ndarray:
    """F with ``x_b^T F x_a = 0`` for corresponding homogeneous pixels."""
    r, t = relative_pose(view_a, view_b)
    if np.linalg.norm(t) < ZERO_BASELINE:
        raise ZeroBaselineError("cameras share the same centre")
    essential = skew(t) @ r
    return np.linalg.inv(view_b.k).T @ essential @ np.linalg.inv(view_a.k)


def reproject_points(src: CameraView, dst: CameraView, xy) -> tuple[np.ndarray, np.ndarray]:
    """Reproject integer pixels of ``src`` into ``dst``.

    Returns ``(uv, ok)`` where ``uv`` is ``(n, 2)`` (NaN where ``ok`` is False).
    ``ok`` is False for pixels without depth and for points landing behind
    the destination camera.  Targets outside the image are still returned.
    """
    xy = np.asarray(xy, dtype=np.int64).reshape(-1, 2)
    z = src.depth[xy[:, 1], xy[:, 0]]
    ok = np.isfinite(z) & (z > 0)
    homog = np.column_stack([xy.astype(np.float64), np.ones(len(xy))])
    rays = homog @ np.linalg.inv(src.k).T
    pts = rays * np.where(ok, z, 0.0)[:, None]
    r, t = relative_pose(src, dst)
    cam = pts @ r.T + t
    ok &= cam[:, 2] > BEHIND_EPS
    proj = cam @ dst.k.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = proj[:, :2] / proj[:, 2:3]
    uv[~ok] = np.nan
    return uv, ok


def reproject(view_src: CameraView, view_dst: CameraView, pixel) -> tuple[float, float] | None:
    """Pixel location in ``view_dst`` of ``pixel`` seen in ``view_src``; None without usable depth."""
    x, y = pixel
    hgt, wid = view_src.shape
    if not (0 <= x < wid and 0 <= y < hgt):
        raise IndexError(f"pixel {pixel} outside {wid}x{hgt} view")
    uv, ok = reproject_points(view_src, view_dst, [(x, y)])
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def _line_distances(lines: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """|l . p| / ||l[:2]|| for lines (n, 3) against points (m, 2) -> (n, m)."""
    homog = np.column_stack([pts, np.ones(len(pts))])
    num = np.abs(lines @ homog.T)
    den = np.hypot(lines[:, 0], lines[:, 1])[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        # a null line only arises at the epipole, which lies on every epipolar line
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def epipolar_distances(f_mat: np.ndarray, pts_a, pts_b) -> np.ndarray:
    """Symmetric epipolar distance for every pair of points, shape (n_a, n_b)."""
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    ha = np.column_stack([pts_a, np.ones(len(pts_a))])
    hb = np.column_stack([pts_b, np.ones(len(pts_b))])
    in_b = _line_distances(ha @ f_mat.T, pts_b)  # lines F x_a, distance of x_b
    in_a = _line_distances(hb @ f_mat, pts_a).T  # lines F^T x_b, distance of x_a
    return np.maximum(in_a, in_b)


def epipolar_distance(view_a: CameraView, view_b: CameraView, p_a, p_b) -> float:
    return float(epipolar_distances(fundamental_matrix(view_a, view_b), [p_a], [p_b])[0, 0])


@dataclass
class Scene:
    views: list[CameraView]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("a scene needs at least two views")
        shapes = {v.shape for v in self.views}
        if len(shapes) != 1:
            raise ValueError(f"views differ in size: {shapes}")

    @property
    def height(self) -> int:
        return self.views[0].shape[0]

    @property
    def width(self) -> int:
        return self.views[0].shape[1]

    def fundamental(self, a: int, b: int) -> np.ndarray | None:
        # one matrix per unordered pair, so labels of (a, b) and (b, a) agree bit for bit
        if a > b:
            f_mat = self.fundamental(b, a)
            return None if f_mat is None else f_mat.T
        key = ("F", a, b)
        if key not in self._cache:
            try:
                self._cache[key] = fundamental_matrix(self.views[a], self.views[b])
            except ZeroBaselineError:
                self._cache[key] = None
        return self._cache[key]

    def reprojection_map(self, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense reprojection of every pixel of view ``a`` into view ``b``: ``(uv[h, w, 2], ok[h, w])``."""
        key = ("reproj", a, b)
        if key not in self._cache:
            ys, xs = np.mgrid[0 : self.height, 0 : self.width]
            xy = np.column_stack([xs.ravel(), ys.ravel()])
            uv, ok = reproject_points(self.views[a], self.views[b], xy)
            self._cache[key] = (uv.reshape(self.height, self.width, 2), ok.reshape(self.height, self.width))
        return self._cache[key]


def classify_pairs(scene: Scene, a: int, b: int, xy_a, xy_b, epsilon: float) -> np.ndarray:
    """Label every (p_a, p_b) pair; returns an int array of :class:`MatchLabel` values."""
    xy_a = np.asarray(xy_a, dtype=np.int64).reshape(-1, 2)
    xy_b = np.asarray(xy_b, dtype=np.int64).reshape(-1, 2)
    uv_ab, ok_ab = scene.reprojection_map(a, b)
    uv_ba, ok_ba = scene.reprojection_map(b, a)
    fwd, ok_a = uv_ab[xy_a[:, 1], xy_a[:, 0]], ok_ab[xy_a[:, 1], xy_a[:, 0]]
    bwd, ok_b = uv_ba[xy_b[:, 1], xy_b[:, 0]], ok_ba[xy_b[:, 1], xy_b[:, 0]]

    err_ab = np.linalg.norm(fwd[:, None, :] - xy_b[None, :, :], axis=2)
    err_ba = np.linalg.norm(bwd[None, :, :] - xy_a[:, None, :], axis=2)
    both = ok_a[:, None] & ok_b[None, :]
    with np.errstate(invalid="ignore"):
        correct = both & (err_ab <= epsilon) & (err_ba <= epsilon)

    labels = np.full((len(xy_a), len(xy_b)), int(MatchLabel.INCORRECT), dtype=np.int64)
    labels[correct] = MatchLabel.CORRECT
    f_mat = scene.fundamental(a, b)
    if f_mat is not None:
        plausible = ~both & (epipolar_distances(f_mat, xy_a, xy_b) <= epsilon)
        labels[plausible] = MatchLabel.PLAUSIBLE
    return labels


def classify_match(scene: Scene, a: int, b: int, p_a, p_b, epsilon: float) -> MatchLabel:
    """Correct / Plausible / Incorrect label for matching pixel ``p_a`` of view ``a`` to ``p_b`` of view ``b``."""
    for (x, y) in (p_a, p_b):
        if not (0 <= x < scene.width and 0 <= y < scene.height):
            raise IndexError(f"pixel {(x, y)} outside the scene")
    return MatchLabel(int(classify_pairs(scene, a, b, [p_a], [p_b], epsilon)[0, 0]))


# ---------------------------------------------------------------------------
# Toy scenes
# ---------------------------------------------------------------------------

SCENE_KINDS = ("fronto_planar", "tilted_plane")


def plane_depth(view: CameraView, shape, normal, point) -> np.ndarray:
    """Analytic z-depth of the plane ``normal . (X - point) = 0``; 0 where the plane is not hit in front."""
    hgt, wid = shape
    ys, xs = np.mgrid[0:hgt, 0:wid]
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1).reshape(-1, 3).astype(np.float64)
    rays_cam = pix @ np.linalg.inv(view.k).T  # z component == 1
    rays_world = rays_cam @ view.r  # R^T applied to each row
    centre = -view.r.T @ view.t
    normal = np.asarray(normal, dtype=np.float64)
    denom = rays_world @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (normal @ (np.asarray(point, dtype=np.float64) - centre)) / denom
    lam = np.where(np.isfinite(lam) & (lam > 0), lam, 0.0)
    return lam.reshape(hgt, wid)


def generate_toy_scene(
    kind: str,
    height: int,
    width: int,
    baseline: float,
    depth_mask_fraction: float = 0.0,
    seed: int = 0,
    n_views: int = 2,
) -> Scene:
    """Views of a textureless plane with analytic depth.

    View A sits at the world origin looking down +z.  View B is translated by
    ``baseline`` along x (and, for ``tilted_plane``, yawed by 3 degrees); an
    optional view C is translated by ``baseline`` along y.  The focal length
    equals the image width and the plane passes through depth 1 on the
    optical axis of A.
    """
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    if height < 8 or width < 8:
        raise ValueError("toy scenes need at least 8x8 pixels")
    if baseline == 0:
        raise ValueError(f"{kind} needs parallax; baseline must be non-zero")
    if not 0 <= depth_mask_fraction <= 0.9:
        raise ValueError("depth_mask_fraction must lie in [0, 0.9]")
    if n_views not in (2, 3):
        raise ValueError("n_views must be 2 or 3")

    k = intrinsics(width, width, (width - 1) / 2, (height - 1) / 2)
    poses = [(np.eye(3), np.zeros(3)), (np.eye(3), np.array([baseline, 0.0, 0.0]))]
    if n_views == 3:
        poses.append((np.eye(3), np.array([0.0, baseline, 0.0])))
    if kind == "fronto_planar":
        normal = np.array([0.0, 0.0, 1.0])
    else:
        normal = np.array([np.sin(np.radians(25)), 0.0, np.cos(np.radians(25))])
        poses[1] = (rotation_y(np.radians(3.0)), poses[1][1])
    point = np.array([0.0, 0.0, 1.0])

    rng = np.random.default_rng(seed)
    views = []
    for r, t in poses:
        placeholder = CameraView(k, r, t, np.zeros((height, width)))
        depth = plane_depth(placeholder, (height, width), normal, point)
        n_mask = int(round(depth_mask_fraction * height * width))
        if n_mask:
            idx = rng.choice(height * width, size=n_mask, replace=False)
            depth.reshape(-1)[idx] = 0.0
        views.append(CameraView(k, r, t, depth))
    return Scene(views)


def save_scene(scene: Scene, path) -> Path:
    path = Path(path)
    entries = []
    for idx, view in enumerate(scene.views):
        depth_path = path.with_name(f"{path.stem}.depth{idx}.dskf")
        write_tensor(depth_path, view.depth)
        entries.append(
            {"k": view.k.ravel().tolist(), "r": view.r.ravel().tolist(), "t": view.t.tolist(), "depth": depth_path.name}
        )
    path.write_text(json.dumps({"views": entries, "height": scene.height, "width": scene.width}, indent=1))
    return path


def load_scene(path) -> Scene:
    path = Path(path)
    doc = json.loads(path.read_text())
    views = []
    for entry in doc["views"]:
        depth = read_tensor(path.parent / entry["depth"])[:, :, 0]
        views.append(CameraView(entry["k"], entry["r"], entry["t"], depth))
    scene = Scene(views)
    if (scene.height, scene.width) != (doc["height"], doc["width"]):
        raise ValueError("scene manifest dimensions disagree with depth maps")
    return scene
