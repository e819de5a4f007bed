"""Learnable per-pixel parameter fields and the DSKF tensor file format.

A :class:`FeatureField` stands in for the output of a feature network: one
heatmap channel of detection logits and ``n`` raw descriptor channels per
pixel.  Fields are held in float64 so gradients can be checked against finite
differences; on disk they are stored as float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

MAGIC = b"DSKF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

DEGENERATE_NORM = 1e-12


class FieldFormatError(ValueError):
    """Raised when a DSKF file cannot be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DegenerateDescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    score: float


@dataclass
class FeatureSet:
    """Keypoints with aligned unit descriptors.

    ``log_probs`` is only present for sets drawn by the stochastic sampler.
    """

    keypoints: list[Keypoint]
    descriptors: np.ndarray  # (len(keypoints), n)
    log_probs: np.ndarray | None = None

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != len(self.keypoints):
            raise ValueError("descriptors must be (n_keypoints, n)")
        if self.log_probs is not None:
            self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
            if self.log_probs.shape != (len(self.keypoints),):
                raise ValueError("log_probs must align with keypoints")

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def xy(self) -> np.ndarray:
        """Integer pixel coordinates as an ``(n, 2)`` array of (x, y)."""
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=np.int64).reshape(-1, 2)

    @property
    def scores(self) -> np.ndarray:
        return np.array([k.score for k in self.keypoints], dtype=np.float64)

    def subset(self, index) -> "FeatureSet":
        index = list(index)
        return FeatureSet(
            keypoints=[self.keypoints[i] for i in index],
            descriptors=self.descriptors[index].reshape(len(index), self.dim),
            log_probs=None if self.log_probs is None else self.log_probs[index],
        )

    @classmethod
    def empty(cls, n: int) -> "FeatureSet":
        return cls(keypoints=[], descriptors=np.zeros((0, n)))


@dataclass
class FeatureField:
    heatmap: np.ndarray  # (height, width) logits
    descriptors: np.ndarray  # (height, width, n) raw, un-normalized
    meta: dict = dc_field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.float64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.heatmap.ndim != 2 or self.descriptors.ndim != 3:
            raise ValueError("heatmap must be 2-D and descriptors 3-D")
        if self.descriptors.shape[:2] != self.heatmap.shape:
            raise ValueError(
                f"descriptor grid {self.descriptors.shape[:2]} does not match heatmap {self.heatmap.shape}"
            )
        if min(self.descriptors.shape) < 1:
            raise ValueError("field dimensions must be >= 1")
        if not (np.all(np.isfinite(self.heatmap)) and np.all(np.isfinite(self.descriptors))):
            raise ValueError("field contains non-finite values")

    @property
    def height(self) -> int:
        return self.heatmap.shape[0]

    @property
    def width(self) -> int:
        return self.heatmap.shape[1]

    @property
    def n(self) -> int:
        return self.descriptors.shape[2]

    def copy(self) -> "FeatureField":
        return FeatureField(self.heatmap.copy(), self.descriptors.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureField):
            return NotImplemented
        return np.array_equal(self.heatmap, other.heatmap) and np.array_equal(
            self.descriptors, other.descriptors
        )


def init_field(height: int, width: int, n: int = 128, seed: int = 0) -> FeatureField:
    """Random field: heatmap ~ N(0, 0.1^2), descriptors ~ N(0, 1).

    Values are rounded to float32 so that a freshly initialized field survives
    a save/load round trip bit for bit.
    """
    if height < 1 or width < 1 or n < 1:
        raise ValueError(f"field dimensions must be >= 1, got {(height, width, n)}")
    rng = np.random.default_rng(seed)
    heatmap = (0.1 * rng.standard_normal((height, width))).astype(np.float32)
    descriptors = rng.standard_normal((height, width, n)).astype(np.float32)
    return FeatureField(heatmap.astype(np.float64), descriptors.astype(np.float64))


def normalize(v: np.ndarray) -> np.ndarray:
    """l2-normalize along the last axis; raises on (near) zero vectors."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    if (norm < DEGENERATE_NORM).any():
        raise DegenerateDescriptorError("cannot normalize a zero-length descriptor")
    return v / norm


def normalized_descriptor(field: FeatureField, x: int, y: int) -> np.ndarray:
    if not (0 <= x < field.width and 0 <= y < field.height):
        raise IndexError(f"pixel ({x}, {y}) outside {field.width}x{field.height} field")
    return normalize(field.descriptors[y, x])


# ---------------------------------------------------------------------------
# DSKF files
# ---------------------------------------------------------------------------


def write_tensor(path, array: np.ndarray) -> None:
    """Write a (height, width) or (height, width, channels) grid as DSKF."""
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError("DSKF tensors are 2-D or 3-D")
    h, w, c = array.shape
    with np.errstate(over="ignore"):
        payload = np.ascontiguousarray(array, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise ValueError("tensor has values that are not finite in float32")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, h, w, c))
        fh.write(payload.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a DSKF file into a float64 array of shape (height, width, channels)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FieldFormatError(f"truncated header: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, version, h, w, c = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported version {version}", 4)
    if min(h, w, c) < 1:
        raise FieldFormatError(f"zero dimension in header {(h, w, c)}", 8)
    expected = h * w * c * 4
    payload = len(data) - _HEADER.size
    if payload != expected:
        raise FieldFormatError(
            f"header declares {h}x{w}x{c} float32 ({expected} bytes) but payload has {payload} bytes",
            _HEADER.size + min(payload, expected),
        )
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return arr.astype(np.float64)


def save_field(field: FeatureField, path) -> Path:
    """Save ``field`` as a JSON manifest plus two DSKF tensors beside it.

    ``path`` names the manifest; tensors go to ``<stem>.heatmap.dskf`` and
    ``<stem>.desc.dskf``.  Returns the manifest path.
    """
    path = Path(path)
    heat_path = path.with_name(path.stem + ".heatmap.dskf")
    desc_path = path.with_name(path.stem + ".desc.dskf")
    write_tensor(heat_path, field.heatmap)
    write_tensor(desc_path, field.descriptors)
    manifest = {"heatmap": heat_path.name, "descriptors": desc_path.name, "n": field.n}
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_field(path) -> FeatureField:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        heat_ref, desc_ref, n = manifest["heatmap"], manifest["descriptors"], int(manifest["n"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"invalid field manifest {path}: {exc}") from exc
    heat = read_tensor(path.parent / heat_ref)
    desc = read_tensor(path.parent / desc_ref)
    if heat.shape[2] != 1:
        raise FieldFormatError(f"heatmap file has {heat.shape[2]} channels, expected 1", 16)
    if desc.shape[2] != n:
        raise FieldFormatError(f"descriptor file has {desc.shape[2]} channels, manifest says {n}", 16)
    if desc.shape[:2] != heat.shape[:2]:
        raise FieldFormatError("heatmap and descriptor grids differ in size", 8)
    return FeatureField(heat[:, :, 0], desc)
