"""Datasets: a synthetic domain-shift generator and an IDX reader/writer.

Target ground-truth labels never travel with the target features. They are
returned in a separate :class:`HiddenLabels` object that only evaluation code
is given; :class:`UnlabeledDataset` has no label field at all.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ConfigError, Tensor


class FormatError(ValueError):
    """Malformed IDX file or dataset manifest."""


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("features and labels differ in length")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class UnlabeledDataset:
    x: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class HiddenLabels:
    """Target ground truth, for evaluation only."""

    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class AdaptationTask:
    source: LabeledDataset
    target: UnlabeledDataset
    target_labels: HiddenLabels

    @property
    def num_categories(self) -> int:
        return int(max(self.source.y.max(), self.target_labels.y.max())) + 1


# ---------------------------------------------------------------------------
# synthetic Gaussian mixtures
# ---------------------------------------------------------------------------


def circle_means(num_categories: int, radius: float, dim: int = 2) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(num_categories) / num_categories
    means = np.zeros((num_categories, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


@dataclass(frozen=True)
class ShiftSpec:
    num_categories: int = 3
    per_category: int = 200
    dim: int = 2
    radius: float = 2.0
    std: float = 0.5
    rotation_deg: float = 30.0
    translation: tuple[float, ...] = (1.0, 0.0)
    seed: int = 0
    means: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.num_categories < 2:
            raise ConfigError("need at least two categories")
        if not self.std > 0:
            raise ConfigError("covariance scale must be positive")
        if self.dim < 2:
            raise ConfigError("synthetic data needs at least two dimensions")
        if self.per_category < 1:
            raise ConfigError("per_category must be positive")
        if len(self.translation) > self.dim:
            raise ConfigError("translation has more entries than the feature dimension")

    def source_means(self) -> np.ndarray:
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            if m.shape != (self.num_categories, self.dim):
                raise ConfigError(f"means must be {self.num_categories} x {self.dim}")
            return m
        return circle_means(self.num_categories, self.radius, self.dim)

    def target_means(self) -> np.ndarray:
        return shift_points(self.source_means(), self.rotation_deg, self.translation)


def rotation_matrix(deg: float, dim: int = 2) -> np.ndarray:
    """Rotation by ``deg`` in the plane of the first two coordinates."""
    t = math.radians(deg)
    r = np.eye(dim)
    r[0, 0], r[0, 1] = math.cos(t), -math.sin(t)
    r[1, 0], r[1, 1] = math.sin(t), math.cos(t)
    return r


def shift_points(points: np.ndarray, rotation_deg: float, translation) -> np.ndarray:
    """Rotate about the origin, then translate."""
    points = np.asarray(points, dtype=np.float64)
    shift = np.zeros(points.shape[1])
    shift[: len(translation)] = translation
    return points @ rotation_matrix(rotation_deg, points.shape[1]).T + shift


def _sample_mixture(means: np.ndarray, per_category: int, std: float, rng) -> tuple[np.ndarray, np.ndarray]:
    c, d = means.shape
    y = np.repeat(np.arange(c), per_category)
    x = means[y] + std * rng.standard_normal((len(y), d))
    order = rng.permutation(len(y))
    return x[order], y[order]


def generate_shifted_mixture(spec: ShiftSpec) -> AdaptationTask:
    """Source from isotropic Gaussian clusters; target from the shifted clusters."""
    rng = np.random.default_rng(spec.seed)
    src_rng, tgt_rng = rng.spawn(2)
    xs, ys = _sample_mixture(spec.source_means(), spec.per_category, spec.std, src_rng)
    xt, yt = _sample_mixture(spec.target_means(), spec.per_category, spec.std, tgt_rng)
    return AdaptationTask(LabeledDataset(xs, ys), UnlabeledDataset(xt), HiddenLabels(yt))


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

# element type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {dt.newbyteorder("="): code for code, dt in IDX_TYPES.items()}


def _open(path: str | Path, mode: str):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def parse_idx(blob: bytes) -> tuple[int, np.ndarray]:
    """Return ``(type_code, array)`` from raw IDX bytes."""
    if len(blob) < 4:
        raise FormatError("file shorter than the IDX magic number")
    if blob[0] != 0 or blob[1] != 0:
        raise FormatError(f"bad IDX magic bytes {blob[:2].hex()}")
    code, ndim = blob[2], blob[3]
    if code not in IDX_TYPES:
        raise FormatError(f"unsupported IDX element type 0x{code:02x}")
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise FormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    dtype = IDX_TYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    expected = header_end + count * dtype.itemsize
    if len(blob) < expected:
        raise FormatError(f"truncated IDX payload: need {expected} bytes, have {len(blob)}")
    if len(blob) > expected:
        raise FormatError("trailing bytes after IDX payload")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=header_end).reshape(dims)
    return code, arr.astype(dtype.newbyteorder("="))


def read_idx(path: str | Path) -> np.ndarray:
    with _open(path, "rb") as fh:
        return parse_idx(fh.read())[1]


def encode_idx(arr: np.ndarray, code: int | None = None) -> bytes:
    arr = np.asarray(arr)
    if code is None:
        try:
            code = IDX_CODES[arr.dtype.newbyteorder("=")]
        except KeyError:
            raise FormatError(f"no IDX element type for dtype {arr.dtype}") from None
    if code not in IDX_TYPES:
        raise FormatError(f"unsupported IDX element type 0x{code:02x}")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=IDX_TYPES[code]).tobytes()


def write_idx(path: str | Path, arr: np.ndarray, code: int | None = None) -> None:
    with _open(path, "wb") as fh:
        fh.write(encode_idx(arr, code))


def load_idx(path: str | Path, scale: bool = True, flatten: bool = True) -> Tensor:
    """Load an IDX file as a float tensor.

    Unsigned-byte data is divided by 255 when ``scale`` is set. With
    ``flatten`` every item beyond the first axis is flattened to a vector.
    """
    with _open(path, "rb") as fh:
        code, arr = parse_idx(fh.read())
    out = arr.astype(np.float64)
    if scale and code == 0x08:
        out = out / 255.0
    if flatten and out.ndim > 2:
        out = out.reshape(out.shape[0], -1)
    return Tensor(out)


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resampling of ``N x h x w`` images to ``N x size x size``."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError("expected N x h x w images")
    h, w = images.shape[1:]
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return images[:, rows][:, :, cols]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_KEYS = ("source_images", "source_labels", "target_images", "target_labels")
MANIFEST_OPTIONAL = ("image_size", "num_source", "num_target", "dim")


def write_manifest(path: str | Path, entries: dict[str, str]) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in MANIFEST_KEYS and key not in MANIFEST_OPTIONAL:
            raise FormatError(f"{path}:{lineno}: unknown manifest key {key!r}")
        entries[key] = value
    missing = [k for k in MANIFEST_KEYS if k not in entries]
    if missing:
        raise FormatError(f"{path}: missing manifest keys {missing}")
    return entries


def _load_images(path: Path, size: int | None) -> np.ndarray:
    with _open(path, "rb") as fh:
        code, arr = parse_idx(fh.read())
    if arr.ndim == 3 and size is not None and arr.shape[1:] != (size, size):
        arr = resize_nearest(arr, size)
    out = arr.astype(np.float64)
    if code == 0x08:
        out /= 255.0
    return out.reshape(out.shape[0], -1) if out.ndim > 2 else out


def load_task(manifest_path: str | Path) -> AdaptationTask:
    """Load an adaptation task; relative paths resolve against the manifest."""
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    root = manifest_path.parent

    def resolve(key: str) -> Path:
        p = Path(entries[key])
        return p if p.is_absolute() else root / p

    size = int(entries["image_size"]) if "image_size" in entries else None
    if size is None:
        shapes = [read_idx(resolve(k)).shape for k in ("source_images", "target_images")]
        if all(len(s) == 3 for s in shapes) and shapes[0][1:] != shapes[1][1:]:
            size = max(max(s[1:]) for s in shapes)
    xs = _load_images(resolve("source_images"), size)
    xt = _load_images(resolve("target_images"), size)
    ys = read_idx(resolve("source_labels")).astype(np.int64)
    yt = read_idx(resolve("target_labels")).astype(np.int64)
    if xs.shape[1] != xt.shape[1]:
        raise FormatError("source and target feature widths differ")
    return AdaptationTask(LabeledDataset(xs, ys), UnlabeledDataset(xt), HiddenLabels(yt))


def save_task(task: AdaptationTask, out_dir: str | Path) -> Path:
    """Write the four IDX files plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "source_images": ("source_x.idx", task.source.x.astype(np.float64)),
        "source_labels": ("source_y.idx", task.source.y.astype(np.uint8)),
        "target_images": ("target_x.idx", task.target.x.astype(np.float64)),
        "target_labels": ("target_y_hidden.idx", task.target_labels.y.astype(np.uint8)),
    }
    entries = {}
    for key, (name, arr) in files.items():
        write_idx(out_dir / name, arr)
        entries[key] = name
    entries["num_source"] = str(len(task.source))
    entries["num_target"] = str(len(task.target))
    entries["dim"] = str(task.source.dim)
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def batch_iterator(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches drawn uniformly with replacement."""
    if n < 1:
        raise ValueError("cannot iterate over an empty dataset")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    while True:
        yield rng.integers(0, n, size=batch_size)
