"""Datasets: the 2-D bimodal toy, MNIST via IDX files, and branching moving shapes.

All generators are pure functions of their spec and an integer seed.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

# ---------------------------------------------------------------------------
# 2-D bimodal data


@dataclass(frozen=True)
class Bimodal2DSpec:
    """``y = left_value`` for ``x <= split``; otherwise one of ``modes``, equiprobably."""

    n: int = 2000
    x_range: tuple[float, float] = (-10.0, 10.0)
    split: float = 0.0
    modes: tuple[float, ...] = (-0.3, 0.3)
    left_value: float = 0.0


def gen_bimodal_2d(spec: Bimodal2DSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``x`` and ``y`` as ``n x 1`` arrays."""
    if spec.n < 1:
        raise ConfigError(f"n must be >= 1, got {spec.n}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(spec.x_range[0], spec.x_range[1], size=spec.n)
    choice = rng.integers(0, len(spec.modes), size=spec.n)
    y = np.where(x <= spec.split, spec.left_value, np.asarray(spec.modes)[choice])
    return x[:, None], y[:, None]


# ---------------------------------------------------------------------------
# IDX (MNIST) files

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_MAGIC = {"images": IDX_IMAGES, "labels": IDX_LABELS}


@dataclass
class IdxFile:
    magic: int
    dims: tuple[int, ...]
    payload: np.ndarray  # uint8, shaped by dims


def read_idx(raw: bytes) -> IdxFile:
    """Decode the big-endian IDX container (unsigned-byte payloads only)."""
    if len(raw) < 4:
        raise FormatError("file shorter than the 4-byte magic number", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08:
        raise FormatError(f"unsupported magic 0x{magic:08x}: payload type must be unsigned byte", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise FormatError(f"truncated header: {ndim} dimensions need {header} bytes, file has {len(raw)}",
                          offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise FormatError(f"truncated payload: dims {dims} need {expected} bytes, found {len(raw) - header}",
                          offset=len(raw))
    payload = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)
    return IdxFile(magic, tuple(dims), payload)


def parse_idx(raw: bytes, kind: str = "images") -> np.ndarray:
    """Images as floats in [0, 1] shaped ``N x rows x cols``; labels as ``N`` ints."""
    if kind not in _MAGIC:
        raise ValueError(f"kind must be 'images' or 'labels', got {kind!r}")
    idx = read_idx(raw)
    if idx.magic != _MAGIC[kind]:
        raise FormatError(f"expected {kind} magic 0x{_MAGIC[kind]:08x}, found 0x{idx.magic:08x}", offset=0)
    if kind == "images":
        return idx.payload.astype(np.float64) / 255.0
    return idx.payload.astype(np.int64)


def write_idx(array: np.ndarray, kind: str = "images") -> bytes:
    array = np.asarray(array)
    if kind == "images" and array.dtype != np.uint8:
        array = np.clip(np.rint(array * 255.0), 0, 255)
    array = array.astype(np.uint8)
    magic = _MAGIC[kind]
    if (magic & 0xFF) != array.ndim:
        raise DimensionError(f"{kind} IDX files need {magic & 0xFF} dimensions, got {array.ndim}")
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(path: str | Path, kind: str = "images") -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read(), kind)


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def bundled_mnist() -> tuple[np.ndarray, np.ndarray]:
    """The 5000-image MNIST subset shipped inside ``mlxtend`` (uint8 images, int labels)."""
    from importlib import resources

    path = resources.files("mlxtend.data").joinpath("data/mnist_5k.csv.gz")
    table = np.loadtxt(str(path), delimiter=",")
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.int64)


def write_mnist_subset(out_dir: str | Path, n_test: int = 1000, seed: int = 0) -> dict[str, Path]:
    """Shuffle the bundled subset, split it and write the four standard IDX files."""
    images, labels = bundled_mnist()
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    splits = {
        "train_images": (images[n_test:], "images"), "train_labels": (labels[n_test:], "labels"),
        "test_images": (images[:n_test], "images"), "test_labels": (labels[:n_test], "labels"),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, (arr, kind) in splits.items():
        paths[key] = out_dir / MNIST_FILES[key]
        paths[key].write_bytes(write_idx(arr, kind))
    return paths


def find_mnist(directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    found = {}
    for key, stem in MNIST_FILES.items():
        for candidate in (directory / stem, directory / f"{stem}.gz"):
            if candidate.exists():
                found[key] = candidate
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")
    return found


def make_quarter_completion(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inputs are the flattened lower-left quarter; targets the flattened full image."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1] != images.shape[2] or images.shape[1] % 2:
        raise DimensionError(f"expected N x S x S images with even S, got {images.shape}")
    half = images.shape[1] // 2
    x = images[:, half:, :half].reshape(len(images), -1)
    return x, images.reshape(len(images), -1)


def paste_quarter(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Write flattened lower-left quarters ``x`` into flattened full images ``y``."""
    n = len(y)
    side = int(round(np.sqrt(y.shape[1])))
    half = side // 2
    full = np.array(y, dtype=np.float64).reshape(n, side, side)
    full[:, half:, :half] = np.asarray(x).reshape(n, half, half)
    return full.reshape(n, -1)


# ---------------------------------------------------------------------------
# branching moving shapes


@dataclass(frozen=True)
class MovingShapesSpec:
    """A square of class 1 moves right, then branches into one of B directions.

    A smaller class-2 square moves deterministically as a distractor; class 0
    is background.  The branch happens between the last past frame and the
    first future frame.
    """

    height: int = 32
    width: int = 32
    num_classes: int = 3
    branch_count: int = 2
    mode_probs: tuple[float, ...] | None = None
    t_past: int = 4
    t_future: int = 3
    size: int = 6
    speed: int = 2
    branch_offset: int = 3
    distractor_size: int = 4
    distractor: bool = True

    def branch_velocities(self) -> list[tuple[int, int]]:
        b = self.branch_count
        if b == 1:
            offsets = [0]
        else:
            offsets = np.linspace(-self.branch_offset, self.branch_offset, b)
            offsets = [int(round(o)) for o in offsets]
        return [(o, self.speed) for o in offsets]

    def probabilities(self) -> np.ndarray:
        if self.mode_probs is None:
            return np.full(self.branch_count, 1.0 / self.branch_count)
        p = np.asarray(self.mode_probs, dtype=np.float64)
        if len(p) != self.branch_count or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ConfigError(f"mode_probs must be {self.branch_count} non-negative weights summing to 1")
        return p


@dataclass
class SceneSequence:
    """``frames`` is ``n x T x H x W`` class indices; ``modes`` the branch taken per sequence."""

    frames: np.ndarray
    modes: np.ndarray
    num_classes: int
    t_past: int
    centroids: np.ndarray = field(default=None)

    @property
    def past(self) -> np.ndarray:
        return self.frames[:, :self.t_past]

    @property
    def future(self) -> np.ndarray:
        return self.frames[:, self.t_past:]


def gen_moving_shapes(spec: MovingShapesSpec, n: int, seed: int) -> SceneSequence:
    if spec.num_classes < (3 if spec.distractor else 2):
        raise ConfigError("moving shapes need background, object (and distractor) classes")
    total = spec.t_past + spec.t_future
    velocities = spec.branch_velocities()
    probs = spec.probabilities()
    max_dy = max(abs(v[0]) for v in velocities) * spec.t_future
    x_span = spec.speed * (total - 1) + spec.size
    y_lo, y_hi = max_dy, spec.height - spec.size - max_dy
    if x_span > spec.width or y_lo > y_hi:
        raise ConfigError(f"object of size {spec.size} cannot stay inside a {spec.height}x{spec.width} grid "
                          f"over {total} frames with speed {spec.speed} and branch offset {spec.branch_offset}")
    d_span = spec.distractor_size + (total - 1)
    if spec.distractor and (d_span > spec.height or spec.distractor_size > spec.width):
        raise ConfigError("distractor does not fit the grid")

    rng = np.random.default_rng(seed)
    frames = np.zeros((n, total, spec.height, spec.width), dtype=np.int64)
    centroids = np.zeros((n, total, 2))
    modes = rng.choice(spec.branch_count, size=n, p=probs)
    for i in range(n):
        x0 = int(rng.integers(0, spec.width - x_span + 1))
        y0 = int(rng.integers(y_lo, y_hi + 1))
        if spec.distractor:
            dx0 = int(rng.integers(0, spec.width - spec.distractor_size + 1))
            going_down = bool(rng.integers(0, 2))
            dy0 = int(rng.integers(0, spec.height - d_span + 1))
        y, x = y0, x0
        for t in range(total):
            if t > 0:
                vy, vx = (0, spec.speed) if t < spec.t_past else velocities[modes[i]]
                y, x = y + vy, x + vx
            if spec.distractor:
                step = t if going_down else total - 1 - t
                frames[i, t, dy0 + step:dy0 + step + spec.distractor_size,
                       dx0:dx0 + spec.distractor_size] = 2
            frames[i, t, y:y + spec.size, x:x + spec.size] = 1
            centroids[i, t] = (y + (spec.size - 1) / 2, x + (spec.size - 1) / 2)
    return SceneSequence(frames, modes, spec.num_classes, spec.t_past, centroids)


def one_hot(labels: np.ndarray, num_classes: int, axis: int = -3) -> np.ndarray:
    """Class-index grids to one-hot confidences with the class axis at ``axis``."""
    out = np.eye(num_classes)[labels]
    return np.moveaxis(out, -1, axis)


def shape_windows(seqs: SceneSequence, window: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (past window -> next frame) pairs with targets in the future part.

    Returns stacked one-hot inputs ``m x (window*C) x H x W``, one-hot targets
    ``m x C x H x W`` and the future offset (0 = first future frame) of each
    target.
    """
    c = seqs.num_classes
    n, total, h, w = seqs.frames.shape
    xs, ys, offsets = [], [], []
    for t in range(seqs.t_past, total):
        past = one_hot(seqs.frames[:, t - window:t], c, axis=2)
        xs.append(past.reshape(n, window * c, h, w))
        ys.append(one_hot(seqs.frames[:, t], c, axis=1))
        offsets.append(np.full(n, t - seqs.t_past))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(offsets)
