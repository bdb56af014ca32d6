"""Dataset ingestion, synthetic generation, client partitioning, and splitting.

Every operation here is a pure function of (input, seed): identical arguments
produce bitwise-identical shards, and partitioning never duplicates or drops
a sample.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, FedsimError

MIN_SAMPLES_PER_CLIENT = 5
_DIRICHLET_RETRIES = 100


@dataclass(frozen=True)
class LabeledImage:
    """One sample: (channels, H, W) pixels in [0, 1] plus an integer label."""

    pixels: np.ndarray
    label: int

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3:
            raise DataFormatError(f"pixels must be (C, H, W), got {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise DataFormatError("pixel values outside [0, 1]")
        if self.label < 0:
            raise DataFormatError(f"negative label {self.label}")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)


@dataclass(frozen=True)
class ClientShards:
    """A client's disjoint train/valid/test sample lists (3:1:1)."""

    train: tuple[LabeledImage, ...]
    valid: tuple[LabeledImage, ...]
    test: tuple[LabeledImage, ...]


@dataclass(frozen=True)
class PartitionSpec:
    """How to carve a dataset into per-client subsets."""

    kind: str                 # "iid" | "dirichlet" | "natural"
    num_clients: int
    seed: int = 0
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet", "natural"):
            raise FedsimError(f"unknown partition kind {self.kind!r}")
        if self.num_clients < 2:
            raise FedsimError("need at least 2 clients")
        if self.alpha <= 0:
            raise FedsimError(f"alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class SyntheticSpec:
    """A learnable 10-class-style task: per-class Gaussian blob patterns plus
    pixel noise, deterministic under the seed."""

    num_classes: int = 10
    height: int = 8
    width: int = 8
    per_class: int = 200
    noise: float = 0.1
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.per_class < 1:
            raise FedsimError("synthetic spec needs >= 2 classes and >= 1 sample/class")


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Allocate ``total`` integer units by proportion.

    Floors the quotas, then hands the leftover units to the largest
    fractional remainders (ties broken by lowest index), so the result is
    deterministic and always sums to ``total``.
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    quotas = p * total
    counts = np.floor(quotas).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


# ---------------------------------------------------------------------------
# IDX (MNIST-style) files
# ---------------------------------------------------------------------------

_IDX_UBYTE = 0x08


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file into an ndarray."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    zero, dtype, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0:
        raise DataFormatError(f"{path}: bad IDX magic (first two bytes nonzero)")
    if dtype != _IDX_UBYTE:
        raise DataFormatError(f"{path}: unsupported IDX dtype 0x{dtype:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise DataFormatError(
            f"{path}: IDX payload is {len(raw) - header} bytes, expected {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (inverse of :func:`read_idx`)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, _IDX_UBYTE, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx_dataset(images_path, labels_path,
                     num_classes: int | None = None) -> list[LabeledImage]:
    """Pair an IDX image file with an IDX label file; pixels scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: labels must be 1-D")
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.ndim != 4:
        raise DataFormatError(
            f"{images_path}: images must be (N, H, W) or (N, C, H, W)")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError("image/label count mismatch")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise DataFormatError(
            f"label {int(labels.max())} out of range for {num_classes} classes")
    scaled = images.astype(np.float64) / 255.0
    return [LabeledImage(scaled[i], int(labels[i])) for i in range(len(labels))]


def load_per_client_dirs(root, num_classes: int | None = None
                         ) -> list[list[LabeledImage]]:
    """Load ``client_<k>/{images.idx,labels.idx}`` keeping natural boundaries."""
    root = Path(root)
    dirs = sorted((d for d in root.iterdir() if d.name.startswith("client_")),
                  key=lambda d: int(d.name.split("_")[1]))
    if not dirs:
        raise DataFormatError(f"{root}: no client_<k> directories")
    return [load_idx_dataset(d / "images.idx", d / "labels.idx", num_classes)
            for d in dirs]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _blob_pattern(rng: np.random.Generator, h: int, w: int, peak: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    pattern = np.zeros((h, w))
    for _ in range(3):
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        sigma = rng.uniform(0.8, 1.8)
        amp = rng.uniform(0.5, 1.0)
        pattern += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    top = pattern.max()
    return pattern * (peak / top) if top > 0 else pattern


def class_patterns(spec: SyntheticSpec) -> np.ndarray:
    """Per-class base patterns, redrawn greedily to keep classes separated.

    Peak intensity ramps across classes so a label-skewed client split also
    skews per-client feature statistics, as real federated corpora do.
    """
    h, w = spec.height, spec.width
    min_gap = 0.20 * np.sqrt(h * w)
    peaks = np.linspace(0.5, 0.85, spec.num_classes)
    patterns = []
    for c in range(spec.num_classes):
        rng = np.random.default_rng([spec.seed, 17, c])
        best, best_gap = None, -1.0
        for _ in range(50):
            cand = _blob_pattern(rng, h, w, peaks[c])
            gap = min((float(np.linalg.norm(cand - p)) for p in patterns),
                      default=np.inf)
            if gap >= min_gap:
                best = cand
                break
            if gap > best_gap:
                best, best_gap = cand, gap
        patterns.append(best)
    return np.stack(patterns)


def generate_synthetic(spec: SyntheticSpec) -> list[LabeledImage]:
    """Deterministic synthetic dataset: ``per_class`` noisy copies of each
    class pattern, interleaved class-major."""
    patterns = class_patterns(spec)
    out = []
    for c in range(spec.num_classes):
        rng = np.random.default_rng([spec.seed, 23, c])
        base = np.broadcast_to(patterns[c], (spec.channels, spec.height, spec.width))
        for _ in range(spec.per_class):
            noisy = np.clip(base + spec.noise * rng.standard_normal(base.shape), 0.0, 1.0)
            out.append(LabeledImage(noisy, c))
    return out


# ---------------------------------------------------------------------------
# Partitioning and splitting
# ---------------------------------------------------------------------------

def partition(data, spec: PartitionSpec) -> list[list[LabeledImage]]:
    """Split a dataset into ``spec.num_clients`` per-client sample lists.

    IID shuffles uniformly and deals near-equal chunks. Dirichlet draws one
    proportion vector per class from Dir(alpha) and allocates that class's
    samples by largest-remainder rounding; draws violating the per-client
    minimum are retried. Natural expects data already grouped per client.
    """
    if spec.kind == "natural":
        if not (data and isinstance(data[0], list)):
            raise FedsimError("natural partitioning needs per-client lists")
        if len(data) != spec.num_clients:
            raise FedsimError(
                f"natural data has {len(data)} clients, spec says {spec.num_clients}")
        return [list(client) for client in data]

    data = list(data)
    n, k = len(data), spec.num_clients
    rng = np.random.default_rng([spec.seed, 31])
    if spec.kind == "iid":
        perm = rng.permutation(n)
        sizes = largest_remainder(n, np.ones(k))
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [[data[i] for i in perm[bounds[c]:bounds[c + 1]]] for c in range(k)]

    # dirichlet label skew
    labels = np.array([img.label for img in data])
    classes = np.unique(labels)
    by_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    for _ in range(_DIRICHLET_RETRIES):
        counts = np.zeros((len(classes), k), dtype=int)
        for ci, c in enumerate(classes):
            proportions = rng.dirichlet(np.full(k, spec.alpha))
            counts[ci] = largest_remainder(len(by_class[c]), proportions)
        if counts.sum(axis=0).min() >= MIN_SAMPLES_PER_CLIENT:
            break
    else:
        raise FedsimError(
            f"could not give every client >= {MIN_SAMPLES_PER_CLIENT} samples "
            f"after {_DIRICHLET_RETRIES} Dirichlet draws")
    clients: list[list[LabeledImage]] = [[] for _ in range(k)]
    for ci, c in enumerate(classes):
        bounds = np.concatenate([[0], np.cumsum(counts[ci])])
        for j in range(k):
            clients[j].extend(data[i] for i in by_class[c][bounds[j]:bounds[j + 1]])
    return clients


def split_3_1_1(client_data, seed: int) -> ClientShards:
    """Shuffle a client's samples and split 60/20/20 (largest remainder)."""
    items = list(client_data)
    if len(items) < MIN_SAMPLES_PER_CLIENT:
        raise FedsimError(
            f"need >= {MIN_SAMPLES_PER_CLIENT} samples to split 3:1:1, got {len(items)}")
    rng = np.random.default_rng([seed, 47])
    perm = rng.permutation(len(items))
    n_train, n_valid, _ = largest_remainder(len(items), np.array([3.0, 1.0, 1.0]))
    train = tuple(items[i] for i in perm[:n_train])
    valid = tuple(items[i] for i in perm[n_train:n_train + n_valid])
    test = tuple(items[i] for i in perm[n_train + n_valid:])
    return ClientShards(train, valid, test)


# ---------------------------------------------------------------------------
# Helpers shared by training, evaluation, and tests
# ---------------------------------------------------------------------------

def to_batch(images) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (X, y) arrays: (N, C, H, W) float64 and (N,) int64."""
    xs = np.stack([img.pixels for img in images])
    ys = np.array([img.label for img in images], dtype=np.int64)
    return xs, ys


def dataset_fingerprint(images) -> str:
    """Order-independent multiset hash; detects dropped/duplicated/mutated samples."""
    digests = sorted(
        hashlib.sha256(img.pixels.tobytes() + struct.pack("<q", img.label)).hexdigest()
        for img in images)
    return hashlib.sha256("".join(digests).encode()).hexdigest()


def label_entropy(images) -> float:
    """Shannon entropy (nats) of the label distribution."""
    labels = np.array([img.label for img in images])
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())
