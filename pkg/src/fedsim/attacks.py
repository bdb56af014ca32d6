"""Black-box backdoor attacks: trigger synthesis, dataset poisoning, and
attack-success-rate test sets.

Four trigger families are supported: a fixed 3x3 corner patch (BadNet-style),
image blending, a per-column sinusoidal perturbation, and out-of-distribution
edge-case samples. Poisoning is seed-deterministic and never mutates clean
samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledImage
from .errors import FedsimError

# 3x3 checkerboard with the corners "on"; a named constant so the layout can
# be swapped without touching the poisoning logic.
BADNET_PATTERN = np.array([[1.0, 0.0, 1.0],
                           [0.0, 1.0, 0.0],
                           [1.0, 0.0, 1.0]])

# Sinusoid amplitude of 20 on the [0, 255] pixel convention, stored normalized.
SIG_DELTA = 20.0 / 255.0
SIG_FREQ = 6


@dataclass(frozen=True)
class BadNetTrigger:
    """Fixed 3x3 patch at the bottom-right corner, ``offset`` pixels inward."""

    offset: int = 0

    def __post_init__(self):
        if self.offset < 0:
            raise FedsimError("offset must be non-negative")


@dataclass(frozen=True)
class BlendedTrigger:
    """Blend a trigger image into the sample: x' = (1 - alpha) x + alpha t."""

    image: np.ndarray
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise FedsimError(f"alpha must be in (0, 1), got {self.alpha}")
        arr = np.asarray(self.image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise FedsimError("trigger image must be (H, W) or (C, H, W)")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "image", arr)


@dataclass(frozen=True)
class SigTrigger:
    """Add delta * sin(2 pi j f / W) to every pixel of column j, then clamp."""

    delta: float = SIG_DELTA
    freq: int = SIG_FREQ

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise FedsimError(f"delta must be in (0, 1], got {self.delta}")
        if self.freq < 1:
            raise FedsimError("freq must be >= 1")


@dataclass(frozen=True)
class EdgeCaseTrigger:
    """Out-of-distribution pool; a 70/30 split separates the samples that are
    planted in the adversary's training set from those used to measure ASR."""

    pool: tuple[LabeledImage, ...]
    train_fraction: float = 0.7

    def __post_init__(self):
        if not self.pool:
            raise FedsimError("edge pool must be non-empty")
        if not 0.0 < self.train_fraction < 1.0:
            raise FedsimError("train_fraction must be in (0, 1)")
        object.__setattr__(self, "pool", tuple(self.pool))


Trigger = BadNetTrigger | BlendedTrigger | SigTrigger | EdgeCaseTrigger


@dataclass(frozen=True)
class PoisonSpec:
    """Everything that determines dataset poisoning, including randomness."""

    trigger: Trigger
    target_label: int
    poison_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.poison_ratio <= 1.0:
            raise FedsimError(f"poison_ratio must be in (0, 1], got {self.poison_ratio}")
        if self.target_label < 0:
            raise FedsimError("target_label must be a valid class id")


@dataclass(frozen=True)
class AsrTestSet:
    """Triggered samples, all labeled with the target class, plus the id of
    the client each one came from (-1 for edge-pool images)."""

    images: tuple[LabeledImage, ...]
    provenance: tuple[int, ...]
    target_label: int


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    c, sh, sw = img.shape
    rows = (np.arange(h) * sh / h).astype(int)
    cols = (np.arange(w) * sw / w).astype(int)
    return img[:, rows][:, :, cols]


def apply_trigger(img: LabeledImage, spec: PoisonSpec) -> LabeledImage:
    """Stamp the trigger onto a copy of ``img`` and relabel it to the target.

    The input sample is never modified; outputs stay within [0, 1].
    """
    trig = spec.trigger
    pixels = img.pixels
    c, h, w = pixels.shape
    if isinstance(trig, BadNetTrigger):
        size = BADNET_PATTERN.shape[0]
        if h < size + trig.offset or w < size + trig.offset:
            raise FedsimError(
                f"image {h}x{w} too small for {size}x{size} trigger at offset {trig.offset}")
        out = pixels.copy()
        r0 = h - size - trig.offset
        c0 = w - size - trig.offset
        out[:, r0:r0 + size, c0:c0 + size] = BADNET_PATTERN
    elif isinstance(trig, BlendedTrigger):
        t = _resize_nearest(trig.image, h, w)
        if t.shape[0] == 1 and c > 1:
            t = np.broadcast_to(t, (c, h, w))
        elif t.shape[0] != c:
            raise FedsimError(
                f"trigger has {t.shape[0]} channels, image has {c}")
        out = (1.0 - trig.alpha) * pixels + trig.alpha * t
    elif isinstance(trig, SigTrigger):
        j = np.arange(w)
        wave = trig.delta * np.sin(2.0 * math.pi * j * trig.freq / w)
        out = np.clip(pixels + wave, 0.0, 1.0)
    elif isinstance(trig, EdgeCaseTrigger):
        out = pixels.copy()
    else:
        raise FedsimError(f"unknown trigger {trig!r}")
    return LabeledImage(out, spec.target_label)


def edge_slices(trig: EdgeCaseTrigger, seed: int
                ) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Disjoint (poison-train, asr-eval) slices of the edge pool."""
    n = len(trig.pool)
    perm = np.random.default_rng([seed, 61]).permutation(n)
    n_train = int(n * trig.train_fraction + 0.5)
    train = [trig.pool[i] for i in perm[:n_train]]
    evals = [trig.pool[i] for i in perm[n_train:]]
    return train, evals


def poison_client_dataset(train, spec: PoisonSpec) -> list[LabeledImage]:
    """Poison a client's training list.

    Pixel triggers stamp floor(ratio * n) samples chosen by a seeded shuffle
    and relabel them; edge-case poisoning appends the pool's train slice
    relabeled to the target. Untouched samples are returned bitwise intact.
    """
    items = list(train)
    if not items:
        raise FedsimError("cannot poison an empty training set")
    if isinstance(spec.trigger, EdgeCaseTrigger):
        extra, _ = edge_slices(spec.trigger, spec.seed)
        return items + [LabeledImage(img.pixels, spec.target_label) for img in extra]
    n_poison = int(spec.poison_ratio * len(items))
    chosen = np.random.default_rng([spec.seed, 53]).permutation(len(items))[:n_poison]
    out = list(items)
    for i in chosen:
        out[i] = apply_trigger(items[i], spec)
    return out


def build_asr_testset(all_client_shards, adversary_id: int,
                      spec: PoisonSpec) -> AsrTestSet:
    """Assemble the triggered evaluation set.

    For pixel triggers: every test sample of every non-adversary client whose
    true label differs from the target, triggered and relabeled. For the
    edge-case attack: the held-out slice of the pool, labeled with the target.
    """
    if isinstance(spec.trigger, EdgeCaseTrigger):
        _, evals = edge_slices(spec.trigger, spec.seed)
        images = tuple(LabeledImage(img.pixels, spec.target_label) for img in evals)
        if not images:
            raise FedsimError("edge pool eval slice is empty")
        return AsrTestSet(images, tuple(-1 for _ in images), spec.target_label)
    images: list[LabeledImage] = []
    provenance: list[int] = []
    for cid, shards in enumerate(all_client_shards):
        if cid == adversary_id:
            continue
        for img in shards.test:
            if img.label == spec.target_label:
                continue
            images.append(apply_trigger(img, spec))
            provenance.append(cid)
    if not images:
        raise FedsimError("ASR test set is empty (every sample has the target label?)")
    return AsrTestSet(tuple(images), tuple(provenance), spec.target_label)


def poisoned_sample_count(train_size: int, spec: PoisonSpec) -> int:
    """How many poisoned samples poisoning will produce for a train set."""
    if isinstance(spec.trigger, EdgeCaseTrigger):
        return len(edge_slices(spec.trigger, spec.seed)[0])
    return int(spec.poison_ratio * train_size)


def global_poison_fraction(adversary_train_size: int, spec: PoisonSpec,
                           total_train_size: int) -> tuple[int, float]:
    """Poisoned-count and global fraction used in the experiment manifest."""
    n_poison = poisoned_sample_count(adversary_train_size, spec)
    if isinstance(spec.trigger, EdgeCaseTrigger):
        total = total_train_size + n_poison
    else:
        total = total_train_size
    return n_poison, n_poison / total
