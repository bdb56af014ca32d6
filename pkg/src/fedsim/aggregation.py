"""Server-side aggregation rules and baseline defenses.

Weighted averaging of client updates, plus the classic update-level
defenses: l2 norm clipping, Gaussian noising, Krum, and Multi-Krum.
Aggregation iterates clients in sorted-id order so results are independent
of arrival order and bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CongruenceError, FedsimError
from .params import ModelUpdate, ParamTree, tree_l2_norm, tree_scale


@dataclass(frozen=True)
class NormClip:
    """Rescale each update so its l2 norm does not exceed ``c``."""

    c: float

    def __post_init__(self):
        if self.c <= 0:
            raise FedsimError(f"clip threshold must be > 0, got {self.c}")


@dataclass(frozen=True)
class AddNoise:
    """Add sigma * v, v ~ N(0, 1), elementwise to each update."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise FedsimError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class AggregatorSpec:
    """Aggregation rule plus the pre-ops applied to every update first.

    ``pre_ops`` compose left to right. ``f`` is the assumed number of
    Byzantine clients for (Multi-)Krum; ``k`` is Multi-Krum's selection count.
    """

    rule: str = "fedavg"           # "fedavg" | "krum" | "multikrum"
    f: int = 1
    k: int = 1
    pre_ops: tuple = ()
    weighted_multikrum: bool = False

    def __post_init__(self):
        if self.rule not in ("fedavg", "krum", "multikrum"):
            raise FedsimError(f"unknown aggregation rule {self.rule!r}")
        if self.f < 0:
            raise FedsimError("f must be >= 0")
        if self.k < 1:
            raise FedsimError("k must be >= 1")


def _check_congruent(updates: list[ModelUpdate], op: str) -> None:
    if not updates:
        raise FedsimError(f"{op}: no updates")
    first = updates[0].delta
    for u in updates[1:]:
        if not first.congruent(u.delta):
            raise CongruenceError(f"{op}: updates are not congruent")


def _sorted_by_client(updates: list[ModelUpdate]) -> list[ModelUpdate]:
    if all(u.client_id is not None for u in updates):
        return sorted(updates, key=lambda u: u.client_id)
    return list(updates)


def fedavg_aggregate(updates: list[ModelUpdate]) -> ParamTree:
    """Sample-count-weighted average of update deltas.

    Computes sum_j (|S_j| / |S|) * delta_j with |S| the total sample count,
    accumulating in sorted client-id order.
    """
    _check_congruent(updates, "fedavg_aggregate")
    ordered = _sorted_by_client(updates)
    total = sum(u.sample_count for u in ordered)
    template = ordered[0].delta
    acc = {n: np.zeros_like(arr) for n, arr, _ in template.items()}
    for u in ordered:
        weight = u.sample_count / total
        for name in u.delta.names():
            acc[name] = acc[name] + weight * u.delta.get(name)
    return ParamTree({n: (acc[n], template.tag(n)) for n in acc})


def norm_clip(update: ModelUpdate, c: float) -> ModelUpdate:
    """Scale the delta by min(1, c / ||delta||); direction is preserved."""
    if c <= 0:
        raise FedsimError(f"clip threshold must be > 0, got {c}")
    norm = tree_l2_norm(update.delta)
    if norm <= c:
        return update
    return ModelUpdate(tree_scale(c / norm, update.delta),
                       update.sample_count, update.client_id)


def add_noise(update: ModelUpdate, sigma: float,
              rng: np.random.Generator) -> ModelUpdate:
    """Add elementwise Gaussian noise drawn from the given seeded stream."""
    if sigma < 0:
        raise FedsimError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return update
    noisy = {
        n: (arr + sigma * rng.standard_normal(arr.shape), tag)
        for n, arr, tag in update.delta.items()
    }
    return ModelUpdate(ParamTree(noisy), update.sample_count, update.client_id)


def krum_scores(updates: list[ModelUpdate], f: int) -> np.ndarray:
    """Per-update score: the sum of its n-f-2 smallest squared distances."""
    n = len(updates)
    if n < f + 3:
        raise FedsimError(f"krum needs n >= f + 3, got n={n}, f={f}")
    vectors = np.stack([u.delta.flatten() for u in updates])
    sq = ((vectors[:, None, :] - vectors[None, :, :]) ** 2).sum(axis=2)
    closest = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(sq[i], i)
        others.sort()
        scores[i] = others[:closest].sum()
    return scores


def krum_select(updates: list[ModelUpdate], f: int) -> int:
    """Index of the update most similar to its peers; ties pick the lowest."""
    scores = krum_scores(updates, f)
    return int(np.argmin(scores))


def multi_krum_aggregate(updates: list[ModelUpdate], f: int, k: int,
                         weighted: bool = False) -> ParamTree:
    """Average the k lowest-score updates (unweighted unless ``weighted``)."""
    n = len(updates)
    if k < 1 or k > n - f - 2:
        raise FedsimError(
            f"multi-krum needs 1 <= k <= n - f - 2, got n={n}, f={f}, k={k}")
    scores = krum_scores(updates, f)
    chosen = np.argsort(scores, kind="stable")[:k]
    selected = [updates[i] for i in chosen]
    if weighted:
        return fedavg_aggregate(selected)
    uniform = [ModelUpdate(u.delta, 1, u.client_id) for u in selected]
    return fedavg_aggregate(uniform)


def aggregate(spec: AggregatorSpec, updates: list[ModelUpdate],
              noise_rng: np.random.Generator | None = None
              ) -> tuple[ParamTree, int | None]:
    """Apply pre-ops to every update, then the configured rule.

    Returns the aggregated delta and, for (Multi-)Krum, the winning update's
    client id (Multi-Krum reports the best-ranked member).
    """
    _check_congruent(updates, "aggregate")
    processed = _sorted_by_client(updates)
    for op in spec.pre_ops:
        if isinstance(op, NormClip):
            processed = [norm_clip(u, op.c) for u in processed]
        elif isinstance(op, AddNoise):
            if noise_rng is None:
                noise_rng = np.random.default_rng(op.seed)
            processed = [add_noise(u, op.sigma, noise_rng) for u in processed]
        else:
            raise FedsimError(f"unknown pre-op {op!r}")
    if spec.rule == "fedavg":
        return fedavg_aggregate(processed), None
    if spec.rule == "krum":
        winner = krum_select(processed, spec.f)
        return processed[winner].delta, processed[winner].client_id
    winner = krum_select(processed, spec.f)
    tree = multi_krum_aggregate(processed, spec.f, spec.k,
                                weighted=spec.weighted_multikrum)
    return tree, processed[winner].client_id
