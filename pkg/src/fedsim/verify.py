"""Independent oracles and the built-in invariant suite.

The oracles here deliberately avoid the code paths they check: gradients come
from central finite differences, weighted averaging from flattened vectors,
and (Multi-)Krum from an explicit O(n^2) loop. The `fedsim verify` command
runs the suite and reports one pass/fail line per check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import fedavg_aggregate, krum_select, multi_krum_aggregate
from .data import PartitionSpec, SyntheticSpec
from .nn import Network, batch_loss, build_convnet
from .params import (ModelUpdate, ParamTag, ParamTree, ShareFilter, apply_filter,
                     merge_into, names_in_bytes, parse_tag_manifest, tag_manifest,
                     tree_from_bytes, tree_to_bytes)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def fd_gradients(net: Network, images: np.ndarray, targets: np.ndarray, *,
                 loss: str = "cross_entropy", h: float = 1e-5,
                 sample_weight: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradients of the mean batch loss for every
    trainable parameter; the network state is restored afterwards."""
    net.train()
    snapshot = net.param_tree()

    def loss_value() -> float:
        return batch_loss(net.forward(images), targets, loss, sample_weight)

    grads = {}
    for layer in net.layers:
        for slot, arr in layer.params.items():
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                lp = loss_value()
                arr[idx] = orig - h
                lm = loss_value()
                arr[idx] = orig
                g[idx] = (lp - lm) / (2.0 * h)
            grads[f"{layer.name}.{slot}"] = g
    net.load_tree(snapshot)
    return grads


def max_rel_error(analytic: dict[str, np.ndarray],
                  numeric: dict[str, np.ndarray], floor: float = 1e-3) -> float:
    """Worst elementwise |a - n| / max(floor, |a|, |n|) across all entries.

    The floor turns the check into an absolute one for near-zero gradients,
    where central differences carry ~1e-10 of roundoff that would otherwise
    swamp a true relative comparison.
    """
    worst = 0.0
    for key, a in analytic.items():
        n = numeric[key]
        denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def flat_weighted_average(updates: list[ModelUpdate]) -> np.ndarray:
    """Flatten-everything oracle for the weighted average of update deltas."""
    total = sum(u.sample_count for u in updates)
    return sum((u.sample_count / total) * u.delta.flatten() for u in updates)


def krum_bruteforce(vectors: list[np.ndarray], f: int) -> tuple[int, list[float]]:
    """Plain-loop Krum: scores and the winning index, ties to the lowest."""
    n = len(vectors)
    scores = []
    for i in range(n):
        dists = []
        for j in range(n):
            if j == i:
                continue
            diff = vectors[i] - vectors[j]
            dists.append(float(np.dot(diff, diff)))
        dists.sort()
        scores.append(sum(dists[: n - f - 2]))
    winner = min(range(n), key=lambda i: (scores[i], i))
    return winner, scores


def multi_krum_bruteforce(vectors: list[np.ndarray], f: int, k: int) -> np.ndarray:
    """Mean of the k lowest-score vectors under the brute-force scores."""
    _, scores = krum_bruteforce(vectors, f)
    chosen = sorted(range(len(vectors)), key=lambda i: (scores[i], i))[:k]
    return np.mean([vectors[i] for i in chosen], axis=0)


# ---------------------------------------------------------------------------
# Invariant suite used by the `verify` CLI command
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _random_update(rng, shapes, client_id) -> ModelUpdate:
    tree = ParamTree({f"p{i}": (rng.standard_normal(s), ParamTag.BODY)
                      for i, s in enumerate(shapes)})
    return ModelUpdate(tree, int(rng.integers(1, 50)), client_id)


def _check_gradients(rng) -> CheckResult:
    worst = 0.0
    for trial in range(5):
        net = build_convnet((1, 6, 6), 4, hidden=6, channels=(2, 3),
                            rng=np.random.default_rng([91, trial]))
        images = rng.standard_normal((3, 1, 6, 6))
        labels = rng.integers(0, 4, size=3)
        net.forward(images)
        analytic, _ = net.backward(labels)
        numeric = fd_gradients(net, images, labels)
        worst = max(worst, max_rel_error(analytic, numeric))
    return CheckResult("gradient-finite-difference", worst <= 1e-4,
                       f"max rel err {worst:.2e}")


def _check_fedavg(rng) -> CheckResult:
    shapes = [(3, 2), (4,), (2, 2, 2)]
    updates = [_random_update(rng, shapes, cid) for cid in range(5)]
    got = fedavg_aggregate(updates).flatten()
    want = flat_weighted_average(updates)
    err = float(np.abs(got - want).max())
    return CheckResult("fedavg-flatten-oracle", err <= 1e-12, f"max abs err {err:.2e}")


def _check_krum(rng) -> CheckResult:
    for _ in range(30):
        n = int(rng.integers(4, 9))
        f = int(rng.integers(0, max(1, n - 3)))
        vectors = [rng.standard_normal(6) for _ in range(n)]
        updates = [ModelUpdate(ParamTree({"v": (v, ParamTag.BODY)}), 1, i)
                   for i, v in enumerate(vectors)]
        want, _ = krum_bruteforce(vectors, f)
        if krum_select(updates, f) != want:
            return CheckResult("krum-bruteforce-oracle", False,
                               f"mismatch at n={n} f={f}")
        k_max = n - f - 2
        if k_max >= 1:
            k = int(rng.integers(1, k_max + 1))
            got = multi_krum_aggregate(updates, f, k).flatten()
            want_mean = multi_krum_bruteforce(vectors, f, k)
            if np.abs(got - want_mean).max() > 1e-12:
                return CheckResult("krum-bruteforce-oracle", False,
                                   f"multi-krum mismatch at n={n} f={f} k={k}")
    return CheckResult("krum-bruteforce-oracle", True, "30 random instances")


def _check_serialization(rng) -> CheckResult:
    tree = ParamTree({
        "a.weight": (rng.standard_normal((3, 2)), ParamTag.BODY),
        "b.gamma": (rng.standard_normal(4), ParamTag.BN_LEARNABLE),
        "b.running_mean": (rng.standard_normal(4), ParamTag.BN_STAT),
        "head.weight": (rng.standard_normal((2, 5)), ParamTag.HEAD),
    })
    blob = tree_to_bytes(tree)
    back = tree_from_bytes(blob, parse_tag_manifest(tag_manifest(tree)))
    ok = tree.equal(back) and names_in_bytes(blob) == tree.names()
    return CheckResult("serialization-round-trip", ok)


def _check_filter_merge(rng) -> CheckResult:
    net = build_convnet((1, 8, 8), 5, hidden=8, channels=(2, 3),
                        rng=np.random.default_rng(7))
    base = net.param_tree()
    other = ParamTree({n: (arr + 1.0, t) for n, arr, t in base.items()})
    for policy in ShareFilter:
        merged = merge_into(base, apply_filter(other, policy))
        for name in base.names():
            want = other.get(name) if policy.admits(base.tag(name)) else base.get(name)
            if not np.array_equal(merged.get(name), want):
                return CheckResult("filter-merge-complementarity", False,
                                   f"{policy.value}: {name}")
    return CheckResult("filter-merge-complementarity", True)


def _check_sharing_hygiene(rng) -> CheckResult:
    from .orchestrator import ExperimentPlan, run_experiment
    from .strategies import FedRepSpec

    plan = ExperimentPlan(
        dataset=SyntheticSpec(num_classes=4, height=8, width=8, per_class=30, seed=5),
        partition=PartitionSpec("iid", num_clients=4, seed=5),
        strategy=FedRepSpec(body_epochs=1, head_epochs=1),
        rounds=6, sample_fraction=0.5, eval_every=6, master_seed=5,
        record_uploads=True,
    )
    result = run_experiment(plan)
    head_names = {n for n in result.server.names()
                  if result.server.tag(n) is ParamTag.HEAD}
    for round_blobs in result.uploads.values():
        for blobs in round_blobs.values():
            for blob in blobs:
                if head_names & set(names_in_bytes(blob)):
                    return CheckResult("fedrep-upload-hygiene", False,
                                       "head parameter found on the wire")
    return CheckResult("fedrep-upload-hygiene", True,
                       f"{len(result.uploads)} rounds checked")


def _check_determinism(rng) -> CheckResult:
    from .orchestrator import ExperimentPlan, run_experiment
    from .strategies import FedAvgSpec

    plan = ExperimentPlan(
        dataset=SyntheticSpec(num_classes=4, height=8, width=8, per_class=25, seed=3),
        partition=PartitionSpec("dirichlet", num_clients=4, seed=3, alpha=0.5),
        strategy=FedAvgSpec(lr=0.05, epochs=1),
        rounds=4, sample_fraction=0.5, eval_every=2, master_seed=11,
    )
    a = run_experiment(plan).log.to_csv()
    b = run_experiment(plan).log.to_csv()
    return CheckResult("repeat-seed-determinism", a == b)


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Run every built-in invariant check."""
    rng = np.random.default_rng([seed, 97])
    checks = [_check_gradients, _check_fedavg, _check_krum, _check_serialization,
              _check_filter_merge, _check_sharing_hygiene, _check_determinism]
    return [check(rng) for check in checks]
