"""Acceptance suite: one test per criterion, at the stated tolerances.

The trend criteria (4-8) share one desk-scale battery: a fixed synthetic
10-class corpus split over 20 clients (Dirichlet alpha=0.5, partition seed 8
chosen so the adversary's shard is median-sized), a small ConvNet, one
adversary poisoning 50% of its samples with the corner-patch trigger every
2nd round, 200 rounds, 3 training seeds. Runs are executed once per module
and reused across criteria. Each test prints its pass line with the measured
numbers (run with ``pytest -s`` to see them).
"""

import time

import numpy as np
import pytest

from fedsim.aggregation import (AggregatorSpec, NormClip, fedavg_aggregate,
                                krum_select, multi_krum_aggregate)
from fedsim.attacks import BadNetTrigger, PoisonSpec, global_poison_fraction
from fedsim.data import PartitionSpec, SyntheticSpec, to_batch
from fedsim.defense import TuningSpec, extract_features
from fedsim.nn import (BatchNorm, Conv2D, Dense, Flatten, MaxPool2D, Network,
                       ReLU)
from fedsim.orchestrator import (ExperimentPlan, ModelSpec, apply_posthoc,
                                 run_experiment)
from fedsim.params import ModelUpdate, ParamTag, ParamTree, names_in_bytes
from fedsim.strategies import FedAvgSpec, FedBnSpec, FedRepSpec
from fedsim.verify import (fd_gradients, flat_weighted_average, krum_bruteforce,
                           max_rel_error, multi_krum_bruteforce)

SEEDS = (1, 2, 3)
CLIP_GRID = (0.03, 0.02, 0.01)


def battery_plan(strategy, master_seed, *, poison=True, partition_kind="dirichlet",
                 aggregator=None, rounds=200):
    return ExperimentPlan(
        dataset=SyntheticSpec(num_classes=10, height=8, width=8, per_class=200,
                              noise=0.3, seed=0),
        partition=PartitionSpec(partition_kind, num_clients=20, seed=8, alpha=0.5),
        model=ModelSpec(hidden=64, channels=(8, 16)),
        strategy=strategy,
        aggregator=aggregator or AggregatorSpec(),
        poison=(PoisonSpec(BadNetTrigger(), target_label=1, poison_ratio=0.5,
                           seed=8) if poison else None),
        rounds=rounds,
        sample_fraction=0.1,
        adversary_id=1,
        adversary_period=2,
        eval_every=100,
        master_seed=master_seed,
    )


FEDREP = FedRepSpec(body_lr=0.1, body_epochs=1, head_lr=0.1, head_epochs=2)
# head retraining budget scaled to the tiny local shards (~60 samples)
TUNE_LR, TUNE_EPOCHS = 0.1, 100


@pytest.fixture(scope="module")
def battery():
    t0 = time.time()
    runs = {}
    for seed in SEEDS:
        runs["fedavg", seed] = run_experiment(battery_plan(FedAvgSpec(), seed))
        runs["clean", seed] = run_experiment(
            battery_plan(FedAvgSpec(), seed, poison=False))
        runs["fedrep", seed] = run_experiment(battery_plan(FEDREP, seed))
        runs["fedbn_iid", seed] = run_experiment(
            battery_plan(FedBnSpec(), seed, partition_kind="iid"))
        runs["fedbn_dir", seed] = run_experiment(battery_plan(FedBnSpec(), seed))
        for c in CLIP_GRID:
            agg = AggregatorSpec("fedavg", pre_ops=(NormClip(c),))
            runs[("clip", c), seed] = run_experiment(
                battery_plan(FedAvgSpec(), seed, aggregator=agg))
    runs["elapsed"] = time.time() - t0
    return runs


def mean_metric(runs, key, metric="final_asr"):
    return float(np.mean([runs[key, s].log.summary[metric] for s in SEEDS]))


# ---------------------------------------------------------------------------
# 1. gradient oracle
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(50):
        c1 = int(rng.integers(1, 4))
        c2 = int(rng.integers(1, 4))
        hidden = int(rng.integers(3, 8))
        classes = int(rng.integers(2, 6))
        h = int(rng.integers(4, 7))
        stack = [Conv2D(1, c1), BatchNorm(c1), ReLU(), MaxPool2D(),
                 Conv2D(c1, c2), Flatten(),
                 Dense(c2 * (h // 2) * (h // 2), hidden), ReLU(),
                 Dense(hidden, classes)]
        net = Network(stack)
        for layer in net.layers:
            layer.init_params(rng)
        x = rng.standard_normal((3, 1, h, h))
        y = rng.integers(0, classes, size=3)
        net.train().forward(x)
        analytic, _ = net.backward(y)
        numeric = fd_gradients(net, x, y)
        worst = max(worst, max_rel_error(analytic, numeric))
    elapsed = time.time() - t0
    assert worst <= 1e-4, f"max rel err {worst:.2e}"
    assert elapsed < 60.0
    print(f"\n[criterion 1] PASS: 50 configs, max rel err {worst:.2e}, "
          f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. aggregation oracles
# ---------------------------------------------------------------------------

def test_criterion_2_aggregation_oracles():
    t0 = time.time()
    rng = np.random.default_rng(77)
    worst_avg = 0.0
    for _ in range(50):
        ups = [ModelUpdate(
            ParamTree({"a": (rng.standard_normal((3, 2)), ParamTag.BODY),
                       "b": (rng.standard_normal(5), ParamTag.BODY)}),
            int(rng.integers(1, 30)), cid) for cid in range(6)]
        got = fedavg_aggregate(ups).flatten()
        worst_avg = max(worst_avg, float(np.abs(got - flat_weighted_average(ups)).max()))
    assert worst_avg <= 1e-12

    for trial in range(100):
        n = int(rng.integers(4, 9))
        f = int(rng.integers(0, n - 3)) if n > 4 else 0
        vectors = [rng.standard_normal(4) for _ in range(n)]
        if trial % 3 == 0:
            vectors[1] = vectors[0].copy()        # exact tie case
        ups = [ModelUpdate(ParamTree({"v": (v, ParamTag.BODY)}), 1, i)
               for i, v in enumerate(vectors)]
        want_winner, _ = krum_bruteforce(vectors, f)
        assert krum_select(ups, f) == want_winner, (trial, n, f)
        k_max = n - f - 2
        if k_max >= 1:
            k = int(rng.integers(1, k_max + 1))
            got = multi_krum_aggregate(ups, f, k).flatten()
            want = multi_krum_bruteforce(vectors, f, k)
            assert np.abs(got - want).max() <= 1e-12, (trial, n, f, k)
    elapsed = time.time() - t0
    assert elapsed < 60.0
    print(f"\n[criterion 2] PASS: fedavg err {worst_avg:.2e}, 100 krum "
          f"instances matched, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. sharing hygiene on the wire
# ---------------------------------------------------------------------------

def hygiene_plan(strategy):
    return ExperimentPlan(
        dataset=SyntheticSpec(num_classes=4, height=8, width=8, per_class=50,
                              noise=0.2, seed=3),
        partition=PartitionSpec("iid", num_clients=6, seed=3),
        model=ModelSpec(hidden=8, channels=(2, 3)),
        strategy=strategy,
        poison=PoisonSpec(BadNetTrigger(), target_label=1, seed=3),
        rounds=50, sample_fraction=0.5, adversary_id=1, adversary_period=5,
        eval_every=50, master_seed=4, record_uploads=True,
    )


def test_criterion_3_sharing_hygiene():
    from fedsim.params import ShareFilter

    cases = [
        ("fedrep", FedRepSpec(), ShareFilter.BODY_ONLY),
        ("fedbn", FedBnSpec(), ShareFilter.EXCLUDE_BN),
        ("fed-sta", FedBnSpec(filter=ShareFilter.EXCLUDE_BN_STAT),
         ShareFilter.EXCLUDE_BN_STAT),
        ("fed-para", FedBnSpec(filter=ShareFilter.EXCLUDE_BN_LEARNABLE),
         ShareFilter.EXCLUDE_BN_LEARNABLE),
    ]
    checked = []
    for name, spec, policy in cases:
        result = run_experiment(hygiene_plan(spec))
        rejected = {n for n in result.server.names()
                    if not policy.admits(result.server.tag(n))}
        assert rejected, name
        assert len(result.uploads) == 50
        blobs_seen = 0
        for round_blobs in result.uploads.values():
            for blob_list in round_blobs.values():
                for blob in blob_list:
                    assert rejected.isdisjoint(names_in_bytes(blob)), name
                    blobs_seen += 1
        checked.append(f"{name}:{blobs_seen}")
    print(f"\n[criterion 3] PASS: clean wire bytes over 50-round runs "
          f"({', '.join(checked)})")


# ---------------------------------------------------------------------------
# 4-8. desk-scale trend reproductions (shared battery)
# ---------------------------------------------------------------------------

def test_criterion_4_attack_reproduction(battery):
    asr = mean_metric(battery, "fedavg")
    c_acc = mean_metric(battery, "fedavg", "final_c_acc")
    control = mean_metric(battery, "clean", "final_c_acc")
    gap = abs(c_acc - control)
    assert asr >= 0.60, f"FedAvg mean ASR {asr:.3f}"
    assert gap <= 0.03, f"stealth gap {gap * 100:.1f} points"
    assert battery["elapsed"] < 1800.0
    print(f"\n[criterion 4] PASS: FedAvg ASR {asr:.3f} >= 0.60, C-Acc "
          f"{c_acc:.3f} within {gap * 100:.1f} pts of control {control:.3f}, "
          f"battery {battery['elapsed']:.0f}s")


def test_criterion_5_fedrep_robustness(battery):
    fedavg_asr = mean_metric(battery, "fedavg")
    rep_asr = mean_metric(battery, "fedrep")
    rep_c = mean_metric(battery, "fedrep", "final_c_acc")
    fedavg_c = mean_metric(battery, "fedavg", "final_c_acc")
    gap = abs(rep_c - fedavg_c)
    assert rep_asr <= 0.5 * fedavg_asr, f"{rep_asr:.3f} vs {fedavg_asr:.3f}"
    assert gap <= 0.05, f"C-Acc gap {gap * 100:.1f} points"
    print(f"\n[criterion 5] PASS: FedRep ASR {rep_asr:.3f} <= 0.5 x "
          f"{fedavg_asr:.3f}, C-Acc within {gap * 100:.1f} pts")


def test_criterion_6_fedbn_iid_vs_noniid(battery):
    iid = mean_metric(battery, "fedbn_iid")
    noniid = mean_metric(battery, "fedbn_dir")
    assert iid >= noniid, f"IID {iid:.3f} vs Dirichlet {noniid:.3f}"
    print(f"\n[criterion 6] PASS: FedBN ASR IID {iid:.3f} >= "
          f"Dirichlet {noniid:.3f}")


def test_criterion_7_simple_tuning(battery):
    base_asr = mean_metric(battery, "fedavg")
    base_c = mean_metric(battery, "fedavg", "final_c_acc")
    st, ftl = [], []
    for seed in SEEDS:
        result = battery["fedavg", seed]
        st.append(apply_posthoc(result, TuningSpec("simple_tuning", lr=TUNE_LR,
                                                   epochs=TUNE_EPOCHS)))
        ftl.append(apply_posthoc(result, TuningSpec("ft_linear", lr=TUNE_LR,
                                                    epochs=TUNE_EPOCHS)))
    st_asr = float(np.mean([r["asr"] for r in st]))
    st_c = float(np.mean([r["c_acc"] for r in st]))
    ftl_asr = float(np.mean([r["asr"] for r in ftl]))
    st_drop = 1.0 - st_asr / base_asr
    ftl_drop = 1.0 - ftl_asr / base_asr
    c_shift = abs(st_c - base_c)
    assert st_drop >= 0.40, f"Simple-Tuning relative drop {st_drop:.2%}"
    assert c_shift <= 0.03, f"C-Acc shift {c_shift * 100:.1f} points"
    assert ftl_drop < 0.10, f"FT-linear relative drop {ftl_drop:.2%}"
    print(f"\n[criterion 7] PASS: ST drops ASR {base_asr:.3f} -> {st_asr:.3f} "
          f"({st_drop:.0%}), C-Acc shift {c_shift * 100:.1f} pts; FT-linear "
          f"drop {ftl_drop:.0%} < 10%")


def test_criterion_8_defense_tradeoff(battery):
    fedavg_asr = mean_metric(battery, "fedavg")
    fedavg_c = mean_metric(battery, "fedavg", "final_c_acc")
    rep_asr = mean_metric(battery, "fedrep")
    rep_loss = fedavg_c - mean_metric(battery, "fedrep", "final_c_acc")
    chosen = None
    for c in CLIP_GRID:                      # largest clip that halves ASR
        if mean_metric(battery, ("clip", c)) <= 0.5 * fedavg_asr:
            chosen = c
            break
    assert chosen is not None, "no clip threshold halved the ASR"
    clip_asr = mean_metric(battery, ("clip", chosen))
    clip_loss = fedavg_c - mean_metric(battery, ("clip", chosen), "final_c_acc")
    assert rep_asr <= clip_asr, f"FedRep {rep_asr:.3f} vs clip {clip_asr:.3f}"
    assert clip_loss >= rep_loss + 0.02, (
        f"clip loses {clip_loss * 100:.1f} pts vs FedRep {rep_loss * 100:.1f}")
    print(f"\n[criterion 8] PASS: clip c={chosen} halves ASR "
          f"({clip_asr:.3f}) but loses {clip_loss * 100:.1f} pts C-Acc vs "
          f"FedRep's {rep_loss * 100:.1f} pts at ASR {rep_asr:.3f}")


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

def test_criterion_9_determinism(battery):
    plan = battery_plan(FedAvgSpec(), SEEDS[0])
    rerun = run_experiment(plan)
    a = battery["fedavg", SEEDS[0]].log.to_csv().encode()
    b = rerun.log.to_csv().encode()
    assert a == b
    print(f"\n[criterion 9] PASS: repeated master seed {SEEDS[0]} gives "
          f"byte-identical metrics.csv ({len(a)} bytes)")


# ---------------------------------------------------------------------------
# 10. poison accounting
# ---------------------------------------------------------------------------

def test_criterion_10_poison_accounting():
    spec = PoisonSpec(BadNetTrigger(), target_label=9, poison_ratio=0.5)
    count, fraction = global_poison_fraction(550, spec, 50_000)
    assert count == 275
    assert fraction == 275 / 50_000
    assert fraction == pytest.approx(0.0055)
    print(f"\n[criterion 10] PASS: 550 x 0.5 over 50,000 -> {count}/50000 "
          f"= {fraction:.2%}")


# ---------------------------------------------------------------------------
# extra fixed-run check: trained features cluster by class
# ---------------------------------------------------------------------------

def test_trained_features_cluster_by_class(battery):
    result = battery["clean", SEEDS[0]]
    net = result.make_net()
    state = result.states[0]
    images, labels = to_batch(state.shards.test)
    feats = extract_features(result.server, images, net)
    intra, inter = [], []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            d = float(np.linalg.norm(feats[i] - feats[j]))
            (intra if labels[i] == labels[j] else inter).append(d)
    assert intra and inter
    assert np.mean(intra) < np.mean(inter)
    print(f"\n[features] PASS: intra-class {np.mean(intra):.2f} < "
          f"inter-class {np.mean(inter):.2f}")
