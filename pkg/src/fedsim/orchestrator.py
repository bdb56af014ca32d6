"""Experiment orchestration: the round loop, adversary scheduling, defense
insertion, evaluation, and metrics logging.

Determinism contract: the data side (dataset, partition, poisoning) is a pure
function of its own specs, every training stream is derived from the plan's
master seed via ``SeedSequence`` keys (master, purpose, client, round),
aggregation iterates clients in sorted-id order, and metrics serialization is
fixed, so the same plan always produces byte-identical ``metrics.csv``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import attacks
from .aggregation import AggregatorSpec, aggregate
from .attacks import AsrTestSet, PoisonSpec, build_asr_testset, poison_client_dataset
from .data import (PartitionSpec, SyntheticSpec, generate_synthetic,
                   load_idx_dataset, load_per_client_dirs, partition, split_3_1_1,
                   to_batch)
from .defense import TuningSpec, simple_tune
from .errors import FedsimError
from .nn import Network, build_convnet
from .params import ParamTree, tree_to_bytes
from .strategies import (ClientState, FineTune, Strategy, StrategySpec,
                         TreePredictor, make_strategy, posthoc_finetune)

log = logging.getLogger("fedsim")

# purpose tags for seed derivation
_SPLIT, _INIT, _SAMPLE, _CLIENT, _NOISE, _POSTHOC = 13, 17, 19, 23, 29, 31


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts (platform independent)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class IdxSource:
    """A flat IDX image/label file pair."""

    images: str
    labels: str
    num_classes: int


@dataclass(frozen=True)
class PerClientDirsSource:
    """``client_<k>/{images.idx,labels.idx}`` directories (natural partition)."""

    root: str
    num_classes: int


@dataclass(frozen=True)
class ModelSpec:
    hidden: int = 64
    channels: tuple[int, int] = (16, 32)

    def __post_init__(self):
        if self.hidden < 1 or len(self.channels) != 2:
            raise FedsimError("model needs hidden >= 1 and exactly two channel widths")


@dataclass(frozen=True)
class FineTunePosthoc:
    """Post-training full-model fine-tuning (the FT baseline)."""

    lr: float = 0.01
    epochs: int = 2

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0:
            raise FedsimError("finetune posthoc needs lr > 0 and epochs >= 0")


PosthocSpec = TuningSpec | FineTunePosthoc


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything that determines one run, including all randomness."""

    dataset: SyntheticSpec | IdxSource | PerClientDirsSource
    partition: PartitionSpec
    model: ModelSpec = ModelSpec()
    strategy: StrategySpec = None
    aggregator: AggregatorSpec = AggregatorSpec()
    poison: PoisonSpec | None = None
    posthoc: PosthocSpec | None = None
    rounds: int = 10
    sample_fraction: float = 0.1
    adversary_id: int = 1
    adversary_period: int = 10
    eval_every: int = 10
    master_seed: int = 0
    batch_size: int = 32
    record_uploads: bool = False

    def __post_init__(self):
        if self.strategy is None:
            raise FedsimError("plan needs a strategy")
        if self.rounds < 0:
            raise FedsimError(f"rounds must be >= 0, got {self.rounds}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise FedsimError("sample_fraction must be in (0, 1]")
        if self.adversary_period < 1:
            raise FedsimError("adversary_period must be >= 1")
        if self.eval_every < 1:
            raise FedsimError("eval_every must be >= 1")
        if not 0 <= self.adversary_id < self.partition.num_clients:
            raise FedsimError(
                f"adversary_id {self.adversary_id} out of range for "
                f"{self.partition.num_clients} clients")
        if self.batch_size < 1:
            raise FedsimError("batch_size must be >= 1")


@dataclass
class MetricsRow:
    round: int
    c_acc: float
    asr: float | None
    krum_winner: int | None
    per_client: list[float]


@dataclass
class MetricsLog:
    num_clients: int
    rows: list[MetricsRow] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def header(self) -> str:
        clients = ",".join(f"c_acc_client_{i}" for i in range(self.num_clients))
        return f"round,c_acc,asr,krum_winner,{clients}"

    def to_csv(self) -> str:
        lines = [self.header()]
        for row in self.rows:
            asr = "" if row.asr is None else f"{row.asr:.6f}"
            winner = "" if row.krum_winner is None else str(row.krum_winner)
            per_client = ",".join(f"{v:.6f}" for v in row.per_client)
            lines.append(f"{row.round},{row.c_acc:.6f},{asr},{winner},{per_client}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Client sampling with the fixed-frequency adversary
# ---------------------------------------------------------------------------

def sample_round(round_idx: int, num_clients: int, sample_fraction: float,
                 adversary_id: int | None, period: int,
                 rng: np.random.Generator) -> list[int]:
    """Sample ceil(fraction * N) distinct clients for one round.

    The adversary participates exactly when ``round_idx`` is a multiple of
    ``period``: on attack rounds it replaces the last-drawn id if absent; on
    other rounds a drawn adversary is replaced by a redraw (or dropped when
    every other client is already in the cohort).
    """
    k = max(1, math.ceil(sample_fraction * num_clients))
    ids = [int(i) for i in rng.choice(num_clients, size=k, replace=False)]
    if adversary_id is not None:
        if round_idx % period == 0:
            if adversary_id not in ids:
                ids[-1] = adversary_id
        elif adversary_id in ids:
            pool = [i for i in range(num_clients)
                    if i != adversary_id and i not in ids]
            if pool:
                ids[ids.index(adversary_id)] = int(rng.choice(pool))
            else:
                ids.remove(adversary_id)
    return sorted(ids)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def eval_clean(states: list[ClientState], strategy: Strategy, server,
               net: Network) -> tuple[float, list[float]]:
    """Per-client top-1 accuracy on each client's own test shard, using the
    strategy's personalized evaluation model; mean is unweighted."""
    per_client = []
    for state in states:
        if not state.shards.test:
            raise FedsimError(f"client {state.client_id}: empty test shard")
        predictor = strategy.eval_predictor(state, server, net)
        images, labels = to_batch(state.shards.test)
        per_client.append(float((predictor.predict(images) == labels).mean()))
    return float(np.mean(per_client)), per_client


def asr_block_for(asr_set: AsrTestSet, client_id: int) -> np.ndarray | None:
    """The triggered samples a client is scored on: its own triggered test
    shard when provenance is per-client, else the whole set (edge-case pools
    carry no client provenance)."""
    own = [img for img, src in zip(asr_set.images, asr_set.provenance)
           if src == client_id]
    if own:
        return to_batch(own)[0]
    if any(src >= 0 for src in asr_set.provenance):
        return None              # per-client set, but nothing from this client
    return to_batch(asr_set.images)[0]


def eval_asr(benign_states: list[ClientState], asr_set: AsrTestSet,
             strategy: Strategy, server, net: Network) -> float:
    """Mean fraction of triggered samples each benign client's personalized
    model classifies as the attack target; each client is scored on the
    triggered version of its own test shard."""
    if not asr_set.images:
        raise FedsimError("ASR test set is empty")
    rates = []
    for state in benign_states:
        images = asr_block_for(asr_set, state.client_id)
        if images is None:
            continue
        predictor = strategy.eval_predictor(state, server, net)
        rates.append(float((predictor.predict(images) == asr_set.target_label).mean()))
    if not rates:
        raise FedsimError("no benign client has ASR samples")
    return float(np.mean(rates))


# ---------------------------------------------------------------------------
# Experiment assembly and the round loop
# ---------------------------------------------------------------------------

def _load_raw_dataset(plan: ExperimentPlan):
    ds = plan.dataset
    if isinstance(ds, SyntheticSpec):
        data = generate_synthetic(ds)
        return data, ds.num_classes, (ds.channels, ds.height, ds.width)
    if isinstance(ds, IdxSource):
        data = load_idx_dataset(ds.images, ds.labels, ds.num_classes)
        shape = data[0].pixels.shape
        return data, ds.num_classes, shape
    if isinstance(ds, PerClientDirsSource):
        data = load_per_client_dirs(ds.root, ds.num_classes)
        shape = data[0][0].pixels.shape
        return data, ds.num_classes, shape
    raise FedsimError(f"unknown dataset source {ds!r}")


def build_clients(plan: ExperimentPlan) -> tuple[list[ClientState], int,
                                                 tuple[int, int, int],
                                                 AsrTestSet | None, dict]:
    """Load, partition, split, and poison; returns client states, class
    count, input shape, the ASR set, and the poison manifest.

    Data-side seeds (dataset, partition, poison) are taken literally from
    their specs, so the client corpus is a fixed benchmark artifact; the
    plan's master seed drives training randomness only (initialization,
    sampling, minibatch order, noise, post-hoc tuning).
    """
    data, num_classes, shape = _load_raw_dataset(plan)
    if data and isinstance(data[0], list) and plan.partition.kind != "natural":
        data = [img for client in data for img in client]
    per_client = partition(data, plan.partition)
    shard_seed = derive_seed(plan.partition.seed, _SPLIT)
    shards = [split_3_1_1(client, derive_seed(shard_seed, cid))
              for cid, client in enumerate(per_client)]

    poison_spec = plan.poison

    states = []
    manifest = {}
    for cid, shard in enumerate(shards):
        train_view = list(shard.train)
        if poison_spec is not None and cid == plan.adversary_id:
            train_view = poison_client_dataset(train_view, poison_spec)
        states.append(ClientState(cid, shard, train_view))

    asr_set = None
    if poison_spec is not None:
        asr_set = build_asr_testset(shards, plan.adversary_id, poison_spec)
        total_train = sum(len(s.train) for s in shards)
        n_poison, fraction = attacks.global_poison_fraction(
            len(shards[plan.adversary_id].train), poison_spec, total_train)
        manifest = {
            "poisoned_count": n_poison,
            "total_train_count": (total_train + n_poison
                                  if isinstance(poison_spec.trigger, attacks.EdgeCaseTrigger)
                                  else total_train),
            "fraction": fraction,
        }
    return states, num_classes, shape, asr_set, manifest


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    log: MetricsLog
    server: object
    states: list[ClientState]
    strategy: Strategy
    asr_set: AsrTestSet | None
    num_classes: int
    input_shape: tuple[int, int, int]
    uploads: dict[int, dict[int, list[bytes]]] = field(default_factory=dict)
    posthoc_models: dict[int, ParamTree] = field(default_factory=dict)

    def make_net(self) -> Network:
        return build_convnet(self.input_shape, self.num_classes,
                             self.plan.model.hidden, tuple(self.plan.model.channels))

    def benign_states(self) -> list[ClientState]:
        if self.plan.poison is None:
            return list(self.states)
        return [s for s in self.states if s.client_id != self.plan.adversary_id]


def run_experiment(plan: ExperimentPlan) -> ExperimentResult:
    """Run the full T-round protocol plus the optional post-hoc stage."""
    states, num_classes, shape, asr_set, poison_manifest = build_clients(plan)
    strategy = make_strategy(plan.strategy)

    def net_builder(rng):
        return build_convnet(shape, num_classes, plan.model.hidden,
                             tuple(plan.model.channels), rng)

    server = strategy.init_server(
        net_builder, np.random.default_rng([plan.master_seed, _INIT]))
    for state in states:
        strategy.init_client(state, server)

    net = net_builder(np.random.default_rng(0))  # scratch instance, reloaded per use
    adversary = plan.adversary_id if plan.poison is not None else None
    metrics = MetricsLog(num_clients=plan.partition.num_clients)

    def evaluate(round_idx: int, winner: int | None) -> None:
        c_acc, per_client = eval_clean(states, strategy, server, net)
        asr = None
        if asr_set is not None:
            benign = [s for s in states if s.client_id != plan.adversary_id]
            asr = eval_asr(benign, asr_set, strategy, server, net)
        metrics.rows.append(MetricsRow(round_idx, c_acc, asr, winner, per_client))
        log.info("round %d: c_acc=%.4f asr=%s", round_idx, c_acc,
                 "-" if asr is None else f"{asr:.4f}")

    evaluate(0, None)
    krum_winners: list[tuple[int, int]] = []
    uploads: dict[int, dict[int, list[bytes]]] = {}
    for round_idx in range(1, plan.rounds + 1):
        cohort = sample_round(
            round_idx, plan.partition.num_clients, plan.sample_fraction,
            adversary, plan.adversary_period,
            np.random.default_rng([plan.master_seed, _SAMPLE, round_idx]))
        broadcast = strategy.broadcast(server)
        round_updates = []
        try:
            for cid in cohort:
                rng = np.random.default_rng(
                    [plan.master_seed, _CLIENT, cid, round_idx])
                updates = strategy.local_train(states[cid], broadcast, net, rng,
                                               plan.batch_size)
                round_updates.append(updates)
            if plan.record_uploads:
                uploads[round_idx] = {
                    cid: [tree_to_bytes(u.delta) for u in updates]
                    for cid, updates in zip(cohort, round_updates)
                }

            noise_rng = np.random.default_rng([plan.master_seed, _NOISE, round_idx])
            aggregates = []
            winner = None
            for slot in range(strategy.num_uploads):
                tree, win = aggregate(plan.aggregator,
                                      [u[slot] for u in round_updates], noise_rng)
                aggregates.append(tree)
                if slot == 0:
                    winner = win
            server = strategy.apply_aggregate(server, aggregates)
        except FedsimError as exc:
            raise FedsimError(f"round {round_idx}: {exc}") from exc
        if winner is not None:
            krum_winners.append((round_idx, winner))
        if round_idx % plan.eval_every == 0 or round_idx == plan.rounds:
            evaluate(round_idx, winner)

    result = ExperimentResult(plan, metrics, server, states, strategy, asr_set,
                              num_classes, shape, uploads=uploads)

    final = metrics.rows[-1]
    metrics.summary = {
        "strategy": strategy.name,
        "master_seed": plan.master_seed,
        "rounds": plan.rounds,
        "final_c_acc": final.c_acc,
        "final_asr": final.asr,
        "krum_winners": krum_winners,
        "poison": poison_manifest or None,
        "posthoc": None,
    }

    posthoc_spec = plan.posthoc
    if posthoc_spec is None and isinstance(strategy, FineTune):
        posthoc_spec = FineTunePosthoc(plan.strategy.ft_lr, plan.strategy.ft_epochs)
    if posthoc_spec is not None:
        posthoc = apply_posthoc(result, posthoc_spec)
        result.posthoc_models = posthoc["models"]
        metrics.summary["posthoc"] = {k: v for k, v in posthoc.items() if k != "models"}
    return result


def apply_posthoc(result: ExperimentResult, spec: PosthocSpec) -> dict:
    """Tune every client's evaluation model after training and re-evaluate.

    Returns per-client tuned trees plus the post-defense C-Acc and ASR.
    """
    plan = result.plan
    net = result.make_net()
    strategy = result.strategy
    tuned: dict[int, ParamTree] = {}
    for state in result.states:
        rng = np.random.default_rng([plan.master_seed, _POSTHOC, state.client_id])
        base = strategy.eval_tree(state, result.server)
        if isinstance(spec, TuningSpec):
            tuned[state.client_id] = simple_tune(base, state.shards, spec, net, rng)
        else:
            tuned[state.client_id] = posthoc_finetune(
                state, base, net, spec.lr, spec.epochs, plan.batch_size, rng)

    per_client = []
    for state in result.states:
        images, labels = to_batch(state.shards.test)
        predictor = TreePredictor(net, tuned[state.client_id])
        per_client.append(float((predictor.predict(images) == labels).mean()))
    c_acc = float(np.mean(per_client))

    asr = None
    if result.asr_set is not None:
        rates = []
        for s in result.benign_states():
            images = asr_block_for(result.asr_set, s.client_id)
            if images is None:
                continue
            predictor = TreePredictor(net, tuned[s.client_id])
            rates.append(float((predictor.predict(images)
                                == result.asr_set.target_label).mean()))
        asr = float(np.mean(rates))

    mode = spec.mode if isinstance(spec, TuningSpec) else "finetune"
    return {"mode": mode, "c_acc": c_acc, "asr": asr,
            "per_client_c_acc": per_client, "models": tuned}
