"""Client-side post-hoc defenses.

Simple-Tuning reinitializes each client's linear classifier and retrains it
on the client's own clean data with the body (including batch-norm running
statistics) frozen in eval semantics. FT-linear is the matching baseline
that retrains the head without reinitializing it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientShards, to_batch
from .errors import FedsimError
from .nn import Dense, Network, SgdConfig, kaiming_uniform
from .params import ParamTag, ParamTree, merge_into
from .strategies import run_sgd

MODE_SIMPLE_TUNING = "simple_tuning"
MODE_FT_LINEAR = "ft_linear"


@dataclass(frozen=True)
class TuningSpec:
    """Head-only tuning configuration; constants follow the evaluated setup
    (Kaiming-uniform reinit, lr 0.005, 10 epochs)."""

    mode: str = MODE_SIMPLE_TUNING
    lr: float = 0.005
    epochs: int = 10
    batch_size: int = 32

    def __post_init__(self):
        if self.mode not in (MODE_SIMPLE_TUNING, MODE_FT_LINEAR):
            raise FedsimError(f"unknown tuning mode {self.mode!r}")
        if self.lr <= 0:
            raise FedsimError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise FedsimError(f"epochs must be >= 0, got {self.epochs}")


def extract_features(model: ParamTree, batch: np.ndarray, net: Network,
                     chunk: int = 512) -> np.ndarray:
    """Eval-mode activations entering the head layer."""
    net.load_tree(model)
    return np.concatenate([net.forward_features(batch[s:s + chunk])
                           for s in range(0, len(batch), chunk)])


def _head_layer(net: Network) -> Dense:
    head = net.layers[net.head_index]
    if head.kind != "dense":
        raise FedsimError("model head is not a dense layer")
    return head


def simple_tune(model: ParamTree, shards: ClientShards, spec: TuningSpec,
                net: Network, rng: np.random.Generator) -> ParamTree:
    """Return ``model`` with a head retrained on the client's train shard.

    Simple-Tuning first redraws the head (Kaiming-uniform weights, zero bias);
    FT-linear keeps the trained head as the starting point. Because the body
    is frozen, features are extracted once in eval mode and only the head is
    optimized, so body parameters and running stats are bitwise unchanged.
    """
    if not shards.train:
        raise FedsimError("cannot tune on an empty train shard")
    for name in model.names():
        if model.tag(name) is ParamTag.HEAD:
            break
    else:
        raise FedsimError("model has no head-tagged parameters")

    head = _head_layer(net)
    images, labels = to_batch(shards.train)
    features = extract_features(model, images, net)

    head_net = Network([Dense(head.in_dim, head.out_dim, bias="bias" in head.params)])
    prefix = f"layer{net.head_index}"
    if spec.mode == MODE_SIMPLE_TUNING:
        head_net.layers[0].params["weight"] = kaiming_uniform(
            rng, (head.in_dim, head.out_dim), fan_in=head.in_dim)
        if "bias" in head.params:
            head_net.layers[0].params["bias"] = np.zeros(head.out_dim)
    else:
        head_net.layers[0].params["weight"] = model.get(f"{prefix}.weight").copy()
        if "bias" in head.params:
            head_net.layers[0].params["bias"] = model.get(f"{prefix}.bias").copy()

    if spec.epochs > 0:
        run_sgd(head_net, features, labels, spec.epochs,
                SgdConfig(spec.lr, spec.batch_size), rng)

    tuned = {f"{prefix}.{slot}": (arr, ParamTag.HEAD)
             for slot, arr in head_net.layers[0].params.items()}
    return merge_into(model, ParamTree(tuned))
