"""The seven client/server training strategies behind one interface.

Full model-sharing: FedAvg, Ditto, pFedMe, FedEM, and post-hoc fine-tuning.
Partial model-sharing: FedBN (with Fed-sta / Fed-para ablations) and FedRep.
Each strategy owns four decisions: what the server broadcasts, how a client
trains locally, what the client uploads, and which model represents the
client at evaluation time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientShards, LabeledImage, to_batch
from .errors import FedsimError
from .nn import Network, SgdConfig, cross_entropy, sgd_step, softmax
from .params import (ModelUpdate, ParamTree, ShareFilter, apply_filter,
                     merge_into, tree_axpy, tree_sub)

COEF_FLOOR = 1e-6        # mixture coefficients never collapse to zero
LOSS_CLIP = 30.0         # per-sample losses clipped before exponentiation


# ---------------------------------------------------------------------------
# Strategy hyperparameter specs (defaults follow the ConvNet configurations)
# ---------------------------------------------------------------------------

def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if value <= 0:
            raise FedsimError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class FedAvgSpec:
    lr: float = 0.1
    epochs: int = 2

    def __post_init__(self):
        _check_positive(lr=self.lr, epochs=self.epochs)


@dataclass(frozen=True)
class DittoSpec:
    lr: float = 0.1
    epochs: int = 2
    lam: float = 0.1

    def __post_init__(self):
        _check_positive(lr=self.lr, epochs=self.epochs)
        if self.lam < 0:
            raise FedsimError(f"lam must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class PFedMeSpec:
    lr: float = 0.1
    epochs: int = 3
    k_steps: int = 2
    beta: float = 1.0
    lam: float = 0.5

    def __post_init__(self):
        _check_positive(lr=self.lr, epochs=self.epochs, k_steps=self.k_steps)
        if not 0.0 < self.beta <= 1.0:
            raise FedsimError(f"beta must be in (0, 1], got {self.beta}")
        if self.lam < 0:
            raise FedsimError(f"lam must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class FedEmSpec:
    lr: float = 0.05
    epochs: int = 2
    num_components: int = 3

    def __post_init__(self):
        _check_positive(lr=self.lr, epochs=self.epochs)
        if self.num_components < 2:
            raise FedsimError("num_components must be >= 2")


@dataclass(frozen=True)
class FineTuneSpec:
    """FedAvg training plus full-model fine-tuning after the last round."""

    lr: float = 0.1
    epochs: int = 2
    ft_lr: float = 0.01
    ft_epochs: int = 2

    def __post_init__(self):
        _check_positive(lr=self.lr, epochs=self.epochs, ft_lr=self.ft_lr)
        if self.ft_epochs < 0:
            raise FedsimError("ft_epochs must be >= 0")


@dataclass(frozen=True)
class FedBnSpec:
    lr: float = 0.1
    epochs: int = 2
    filter: ShareFilter = ShareFilter.EXCLUDE_BN

    def __post_init__(self):
        _check_positive(lr=self.lr, epochs=self.epochs)
        if self.filter not in (ShareFilter.EXCLUDE_BN, ShareFilter.EXCLUDE_BN_STAT,
                               ShareFilter.EXCLUDE_BN_LEARNABLE):
            raise FedsimError(f"FedBN filter must localize BN slots, got {self.filter}")


@dataclass(frozen=True)
class FedRepSpec:
    body_lr: float = 0.1
    body_epochs: int = 1
    head_lr: float = 0.005
    head_epochs: int = 1

    def __post_init__(self):
        _check_positive(body_lr=self.body_lr, body_epochs=self.body_epochs,
                        head_lr=self.head_lr, head_epochs=self.head_epochs)


StrategySpec = (FedAvgSpec | DittoSpec | PFedMeSpec | FedEmSpec
                | FineTuneSpec | FedBnSpec | FedRepSpec)


@dataclass
class ClientState:
    """A client's shards, training view (poisoned for the adversary), and
    strategy-specific local state."""

    client_id: int
    shards: ClientShards
    train_view: list[LabeledImage]
    personal: ParamTree | None = None
    mix_coef: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Shared training loop
# ---------------------------------------------------------------------------

def run_sgd(net: Network, images: np.ndarray, labels: np.ndarray, epochs: int,
            cfg: SgdConfig, rng: np.random.Generator, *, loss: str = "cross_entropy",
            sample_weight: np.ndarray | None = None,
            trainable_only: set[str] | None = None,
            grad_tweak=None) -> None:
    """Minibatch SGD over shuffled epochs.

    ``trainable_only`` freezes every parameter outside the set by zeroing its
    gradient; ``grad_tweak(net, grads)`` may add penalty terms in place.
    """
    n = len(labels)
    net.train()
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            net.forward(images[sel])
            w = None if sample_weight is None else sample_weight[sel]
            grads, _ = net.backward(labels[sel], loss=loss, sample_weight=w)
            if grad_tweak is not None:
                grad_tweak(net, grads)
            if trainable_only is not None:
                for key in grads:
                    if key not in trainable_only:
                        grads[key] = np.zeros_like(grads[key])
            sgd_step(net, grads, cfg)


def proximal_tweak(reference: ParamTree, lam: float):
    """Add lam * (p - reference) to every trainable gradient (squared penalty)."""

    def tweak(net: Network, grads: dict[str, np.ndarray]) -> None:
        for layer in net.layers:
            for slot in layer.params:
                key = f"{layer.name}.{slot}"
                grads[key] = grads[key] + lam * (layer.params[slot] - reference.get(key))

    return tweak


def _trainable_subtree(net: Network, values: dict[str, np.ndarray],
                       template: ParamTree) -> ParamTree:
    return ParamTree({k: (v, template.tag(k)) for k, v in values.items()})


def per_sample_losses(net: Network, tree: ParamTree, images: np.ndarray,
                      labels: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Eval-mode per-sample cross-entropy of a model on a sample block."""
    net.eval().load_tree(tree)
    out = []
    for start in range(0, len(labels), chunk):
        logits = net.forward(images[start:start + chunk])
        out.append(cross_entropy(logits, labels[start:start + chunk]))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Predictors (personalized evaluation models)
# ---------------------------------------------------------------------------

class TreePredictor:
    """Eval-mode classifier defined by one parameter tree."""

    def __init__(self, net: Network, tree: ParamTree):
        self.net = net
        self.tree = tree

    def logits(self, images: np.ndarray, chunk: int = 512) -> np.ndarray:
        self.net.eval().load_tree(self.tree)
        return np.concatenate([self.net.forward(images[s:s + chunk])
                               for s in range(0, len(images), chunk)])

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)


class MixturePredictor:
    """FedEM inference: probabilities are the coefficient-weighted mixture of
    the component soft-maxes."""

    def __init__(self, net: Network, trees: list[ParamTree], coef: np.ndarray):
        self.net = net
        self.trees = trees
        self.coef = np.asarray(coef, dtype=np.float64)

    def probs(self, images: np.ndarray, chunk: int = 512) -> np.ndarray:
        total = None
        for a, tree in zip(self.coef, self.trees):
            self.net.eval().load_tree(tree)
            p = np.concatenate([softmax(self.net.forward(images[s:s + chunk]))
                                for s in range(0, len(images), chunk)])
            total = a * p if total is None else total + a * p
        return total

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.probs(images).argmax(axis=1)


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

class Strategy:
    """One federated training protocol: broadcast, local train, apply, eval."""

    name = "strategy"
    share_filter = ShareFilter.ALL
    num_uploads = 1

    def __init__(self, spec):
        self.spec = spec

    # server side ----------------------------------------------------------
    def init_server(self, net_builder, rng: np.random.Generator):
        return net_builder(rng).param_tree()

    def broadcast(self, server):
        return apply_filter(server, self.share_filter)

    def apply_aggregate(self, server, aggregates: list[ParamTree]):
        shared = apply_filter(server, self.share_filter)
        updated = tree_axpy(1.0, aggregates[0], shared)
        return merge_into(server, updated)

    # client side ----------------------------------------------------------
    def init_client(self, state: ClientState, server) -> None:
        pass

    def local_train(self, state: ClientState, broadcast, net: Network,
                    rng: np.random.Generator, batch_size: int) -> list[ModelUpdate]:
        raise NotImplementedError

    def eval_predictor(self, state: ClientState, server, net: Network):
        return TreePredictor(net, self.eval_tree(state, server))

    def eval_tree(self, state: ClientState, server) -> ParamTree:
        raise NotImplementedError

    def _require_data(self, state: ClientState) -> tuple[np.ndarray, np.ndarray]:
        if not state.train_view:
            raise FedsimError(f"client {state.client_id}: empty train shard")
        return to_batch(state.train_view)


class FedAvg(Strategy):
    name = "fedavg"

    def local_train(self, state, broadcast, net, rng, batch_size):
        images, labels = self._require_data(state)
        net.train().load_tree(broadcast)
        cfg = SgdConfig(self.spec.lr, batch_size)
        run_sgd(net, images, labels, self.spec.epochs, cfg, rng)
        delta = tree_sub(net.param_tree(), broadcast)
        return [ModelUpdate(delta, len(labels), state.client_id)]

    def eval_tree(self, state, server):
        return server


class FineTune(FedAvg):
    """FedAvg during training; clients fine-tune the final global model."""

    name = "finetune"


class Ditto(Strategy):
    name = "ditto"

    def init_client(self, state, server):
        state.personal = server

    def local_train(self, state, broadcast, net, rng, batch_size):
        images, labels = self._require_data(state)
        rng_global, rng_personal = rng.spawn(2)
        cfg = SgdConfig(self.spec.lr, batch_size)
        # phase 1: update the global copy; this delta is the upload
        net.train().load_tree(broadcast)
        run_sgd(net, images, labels, self.spec.epochs, cfg, rng_global)
        upload = tree_sub(net.param_tree(), broadcast)
        # phase 2: personal model pulled toward the received global
        net.load_tree(state.personal)
        tweak = proximal_tweak(broadcast, self.spec.lam) if self.spec.lam else None
        run_sgd(net, images, labels, self.spec.epochs, cfg, rng_personal,
                grad_tweak=tweak)
        state.personal = net.param_tree()
        return [ModelUpdate(upload, len(labels), state.client_id)]

    def eval_tree(self, state, server):
        return state.personal


def _set_trainables(net: Network, values: dict[str, np.ndarray]) -> None:
    for layer in net.layers:
        for slot in layer.params:
            layer.params[slot] = values[f"{layer.name}.{slot}"].copy()


def _get_trainables(net: Network) -> dict[str, np.ndarray]:
    return {f"{layer.name}.{slot}": layer.params[slot]
            for layer in net.layers for slot in layer.params}


def moreau_inner_solve(net: Network, images: np.ndarray, labels: np.ndarray,
                       w: dict[str, np.ndarray], k_steps: int, lam: float,
                       cfg: SgdConfig, loss: str = "cross_entropy"
                       ) -> dict[str, np.ndarray]:
    """Approximately minimize L(theta) + (lam/2) ||theta - w||^2 with
    ``k_steps`` of SGD on the given batch, starting from w."""
    _set_trainables(net, w)
    net.train()
    for _ in range(k_steps):
        net.forward(images)
        grads, _ = net.backward(labels, loss=loss)
        for layer in net.layers:
            for slot in layer.params:
                key = f"{layer.name}.{slot}"
                grads[key] = grads[key] + lam * (layer.params[slot] - w[key])
        sgd_step(net, grads, cfg)
    return _get_trainables(net)


def pfedme_epochs(net: Network, images: np.ndarray, labels: np.ndarray,
                  w: dict[str, np.ndarray], *, epochs: int, k_steps: int,
                  lam: float, lr: float, batch_size: int,
                  rng: np.random.Generator,
                  loss: str = "cross_entropy") -> dict[str, np.ndarray]:
    """pFedMe local loop: per minibatch, solve the Moreau inner problem from
    w, then move w toward the solution by lr * lam * (w - theta_hat)."""
    cfg = SgdConfig(lr, batch_size)
    n = len(labels)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            theta = moreau_inner_solve(net, images[sel], labels[sel], w,
                                       k_steps, lam, cfg, loss)
            for key in w:
                w[key] = w[key] - lr * lam * (w[key] - theta[key])
    return w


class PFedMe(Strategy):
    """Moreau-envelope personalization: per batch, approximately solve
    min_theta L(theta) + (lam/2) ||theta - w||^2 with ``k_steps`` of SGD from
    w, then move w toward the solution; beta interpolation happens on the
    server."""

    name = "pfedme"

    def init_client(self, state, server):
        state.personal = server

    def local_train(self, state, broadcast, net, rng, batch_size):
        spec = self.spec
        images, labels = self._require_data(state)
        net.train().load_tree(broadcast)
        template = net.param_tree()
        w = {name: broadcast.get(name).copy() for name in net.trainable_names()}
        w = pfedme_epochs(net, images, labels, w, epochs=spec.epochs,
                          k_steps=spec.k_steps, lam=spec.lam, lr=spec.lr,
                          batch_size=batch_size, rng=rng)
        final = merge_into(net.param_tree(), _trainable_subtree(net, w, template))
        state.personal = final
        return [ModelUpdate(tree_sub(final, broadcast), len(labels), state.client_id)]

    def apply_aggregate(self, server, aggregates):
        # theta_g <- (1 - beta) theta_g + beta (theta_g + aggregate)
        return tree_axpy(self.spec.beta, aggregates[0], server)

    def eval_tree(self, state, server):
        return state.personal


class FedEm(Strategy):
    """Mixture of shared base models with per-client mixture coefficients."""

    name = "fedem"

    @property
    def num_uploads(self):
        return self.spec.num_components

    def init_server(self, net_builder, rng):
        return [net_builder(child).param_tree()
                for child in rng.spawn(self.spec.num_components)]

    def broadcast(self, server):
        return list(server)

    def apply_aggregate(self, server, aggregates):
        return [tree_axpy(1.0, agg, comp) for comp, agg in zip(server, aggregates)]

    def init_client(self, state, server):
        k = self.spec.num_components
        state.mix_coef = np.full(k, 1.0 / k)

    def responsibilities(self, state, components, images, labels, net):
        """E-step: q_c(s) proportional to a_c * exp(-loss_c(s)), losses clipped."""
        losses = np.stack([per_sample_losses(net, tree, images, labels)
                           for tree in components])
        logits = np.log(state.mix_coef)[:, None] - np.minimum(losses, LOSS_CLIP)
        logits -= logits.max(axis=0, keepdims=True)
        q = np.exp(logits)
        return q / q.sum(axis=0, keepdims=True)

    def local_train(self, state, broadcast, net, rng, batch_size):
        spec = self.spec
        images, labels = self._require_data(state)
        q = self.responsibilities(state, broadcast, images, labels, net)
        coef = np.maximum(q.mean(axis=1), COEF_FLOOR)
        state.mix_coef = coef / coef.sum()
        updates = []
        cfg = SgdConfig(spec.lr, batch_size)
        for c, child in enumerate(rng.spawn(spec.num_components)):
            net.train().load_tree(broadcast[c])
            run_sgd(net, images, labels, spec.epochs, cfg, child,
                    sample_weight=q[c])
            updates.append(ModelUpdate(tree_sub(net.param_tree(), broadcast[c]),
                                       len(labels), state.client_id))
        return updates

    def eval_predictor(self, state, server, net):
        return MixturePredictor(net, list(server), state.mix_coef)

    def eval_tree(self, state, server):
        raise FedsimError("FedEM evaluates a mixture, not a single tree")


class FedBn(Strategy):
    """Share everything except the filtered batch-norm slots, which persist
    locally across rounds."""

    name = "fedbn"

    def __init__(self, spec: FedBnSpec):
        super().__init__(spec)
        self.share_filter = spec.filter

    def init_client(self, state, server):
        state.personal = server

    def local_train(self, state, broadcast, net, rng, batch_size):
        images, labels = self._require_data(state)
        merged = merge_into(state.personal, broadcast)
        net.train().load_tree(merged)
        cfg = SgdConfig(self.spec.lr, batch_size)
        run_sgd(net, images, labels, self.spec.epochs, cfg, rng)
        after = net.param_tree()
        state.personal = after
        delta = apply_filter(tree_sub(after, merged), self.share_filter)
        return [ModelUpdate(delta, len(labels), state.client_id)]

    def eval_tree(self, state, server):
        return merge_into(state.personal, apply_filter(server, self.share_filter))


class FedRep(Strategy):
    """Shared feature extractor, local linear classifier: train the head with
    the body frozen, then the body with the head frozen; upload body only."""

    name = "fedrep"
    share_filter = ShareFilter.BODY_ONLY

    def init_client(self, state, server):
        state.personal = server

    def local_train(self, state, broadcast, net, rng, batch_size):
        spec = self.spec
        images, labels = self._require_data(state)
        merged = merge_into(state.personal, broadcast)
        net.train().load_tree(merged)
        rng_head, rng_body = rng.spawn(2)
        head = set(net.head_names())
        body = set(net.trainable_names()) - head
        run_sgd(net, images, labels, spec.head_epochs,
                SgdConfig(spec.head_lr, batch_size), rng_head, trainable_only=head)
        run_sgd(net, images, labels, spec.body_epochs,
                SgdConfig(spec.body_lr, batch_size), rng_body, trainable_only=body)
        after = net.param_tree()
        state.personal = after
        delta = apply_filter(tree_sub(after, merged), ShareFilter.BODY_ONLY)
        return [ModelUpdate(delta, len(labels), state.client_id)]

    def eval_tree(self, state, server):
        return merge_into(state.personal, apply_filter(server, ShareFilter.BODY_ONLY))


def posthoc_finetune(state: ClientState, final_global: ParamTree, net: Network,
                     ft_lr: float, ft_epochs: int, batch_size: int,
                     rng: np.random.Generator) -> ParamTree:
    """Full-model SGD on the client's local training data after FL finishes."""
    if not state.train_view:
        raise FedsimError(f"client {state.client_id}: empty train shard")
    net.train().load_tree(final_global)
    if ft_epochs > 0:
        images, labels = to_batch(state.train_view)
        run_sgd(net, images, labels, ft_epochs, SgdConfig(ft_lr, batch_size), rng)
    return net.param_tree()


_STRATEGY_CLASSES = {
    FedAvgSpec: FedAvg,
    DittoSpec: Ditto,
    PFedMeSpec: PFedMe,
    FedEmSpec: FedEm,
    FineTuneSpec: FineTune,
    FedBnSpec: FedBn,
    FedRepSpec: FedRep,
}


def make_strategy(spec: StrategySpec) -> Strategy:
    try:
        return _STRATEGY_CLASSES[type(spec)](spec)
    except KeyError:
        raise FedsimError(f"unknown strategy spec {type(spec).__name__}") from None
