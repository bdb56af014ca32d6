"""Strategy tests: local training semantics, uploads, server application."""

import numpy as np
import pytest

from fedsim.data import ClientShards, LabeledImage, to_batch
from fedsim.nn import Dense, Flatten, Network, ReLU, SgdConfig, build_convnet, softmax
from fedsim.params import (ParamTag, ParamTree, ShareFilter, apply_filter,
                           tree_l2_distance)
from fedsim.strategies import (ClientState, DittoSpec, FedAvgSpec, FedBnSpec,
                               FedEmSpec, FedRepSpec, FineTuneSpec, PFedMeSpec,
                               make_strategy, moreau_inner_solve, pfedme_epochs,
                               posthoc_finetune)


def pixel_image(values, label):
    arr = np.asarray(values, dtype=float).reshape(1, 1, -1)
    return LabeledImage(arr, label)


def toy_state(images, cid=0):
    shards = ClientShards(tuple(images), (), tuple(images))
    return ClientState(cid, shards, list(images))


def toy_net(weights, bias=False):
    """Flatten -> Dense network with fixed weights (the Dense is the head)."""
    w = np.asarray(weights, dtype=float)
    layer = Dense(w.shape[0], w.shape[1], bias=bias)
    layer.params["weight"] = w
    net = Network([Flatten(), layer])
    return net


# ---------------------------------------------------------------------------
# defaults from the evaluated configurations
# ---------------------------------------------------------------------------

def test_strategy_default_hyperparameters():
    assert (FedAvgSpec().lr, FedAvgSpec().epochs) == (0.1, 2)
    assert DittoSpec().lam == 0.1
    p = PFedMeSpec()
    assert (p.k_steps, p.beta, p.lam) == (2, 1.0, 0.5)
    assert FedEmSpec().num_components == 3
    assert (FineTuneSpec().ft_lr, FineTuneSpec().ft_epochs) == (0.01, 2)
    assert FedRepSpec().head_lr == 0.005


# ---------------------------------------------------------------------------
# FedAvg
# ---------------------------------------------------------------------------

def test_fedavg_zero_gradient_gives_zero_delta():
    # a single-class head has exactly zero cross-entropy gradient
    net = toy_net(np.array([[0.7]]))
    state = toy_state([pixel_image([1.0], 0)] * 4)
    strategy = make_strategy(FedAvgSpec(lr=0.5, epochs=3))
    start = net.param_tree()
    (update,) = strategy.local_train(state, start, net, np.random.default_rng(0), 2)
    assert update.sample_count == 4
    assert all(np.array_equal(arr, 0 * arr) for _, arr, _ in update.delta.items())


def test_fedavg_one_step_delta_is_minus_lr_grad():
    w = np.array([[0.3, -0.2]])
    net = toy_net(w)
    start = net.param_tree()
    state = toy_state([pixel_image([1.0], 0)])
    strategy = make_strategy(FedAvgSpec(lr=0.1, epochs=1))
    (update,) = strategy.local_train(state, start, net, np.random.default_rng(0), 32)
    p = softmax(np.array([[0.3, -0.2]]))[0]
    expected = -0.1 * (p - np.array([1.0, 0.0]))
    assert update.delta.get("layer1.weight") == pytest.approx(expected[None, :])


# ---------------------------------------------------------------------------
# Ditto
# ---------------------------------------------------------------------------

def test_ditto_hand_proximal_step():
    # zero data gradient, theta_i=2, theta_g=0, lam=0.1, lr=1 -> theta_i=1.8
    net = toy_net(np.array([[0.0]]))
    reference = net.param_tree()                      # theta_g = 0
    state = toy_state([pixel_image([1.0], 0)])
    state.personal = ParamTree({"layer1.weight": (np.array([[2.0]]), ParamTag.HEAD)})
    strategy = make_strategy(DittoSpec(lr=1.0, epochs=1, lam=0.1))
    strategy.local_train(state, reference, net, np.random.default_rng(0), 32)
    assert np.allclose(state.personal.get("layer1.weight"), [[1.8]])


def square_image(level, label, seed=0):
    rng = np.random.default_rng(seed)
    vals = np.clip(level + 0.05 * rng.standard_normal((1, 4, 4)), 0, 1)
    return LabeledImage(vals, label)


def test_ditto_lambda_zero_decouples_personal_model():
    data = ([square_image(0.8, 0, seed=i) for i in range(6)]
            + [square_image(0.2, 1, seed=10 + i) for i in range(6)])
    strategy = make_strategy(DittoSpec(lr=0.2, epochs=2, lam=0.0))
    net = build_convnet((1, 4, 4), 2, hidden=4, channels=(2, 2),
                        rng=np.random.default_rng(3))

    personals = []
    for shift in (0.0, 0.5):
        state = toy_state(data)
        init = build_convnet((1, 4, 4), 2, hidden=4, channels=(2, 2),
                             rng=np.random.default_rng(3)).param_tree()
        state.personal = init
        broadcast = ParamTree({n: (arr + shift, t) for n, arr, t in init.items()})
        strategy.local_train(state, broadcast, net, np.random.default_rng(11), 4)
        personals.append(state.personal)
    assert personals[0].equal(personals[1])


def test_ditto_upload_is_global_phase_delta():
    # with lam=0 the upload must still be the trained-global delta, not zero
    net = toy_net(np.array([[0.2, -0.1]]))
    start = net.param_tree()
    state = toy_state([pixel_image([1.0], 0)] * 3)
    state.personal = start
    strategy = make_strategy(DittoSpec(lr=0.1, epochs=1, lam=0.0))
    (update,) = strategy.local_train(state, start, net, np.random.default_rng(0), 32)
    assert tree_l2_distance(update.delta, update.delta.zeros_like()) > 0


# ---------------------------------------------------------------------------
# pFedMe
# ---------------------------------------------------------------------------

def quad_setup(w0=2.0):
    """Squared-error toy: logits = theta * x with x=1, target 0 -> L = theta^2/2."""
    net = toy_net(np.array([[w0]]))
    images = np.ones((1, 1, 1, 1))
    targets = np.zeros((1, 1))
    return net, images, targets


def test_moreau_inner_solution_matches_closed_form():
    lam = 0.5
    net, images, targets = quad_setup(w0=2.0)
    w = {"layer1.weight": np.array([[2.0]])}
    theta = moreau_inner_solve(net, images, targets, w, k_steps=200, lam=lam,
                               cfg=SgdConfig(0.1, 32), loss="squared_error")
    closed_form = 2.0 * lam / (1.0 + lam)
    assert theta["layer1.weight"][0, 0] == pytest.approx(closed_form, abs=1e-6)


def test_pfedme_outer_step_hand_value():
    lam, lr = 0.5, 0.1
    net, images, targets = quad_setup(w0=2.0)
    w = {"layer1.weight": np.array([[2.0]])}
    w = pfedme_epochs(net, images, targets.reshape(1, 1), w, epochs=1,
                      k_steps=200, lam=lam, lr=lr, batch_size=32,
                      rng=np.random.default_rng(0), loss="squared_error")
    theta_hat = 2.0 * lam / (1.0 + lam)
    expected = 2.0 - lr * lam * (2.0 - theta_hat)
    assert w["layer1.weight"][0, 0] == pytest.approx(expected, abs=1e-6)


def test_pfedme_lambda_zero_uploads_nothing():
    net = toy_net(np.array([[0.4, 0.1]]))
    start = net.param_tree()
    state = toy_state([pixel_image([1.0], 0)] * 3)
    strategy = make_strategy(PFedMeSpec(lr=0.3, epochs=2, k_steps=3, lam=0.0))
    strategy.init_client(state, start)
    (update,) = strategy.local_train(state, start, net, np.random.default_rng(1), 2)
    assert all(np.array_equal(arr, 0 * arr) for _, arr, _ in update.delta.items())


def test_pfedme_beta_one_apply_is_plain_apply():
    strategy = make_strategy(PFedMeSpec(beta=1.0))
    server = ParamTree({"p": (np.array([1.0, 2.0]), ParamTag.BODY)})
    agg = ParamTree({"p": (np.array([0.5, -0.5]), ParamTag.BODY)})
    out = strategy.apply_aggregate(server, [agg])
    assert np.allclose(out.get("p"), [1.5, 1.5])


# ---------------------------------------------------------------------------
# FedEM
# ---------------------------------------------------------------------------

def test_fedem_responsibility_hand_value():
    # a = [0.5, 0.5], losses [0, ln 2] -> q = [2/3, 1/3]
    certain = toy_net(np.array([[1000.0, 0.0]])).param_tree()
    uniform = toy_net(np.array([[0.0, 0.0]])).param_tree()
    state = toy_state([pixel_image([1.0], 0)])
    state.mix_coef = np.array([0.5, 0.5])
    strategy = make_strategy(FedEmSpec(num_components=2))
    net = toy_net(np.zeros((1, 2)))
    images, labels = to_batch(state.train_view)
    q = strategy.responsibilities(state, [certain, uniform], images, labels, net)
    assert q[:, 0] == pytest.approx([2 / 3, 1 / 3])


def test_fedem_identical_components_stay_uniform():
    tree = toy_net(np.array([[0.3, -0.3]])).param_tree()
    state = toy_state([pixel_image([1.0], 0), pixel_image([0.5], 1)])
    strategy = make_strategy(FedEmSpec(lr=0.1, epochs=1, num_components=3))
    strategy.init_client(state, [tree, tree, tree])
    net = toy_net(np.zeros((1, 2)))
    updates = strategy.local_train(state, [tree, tree, tree], net,
                                   np.random.default_rng(0), 2)
    assert len(updates) == 3
    assert state.mix_coef == pytest.approx([1 / 3] * 3)


def test_fedem_coefficients_stay_on_simplex():
    rng = np.random.default_rng(5)
    trees = [toy_net(rng.standard_normal((2, 3))).param_tree() for _ in range(3)]
    data = [pixel_image(rng.uniform(size=2), int(rng.integers(0, 3)))
            for _ in range(12)]
    state = toy_state(data)
    strategy = make_strategy(FedEmSpec(lr=0.05, epochs=1, num_components=3))
    strategy.init_client(state, trees)
    net = toy_net(np.zeros((2, 3)))
    for round_idx in range(4):
        strategy.local_train(state, trees, net, np.random.default_rng(round_idx), 4)
        assert state.mix_coef.sum() == pytest.approx(1.0, abs=1e-9)
        assert (state.mix_coef >= 1e-6).all()


def test_fedem_mixture_predictor():
    certain0 = toy_net(np.array([[50.0, 0.0]])).param_tree()
    certain1 = toy_net(np.array([[0.0, 50.0]])).param_tree()
    state = toy_state([pixel_image([1.0], 0)])
    strategy = make_strategy(FedEmSpec(num_components=2))
    state.mix_coef = np.array([0.9, 0.1])
    net = toy_net(np.zeros((1, 2)))
    pred = strategy.eval_predictor(state, [certain0, certain1], net)
    assert pred.predict(np.ones((1, 1, 1, 1)))[0] == 0
    state.mix_coef = np.array([0.1, 0.9])
    assert pred.predict(np.ones((1, 1, 1, 1)))[0] == 0  # predictor snapshot
    pred = strategy.eval_predictor(state, [certain0, certain1], net)
    assert pred.predict(np.ones((1, 1, 1, 1)))[0] == 1


# ---------------------------------------------------------------------------
# FedBN / Fed-sta / Fed-para
# ---------------------------------------------------------------------------

def bn_setup(filter_):
    rng = np.random.default_rng(2)
    net = build_convnet((1, 4, 4), 2, hidden=4, channels=(2, 2), rng=rng)
    init = net.param_tree()
    data = [LabeledImage(np.random.default_rng(i).uniform(size=(1, 4, 4)), i % 2)
            for i in range(8)]
    state = toy_state(data)
    strategy = make_strategy(FedBnSpec(lr=0.1, epochs=1, filter=filter_))
    strategy.init_client(state, init)
    return strategy, state, net, init


@pytest.mark.parametrize("filter_", [ShareFilter.EXCLUDE_BN,
                                     ShareFilter.EXCLUDE_BN_STAT,
                                     ShareFilter.EXCLUDE_BN_LEARNABLE])
def test_fedbn_upload_respects_filter(filter_):
    strategy, state, net, init = bn_setup(filter_)
    broadcast = strategy.broadcast(init)
    (update,) = strategy.local_train(state, broadcast, net,
                                     np.random.default_rng(0), 4)
    for name in update.delta.names():
        assert filter_.admits(init.tag(name)), name
    rejected = {n for n in init.names() if not filter_.admits(init.tag(n))}
    assert rejected.isdisjoint(update.delta.names())
    assert rejected          # the model really has localized slots


def test_fedbn_stats_diverge_across_skewed_clients():
    strategy, state_a, net, init = bn_setup(ShareFilter.EXCLUDE_BN)
    state_b = toy_state([square_image(0.1, 1, seed=90 + i) for i in range(8)],
                        cid=1)
    strategy.init_client(state_b, init)
    broadcast = strategy.broadcast(init)
    strategy.local_train(state_a, broadcast, net, np.random.default_rng(1), 4)
    strategy.local_train(state_b, broadcast, net, np.random.default_rng(1), 4)
    stat_names = [n for n in init.names() if init.tag(n) is ParamTag.BN_STAT]
    gap = sum(float(np.linalg.norm(state_a.personal.get(n) - state_b.personal.get(n)))
              for n in stat_names)
    assert gap > 0.0


def test_fedbn_apply_leaves_server_bn_untouched():
    strategy, state, net, init = bn_setup(ShareFilter.EXCLUDE_BN)
    agg = apply_filter(ParamTree({n: (np.ones_like(a), t) for n, a, t in init.items()}),
                       ShareFilter.EXCLUDE_BN)
    out = strategy.apply_aggregate(init, [agg])
    for name in init.names():
        if init.tag(name).is_bn:
            assert out.get(name).tobytes() == init.get(name).tobytes()
        else:
            assert np.allclose(out.get(name), init.get(name) + 1.0)


# ---------------------------------------------------------------------------
# FedRep
# ---------------------------------------------------------------------------

def separable_setup(seed=4):
    rng = np.random.default_rng(seed)
    net = Network([Flatten(), Dense(2, 4), ReLU(), Dense(4, 2)])
    for layer in net.layers:
        layer.init_params(rng)
    init = net.param_tree()
    data = ([pixel_image([1.0, 0.0], 0) for _ in range(6)]
            + [pixel_image([0.0, 1.0], 1) for _ in range(6)])
    state = toy_state(data)
    return net, init, state


def test_fedrep_upload_has_no_head_names():
    net, init, state = separable_setup()
    strategy = make_strategy(FedRepSpec())
    strategy.init_client(state, init)
    (update,) = strategy.local_train(state, strategy.broadcast(init), net,
                                     np.random.default_rng(0), 4)
    head_names = {n for n in init.names() if init.tag(n) is ParamTag.HEAD}
    assert head_names
    assert head_names.isdisjoint(update.delta.names())


def test_fedrep_head_phase_fits_separable_features():
    net, init, state = separable_setup()
    strategy = make_strategy(FedRepSpec(head_lr=0.5, head_epochs=300,
                                        body_lr=0.1, body_epochs=1))
    strategy.init_client(state, init)
    strategy.local_train(state, strategy.broadcast(init), net,
                         np.random.default_rng(0), 12)
    images, labels = to_batch(state.train_view)
    pred = strategy.eval_predictor(state, init, net)
    assert (pred.predict(images) == labels).all()


def test_fedrep_head_is_deterministic_replay():
    # a benign head is a pure function of (initial head, shards, body sequence)
    net, init, state_a = separable_setup()
    _, _, state_b = separable_setup()
    strategy = make_strategy(FedRepSpec())
    strategy.init_client(state_a, init)
    strategy.init_client(state_b, init)
    for round_idx in range(3):
        body = strategy.broadcast(init)
        strategy.local_train(state_a, body, net,
                             np.random.default_rng([7, round_idx]), 4)
        strategy.local_train(state_b, body, net,
                             np.random.default_rng([7, round_idx]), 4)
    for name in init.names():
        if init.tag(name) is ParamTag.HEAD:
            assert state_a.personal.get(name).tobytes() == \
                state_b.personal.get(name).tobytes()


# ---------------------------------------------------------------------------
# post-hoc fine-tuning and shared apply semantics
# ---------------------------------------------------------------------------

def test_posthoc_finetune_zero_epochs_returns_global():
    net, init, state = separable_setup()
    tuned = posthoc_finetune(state, init, net, ft_lr=0.01, ft_epochs=0,
                             batch_size=4, rng=np.random.default_rng(0))
    assert tuned.equal(init)


def test_posthoc_finetune_descends_on_repeated_sample():
    net = toy_net(np.array([[0.3, -0.4]]), bias=True)
    net.layers[1].params["bias"] = np.zeros(2)
    init = net.param_tree()
    sample = pixel_image([1.0], 1)
    state = toy_state([sample] * 8)
    images, labels = to_batch(state.train_view)

    def loss_of(tree):
        net.eval().load_tree(tree)
        from fedsim.nn import batch_loss
        return batch_loss(net.forward(images), labels)

    before = loss_of(init)
    tuned = posthoc_finetune(state, init, net, ft_lr=0.05, ft_epochs=2,
                             batch_size=8, rng=np.random.default_rng(0))
    assert loss_of(tuned) <= before


def test_zero_aggregate_leaves_global_unchanged():
    strategy = make_strategy(FedAvgSpec())
    server = ParamTree({"p": (np.array([1.0, -2.0]), ParamTag.BODY)})
    out = strategy.apply_aggregate(server, [server.zeros_like()])
    assert out.equal(server)
