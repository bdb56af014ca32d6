"""Minimal float64 neural-network engine with hand-derived backward passes.

Layers cache their forward activations in train mode so that a subsequent
``Network.backward`` can produce exact analytic gradients; eval-mode forward
is a pure function (no caching, no running-stat updates). Everything is
float64 so finite-difference oracles and bitwise determinism checks have
headroom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FedsimError, ModeError, ShapeError
from .params import ParamTag, ParamTree

CONV_KERNEL = 5          # fixed 5x5 kernels
BN_MOMENTUM = 0.1        # running = (1 - m) * running + m * batch
BN_EPS = 1e-5


@dataclass(frozen=True)
class SgdConfig:
    """Vanilla SGD: constant learning rate, fixed minibatch size."""

    learning_rate: float
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise FedsimError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size <= 0:
            raise FedsimError(f"batch_size must be > 0, got {self.batch_size}")


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    """Kaiming-uniform draw: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer: named parameter/buffer slots plus cached activations."""

    kind = "layer"

    def __init__(self):
        self.name = self.kind            # overwritten when added to a Network
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape."""
        raise NotImplementedError

    def tag_for(self, slot: str) -> ParamTag:
        return ParamTag.BODY

    def _shape_error(self, message: str) -> ShapeError:
        return ShapeError(self.name, message)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params["weight"] = np.zeros((in_dim, out_dim))
        if bias:
            self.params["bias"] = np.zeros(out_dim)

    def init_params(self, rng):
        self.params["weight"] = kaiming_uniform(rng, (self.in_dim, self.out_dim),
                                                fan_in=self.in_dim)
        if "bias" in self.params:
            self.params["bias"] = np.zeros(self.out_dim)

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_dim:
            raise self._shape_error(f"expected ({self.in_dim},), got {in_shape}")
        return (self.out_dim,)

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise self._shape_error(
                f"expected (batch, {self.in_dim}), got {x.shape}")
        out = x @ self.params["weight"]
        if "bias" in self.params:
            out = out + self.params["bias"]
        if train:
            self._cache = x
        return out

    def backward(self, dout):
        x = self._cache
        self.grads["weight"] = x.T @ dout
        if "bias" in self.params:
            self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"].T


class Conv2D(Layer):
    """5x5 convolution, stride 1, 'same' zero padding."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        k = CONV_KERNEL
        self.params["weight"] = np.zeros((out_ch, in_ch, k, k))
        self.params["bias"] = np.zeros(out_ch)

    def init_params(self, rng):
        k = CONV_KERNEL
        fan_in = self.in_ch * k * k
        self.params["weight"] = kaiming_uniform(
            rng, (self.out_ch, self.in_ch, k, k), fan_in=fan_in)
        self.params["bias"] = np.zeros(self.out_ch)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise self._shape_error(
                f"expected ({self.in_ch}, H, W), got {in_shape}")
        return (self.out_ch, in_shape[1], in_shape[2])

    @staticmethod
    def _im2col(x: np.ndarray) -> np.ndarray:
        # (N, C, H, W) -> (N, H*W, C*k*k) patches for stride-1 same conv
        k, pad = CONV_KERNEL, CONV_KERNEL // 2
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        s = xp.strides
        windows = np.lib.stride_tricks.as_strided(
            xp, (n, c, h, w, k, k), (s[0], s[1], s[2], s[3], s[2], s[3]),
            writeable=False)
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * k * k)

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise self._shape_error(
                f"expected (batch, {self.in_ch}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        cols = self._im2col(x)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        out = cols @ wmat.T + self.params["bias"]
        out = out.transpose(0, 2, 1).reshape(n, self.out_ch, h, w)
        if train:
            self._cache = (x.shape, cols)
        return out

    def backward(self, dout):
        x_shape, cols = self._cache
        n, c, h, w = x_shape
        k, pad = CONV_KERNEL, CONV_KERNEL // 2
        dmat = dout.reshape(n, self.out_ch, h * w).transpose(0, 2, 1)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        self.grads["weight"] = np.einsum("npf,npc->fc", dmat, cols).reshape(
            self.params["weight"].shape)
        self.grads["bias"] = dout.sum(axis=(0, 2, 3))
        dcols = (dmat @ wmat).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, pad:pad + h, pad:pad + w]


class MaxPool2D(Layer):
    """2x2 max pooling, stride 2; gradient routed to the first (row-major)
    maximal element of each window."""

    kind = "maxpool2d"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise self._shape_error(f"expected (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise self._shape_error(f"spatial dims too small to pool: {in_shape}")
        return (c, h // 2, w // 2)

    def forward(self, x, train):
        if x.ndim != 4:
            raise self._shape_error(f"expected (batch, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 < 1 or w2 < 1:
            raise self._shape_error(f"spatial dims too small to pool: {x.shape}")
        windows = (x[:, :, :h2 * 2, :w2 * 2]
                   .reshape(n, c, h2, 2, w2, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, h2, w2, 4))
        idx = windows.argmax(axis=-1)     # first max in row-major window order
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (x.shape, idx)
        return out

    def backward(self, dout):
        x_shape, idx = self._cache
        n, c, h, w = x_shape
        h2, w2 = h // 2, w // 2
        dwin = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, :, :h2 * 2, :w2 * 2] = (dwin
                                      .reshape(n, c, h2, w2, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(n, c, h2 * 2, w2 * 2))
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization over (N,) or (N, H, W) reductions."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def init_params(self, rng):
        self.params["gamma"] = np.ones(self.channels)
        self.params["beta"] = np.zeros(self.channels)
        self.buffers["running_mean"] = np.zeros(self.channels)
        self.buffers["running_var"] = np.ones(self.channels)

    def tag_for(self, slot):
        return ParamTag.BN_LEARNABLE

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise self._shape_error(
                f"expected {self.channels} channels, got {in_shape}")
        return in_shape

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            return (0,), (1, self.channels)
        if x.ndim == 4:
            return (0, 2, 3), (1, self.channels, 1, 1)
        raise self._shape_error(f"expected 2-D or 4-D input, got {x.shape}")

    def forward(self, x, train):
        if x.shape[1] != self.channels:
            raise self._shape_error(
                f"expected {self.channels} channels, got {x.shape}")
        axes, bshape = self._axes_and_shape(x)
        gamma = self.params["gamma"].reshape(bshape)
        beta = self.params["beta"].reshape(bshape)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var
            inv_std = 1.0 / np.sqrt(var.reshape(bshape) + self.eps)
            xhat = (x - mean.reshape(bshape)) * inv_std
            self._cache = (x, xhat, mean, inv_std, axes, bshape)
            return gamma * xhat + beta
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"].reshape(bshape) + self.eps)
        xhat = (x - self.buffers["running_mean"].reshape(bshape)) * inv_std
        return gamma * xhat + beta

    def backward(self, dout):
        x, xhat, mean, inv_std, axes, bshape = self._cache
        m = float(np.prod([x.shape[a] for a in axes]))
        gamma = self.params["gamma"].reshape(bshape)
        self.grads["beta"] = dout.sum(axis=axes)
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        dxhat = dout * gamma
        # backprop through batch mean/variance
        dvar = (dxhat * (x - mean.reshape(bshape))).sum(axis=axes) * (-0.5) \
            * (inv_std.reshape(self.channels) ** 3)
        dmean = -(dxhat.sum(axis=axes)) * inv_std.reshape(self.channels) \
            + dvar * (-2.0 / m) * (x - mean.reshape(bshape)).sum(axes)
        dx = (dxhat * inv_std
              + dvar.reshape(bshape) * 2.0 * (x - mean.reshape(bshape)) / m
              + dmean.reshape(bshape) / m)
        return dx


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, train):
        out = np.maximum(x, 0.0)
        if train:
            self._cache = x > 0
        return out

    def backward(self, dout):
        return dout * self._cache


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy of integer labels (no reduction)."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return log_norm - z[np.arange(len(labels)), labels]


def batch_loss(logits: np.ndarray, targets: np.ndarray, loss: str = "cross_entropy",
               sample_weight: np.ndarray | None = None) -> float:
    """Mean loss over the batch; ``targets`` is int labels for cross-entropy
    or a float array shaped like ``logits`` for squared error."""
    n = logits.shape[0]
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, float)
    if loss == "cross_entropy":
        per = cross_entropy(logits, targets)
    elif loss == "squared_error":
        per = 0.5 * ((logits - targets) ** 2).sum(axis=1)
    else:
        raise FedsimError(f"unknown loss {loss!r}")
    return float((w * per).sum() / n)


def _loss_grad(logits, targets, loss, sample_weight):
    n = logits.shape[0]
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, float)
    if loss == "cross_entropy":
        p = softmax(logits)
        d = p.copy()
        d[np.arange(n), targets] -= 1.0
    elif loss == "squared_error":
        d = logits - targets
    else:
        raise FedsimError(f"unknown loss {loss!r}")
    return d * (w / n)[:, None]


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class Network:
    """Ordered layer stack with a designated head (the last Dense layer)."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers
        self.training = True
        self._cache_ready = False
        self._logits = None
        head = None
        for i, layer in enumerate(layers):
            layer.name = f"layer{i}"
            if layer.kind == "dense":
                head = i
        if head is None:
            raise FedsimError("network needs at least one dense layer (the head)")
        self.head_index = head

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x, self.training)
        if self.training:
            self._cache_ready = True
            self._logits = x
        return x

    def forward_features(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode activations entering the head layer."""
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers[:self.head_index]:
            x = layer.forward(x, False)
        return x

    def backward(self, targets: np.ndarray, loss: str = "cross_entropy",
                 sample_weight: np.ndarray | None = None
                 ) -> tuple[dict[str, np.ndarray], float]:
        """Gradients of the mean batch loss w.r.t. every trainable parameter.

        Requires a train-mode forward on the same batch first; eval-mode
        calls are rejected because running-stat semantics would be wrong.
        """
        if not self.training:
            raise ModeError("backward requires train mode")
        if not self._cache_ready:
            raise ModeError("backward requires a preceding train-mode forward")
        loss_value = batch_loss(self._logits, targets, loss, sample_weight)
        d = _loss_grad(self._logits, targets, loss, sample_weight)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        grads = {}
        for layer in self.layers:
            for slot in layer.params:
                grads[f"{layer.name}.{slot}"] = layer.grads[slot]
        return grads, loss_value

    # -- parameter tree interop --------------------------------------------

    def _tag_for(self, layer_idx: int, layer: Layer, slot: str,
                 buffer: bool) -> ParamTag:
        if buffer:
            return ParamTag.BN_STAT
        if layer_idx == self.head_index:
            return ParamTag.HEAD
        return layer.tag_for(slot)

    def param_tree(self) -> ParamTree:
        """Snapshot of all parameters and buffers as a tagged tree."""
        entries = {}
        for i, layer in enumerate(self.layers):
            for slot, arr in layer.params.items():
                entries[f"{layer.name}.{slot}"] = (arr, self._tag_for(i, layer, slot, False))
            for slot, arr in layer.buffers.items():
                entries[f"{layer.name}.{slot}"] = (arr, self._tag_for(i, layer, slot, True))
        return ParamTree(entries)

    def load_tree(self, tree: ParamTree) -> "Network":
        """Copy a tree's values into this network's parameters and buffers."""
        for layer in self.layers:
            for slot in layer.params:
                layer.params[slot] = tree.get(f"{layer.name}.{slot}").copy()
            for slot in layer.buffers:
                layer.buffers[slot] = tree.get(f"{layer.name}.{slot}").copy()
        return self

    def trainable_names(self) -> list[str]:
        return sorted(f"{layer.name}.{slot}"
                      for layer in self.layers for slot in layer.params)

    def head_names(self) -> list[str]:
        head = self.layers[self.head_index]
        return sorted(f"{head.name}.{slot}" for slot in head.params)

    def num_classes(self) -> int:
        return self.layers[self.head_index].out_dim


def sgd_step(net: Network, grads: dict[str, np.ndarray], cfg: SgdConfig) -> None:
    """In-place vanilla SGD: p <- p - lr * g for every trainable parameter.

    Buffers (running stats) are untouched. A missing gradient key raises.
    """
    for layer in net.layers:
        for slot in layer.params:
            key = f"{layer.name}.{slot}"
            if key not in grads:
                raise FedsimError(f"missing gradient for {key}")
            layer.params[slot] = layer.params[slot] - cfg.learning_rate * grads[key]


def build_convnet(input_shape: tuple[int, int, int], num_classes: int,
                  hidden: int, channels: tuple[int, int] = (32, 64),
                  rng: np.random.Generator | None = None) -> Network:
    """Two conv+BN+ReLU+pool stages followed by two dense layers.

    ``input_shape`` is (channels, height, width); spatial dims must survive
    two 2x2 pool stages. The final Dense layer is the head.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    in_ch, h, w = input_shape
    h2, w2 = (h // 2) // 2, (w // 2) // 2
    if h2 < 1 or w2 < 1:
        raise FedsimError(
            f"input {h}x{w} too small for two conv+pool stages")
    c1, c2 = channels
    layers = [
        Conv2D(in_ch, c1), BatchNorm(c1), ReLU(), MaxPool2D(),
        Conv2D(c1, c2), BatchNorm(c2), ReLU(), MaxPool2D(),
        Flatten(),
        Dense(c2 * h2 * w2, hidden), ReLU(),
        Dense(hidden, num_classes),
    ]
    net = Network(layers)
    for layer in net.layers:
        layer.init_params(rng)
    return net
