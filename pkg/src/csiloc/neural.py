"""A small double-precision feed-forward network engine.

Layers operate on batches: ``(B, features)`` for dense layers and
``(B, C, H, W)`` for convolution and pooling. Every layer caches what its
backward pass needs during ``forward``; ``backward`` returns the gradient
with respect to the layer input and stores parameter gradients in
``layer.grads``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ChecksumMismatchError,
    ConfigMismatchError,
    FileFormatError,
    InvalidConfigError,
    ShapeMismatchError,
    VersionMismatchError,
)

LAYER_KINDS = ("fc", "relu", "dropout", "softmax", "conv2d", "maxpool2d", "flatten", "linear")

# Parameter totals printed alongside the architectures; kept for reporting only.
TABLE1_REPORTED_TOTALS = {"mlp_classifier": 257_574, "mlp_regressor": 248_322,
                          "cnn_regressor": 236_114}

CE_CLAMP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidConfigError(f"unknown layer kind {self.kind!r}")
        p = self.params
        if self.kind == "fc" and not (p.get("in_features", 0) > 0 and p.get("units", 0) > 0):
            raise InvalidConfigError("fc needs positive in_features and units")
        if self.kind == "dropout" and not 0 <= p.get("rate", -1) < 1:
            raise InvalidConfigError("dropout rate must be in [0, 1)")
        if self.kind == "conv2d" and not all(p.get(k, 0) > 0 for k in
                                             ("in_channels", "filters", "kernel")):
            raise InvalidConfigError("conv2d needs positive in_channels, filters, kernel")
        if self.kind == "maxpool2d" and not p.get("pool", 0) > 0:
            raise InvalidConfigError("maxpool2d needs a positive pool size")


# -- layers -------------------------------------------------------------------

class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def signature(self):
        """Non-differentiable branch choices of the last forward (for gradient checks)."""
        return None


class Dense(Layer):
    kind = "fc"

    def __init__(self, in_features, units, rng):
        super().__init__()
        limit = math.sqrt(6.0 / (in_features + units))
        self.params["W"] = rng.uniform(-limit, limit, size=(in_features, units))
        self.params["b"] = np.zeros(units)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[0]:
            raise ShapeMismatchError(f"fc expects (B, {self.params['W'].shape[0]}), got {x.shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        self.grads["W"] = self._x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return grad * self._mask

    def signature(self):
        return self._mask


class Dropout(Layer):
    """Inverted dropout: surviving units are scaled by ``1 / (1 - rate)`` at train time."""

    kind = "dropout"

    def __init__(self, rate, rng):
        super().__init__()
        self.rate = rate
        self.rng = rng
        self.freeze_mask = False
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._mask = None
            return x
        if not (self.freeze_mask and self._mask is not None and self._mask.shape == x.shape):
            keep = self.rng.uniform(size=x.shape) >= self.rate
            self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


def softmax(a, axis=-1):
    """Numerically stable softmax (max-subtracted)."""
    a = np.asarray(a, dtype=float)
    z = np.exp(a - a.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False):
        self._p = softmax(x, axis=-1)
        return self._p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class Identity(Layer):
    kind = "linear"

    def forward(self, x, train=False):
        return x

    def backward(self, grad):
        return grad


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Conv2D(Layer):
    """Stride-1 convolution with zero "same" padding (odd kernels)."""

    kind = "conv2d"

    def __init__(self, in_channels, filters, kernel, rng):
        super().__init__()
        if kernel % 2 != 1:
            raise InvalidConfigError("same padding needs an odd kernel size")
        fan_in = in_channels * kernel * kernel
        fan_out = filters * kernel * kernel
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self.params["W"] = rng.uniform(-limit, limit, size=(filters, in_channels, kernel, kernel))
        self.params["b"] = np.zeros(filters)
        self.pad = kernel // 2

    def forward(self, x, train=False):
        w = self.params["W"]
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeMismatchError(f"conv2d expects (B, {w.shape[1]}, H, W), got {x.shape}")
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        k = w.shape[2]
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))        # (B, C, H, W, k, k)
        self._cols = cols
        self._xshape = x.shape
        out = np.einsum("bchwij,fcij->bfhw", cols, w, optimize=True)
        return out + self.params["b"][None, :, None, None]

    def backward(self, grad):
        w = self.params["W"]
        k, p = w.shape[2], self.pad
        self.grads["W"] = np.einsum("bfhw,bchwij->fcij", grad, self._cols, optimize=True)
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        b, c, h, wd = self._xshape
        dxp = np.zeros((b, c, h + 2 * p, wd + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + wd] += np.einsum("bfhw,fc->bchw", grad, w[:, :, i, j],
                                                          optimize=True)
        return dxp[:, :, p:p + h, p:p + wd]


class MaxPool2D(Layer):
    """Non-overlapping max pooling; odd trailing rows/columns are dropped."""

    kind = "maxpool2d"

    def __init__(self, pool=2):
        super().__init__()
        self.pool = pool

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        q = self.pool
        ho, wo = h // q, w // q
        blocks = x[:, :, :ho * q, :wo * q].reshape(b, c, ho, q, wo, q).transpose(0, 1, 2, 4, 3, 5)
        flat = blocks.reshape(b, c, ho, wo, q * q)
        self._arg = flat.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        b, c, h, w = self._shape
        q = self.pool
        ho, wo = h // q, w // q
        flat = np.zeros((b, c, ho, wo, q * q))
        np.put_along_axis(flat, self._arg[..., None], grad[..., None], axis=-1)
        blocks = flat.reshape(b, c, ho, wo, q, q).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(self._shape)
        dx[:, :, :ho * q, :wo * q] = blocks.reshape(b, c, ho * q, wo * q)
        return dx

    def signature(self):
        return self._arg


def _make_layer(spec: LayerSpec, rng):
    p = spec.params
    if spec.kind == "fc":
        return Dense(p["in_features"], p["units"], rng)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "dropout":
        return Dropout(p["rate"], rng)
    if spec.kind == "softmax":
        return Softmax()
    if spec.kind == "conv2d":
        return Conv2D(p["in_channels"], p["filters"], p["kernel"], rng)
    if spec.kind == "maxpool2d":
        return MaxPool2D(p["pool"])
    if spec.kind == "flatten":
        return Flatten()
    return Identity()


# -- network ------------------------------------------------------------------

class Network:
    def __init__(self, specs, input_shape, seed: int = 0, name: str = ""):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.layers = [_make_layer(s, rng) for s in self.specs]
        self.mode = "infer"
        self._check_shapes()

    def _check_shapes(self):
        x = np.zeros((1, *self.input_shape))
        try:
            self.output_shape = self.forward(x).shape[1:]
        except ShapeMismatchError as exc:
            raise InvalidConfigError(f"incompatible layer stack: {exc}") from exc

    @property
    def head(self) -> str:
        return "softmax" if self.specs[-1].kind == "softmax" else "linear"

    def train_mode(self):
        self.mode = "train"
        return self

    def infer_mode(self):
        self.mode = "infer"
        return self

    def forward(self, x, train: bool | None = None):
        train = (self.mode == "train") if train is None else train
        x = np.asarray(x, dtype=float)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(f"expected input (B, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def predict(self, x, batch_size: int = 512):
        x = np.asarray(x, dtype=float)
        outs = [self.forward(x[s:s + batch_size], train=False) for s in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, *self.output_shape))

    def backward(self, loss_grad):
        """Backpropagate from the output gradient; returns the input gradient."""
        g = loss_grad
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def param_layers(self):
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.params]

    def parameters(self):
        return [(i, name, layer.params[name]) for i, layer in self.param_layers()
                for name in sorted(layer.params)]

    def gradients(self):
        return [(i, name, layer.grads[name]) for i, layer in self.param_layers()
                for name in sorted(layer.params)]

    def n_parameters(self) -> int:
        return int(sum(p.size for _, _, p in self.parameters()))

    def copy(self) -> "Network":
        return network_from_bytes(network_to_bytes(self))

    def set_dropout_frozen(self, frozen: bool):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.freeze_mask = frozen


def forward(net: Network, x):
    return net.forward(x)


def backward(net: Network, x, loss_grad):
    """Forward ``x`` in the network's mode (dropout masks honoured), then backprop."""
    net.forward(x)
    net.backward(loss_grad)
    return net.gradients()


def sgd_step(net: Network, grads, learning_rate: float) -> Network:
    for (i, name, g) in grads:
        p = net.layers[i].params[name]
        if p.shape != g.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p -= learning_rate * g
    return net


# -- losses -------------------------------------------------------------------

def cross_entropy(p, label) -> float:
    """``-sum l_i log p_i`` for one distribution, with ``p`` clamped at 1e-12."""
    p = np.asarray(p, dtype=float)
    label = np.asarray(label, dtype=float)
    return float(-np.sum(label * np.log(np.maximum(p, CE_CLAMP))))


def squared_l2_loss(pred, target) -> float:
    """Batch mean of squared Euclidean distances."""
    diff = np.atleast_2d(np.asarray(pred, float) - np.asarray(target, float))
    return float(np.mean(np.sum(diff ** 2, axis=-1)))


def loss_and_grad(kind: str, output, target):
    """Batch-mean loss value and its gradient w.r.t. the network output."""
    n = output.shape[0]
    if kind == "cross_entropy":
        p = np.maximum(output, CE_CLAMP)
        value = float(-np.sum(target * np.log(p)) / n)
        return value, -target / p / n
    if kind == "squared_l2":
        diff = output - target
        return float(np.sum(diff ** 2) / n), 2.0 * diff / n
    raise ConfigMismatchError(f"unknown loss {kind!r}")


def one_hot(indices, n_classes: int) -> np.ndarray:
    out = np.zeros((len(indices), n_classes))
    out[np.arange(len(indices)), np.asarray(indices, dtype=int)] = 1.0
    return out


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    loss: str = "squared_l2"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.loss not in ("cross_entropy", "squared_l2"):
            raise InvalidConfigError(f"unknown loss {self.loss!r}")


def _check_head(net: Network, loss: str):
    expected = "cross_entropy" if net.head == "softmax" else "squared_l2"
    if loss != expected:
        raise ConfigMismatchError(f"{net.head} head needs {expected} loss, got {loss}")


def evaluate_loss(net: Network, x, y, loss: str, batch_size: int = 512) -> float:
    total = 0.0
    for s in range(0, len(x), batch_size):
        out = net.forward(x[s:s + batch_size], train=False)
        value, _ = loss_and_grad(loss, out, y[s:s + batch_size])
        total += value * len(out)
    return total / len(x)


def train(net: Network, x, y, config: TrainConfig):
    """Mini-batch SGD with a seeded shuffle; returns ``(net, history)``.

    ``y`` holds one-hot rows (cross-entropy) or target vectors (squared
    loss). ``history[e]`` is the full training-set loss in inference mode
    after epoch ``e``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0:
        raise InvalidConfigError("training set is empty")
    if len(x) != len(y):
        raise ShapeMismatchError("inputs and targets differ in length")
    _check_head(net, config.loss)
    rng = np.random.default_rng(config.seed)
    for layer in net.layers:
        if isinstance(layer, Dropout):
            layer.rng = np.random.default_rng(rng.integers(2 ** 63))
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), config.batch_size):
            idx = order[s:s + config.batch_size]
            out = net.forward(x[idx], train=True)
            _, g = loss_and_grad(config.loss, out, y[idx])
            net.backward(g)
            sgd_step(net, net.gradients(), config.learning_rate)
        history.append(evaluate_loss(net, x, y, config.loss))
    net.infer_mode()
    return net, history


# -- gradient check -----------------------------------------------------------

@dataclass
class GradientCheckReport:
    max_rel_error: dict
    n_checked: dict
    n_skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _signatures(net: Network):
    return [layer.signature() for layer in net.layers]


def _same_signatures(a, b) -> bool:
    return all((sa is None and sb is None) or np.array_equal(sa, sb) for sa, sb in zip(a, b))


def gradient_check(net: Network, x, y, loss: str, n_per_tensor: int = 200,
                   step: float = 1e-5, seed: int = 0, tolerance: float = 1e-4,
                   train: bool = True) -> GradientCheckReport:
    """Compare backprop gradients with central differences on sampled parameters.

    Dropout masks are drawn once and pinned. Parameters whose perturbation
    flips a ReLU or max-pool branch (a non-differentiable point) are
    skipped and counted in ``n_skipped``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    net.set_dropout_frozen(True)
    try:
        out = net.forward(x, train=train)
        base_sig = [None if s is None else s.copy() for s in _signatures(net)]
        _, g = loss_and_grad(loss, out, y)
        net.backward(g)
        analytic = {(i, name): grad.copy() for i, name, grad in net.gradients()}

        def loss_at():
            value, _ = loss_and_grad(loss, net.forward(x, train=train), y)
            return value, _signatures(net)

        errors, counts, skipped = {}, {}, 0
        for i, name, param in net.parameters():
            key = f"{i}:{net.layers[i].kind}.{name}"
            flat = param.reshape(-1)
            picks = rng.choice(flat.size, size=min(n_per_tensor, flat.size), replace=False)
            worst, n_ok = 0.0, 0
            for j in picks:
                orig = flat[j]
                flat[j] = orig + step
                lp, sp = loss_at()
                flat[j] = orig - step
                lm, sm = loss_at()
                flat[j] = orig
                if not (_same_signatures(sp, base_sig) and _same_signatures(sm, base_sig)):
                    skipped += 1
                    continue
                ga = analytic[(i, name)].reshape(-1)[j]
                gn = (lp - lm) / (2 * step)
                rel = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
                worst = max(worst, rel)
                n_ok += 1
            errors[key] = worst
            counts[key] = n_ok
        return GradientCheckReport(errors, counts, skipped, tolerance)
    finally:
        net.set_dropout_frozen(False)


# -- architectures ------------------------------------------------------------

def build_table1(kind: str, n_classes: int = 15, n_inputs: int = 180,
                 cnn_input=(6, 30, 30), seed: int = 0) -> Network:
    """The three reference architectures (two MLPs, one CNN)."""
    if kind == "mlp_classifier":
        widths = [n_inputs, 256, 256, 256, 64]
        specs = []
        for a, b in zip(widths[:-1], widths[1:]):
            specs += [LayerSpec("fc", {"in_features": a, "units": b}), LayerSpec("relu")]
        specs += [LayerSpec("dropout", {"rate": 0.3}),
                  LayerSpec("fc", {"in_features": 64, "units": n_classes}),
                  LayerSpec("softmax")]
        return Network(specs, (n_inputs,), seed, kind)
    if kind == "mlp_regressor":
        widths = [n_inputs, 256, 256, 256, 256]
        specs = []
        for a, b in zip(widths[:-1], widths[1:]):
            specs += [LayerSpec("fc", {"in_features": a, "units": b}), LayerSpec("relu")]
        specs += [LayerSpec("dropout", {"rate": 0.3}),
                  LayerSpec("fc", {"in_features": 256, "units": 2}),
                  LayerSpec("linear")]
        return Network(specs, (n_inputs,), seed, kind)
    if kind == "cnn_regressor":
        c, h, w = cnn_input
        specs = []
        for ch in (c, 16, 16):
            specs += [LayerSpec("conv2d", {"in_channels": ch, "filters": 16, "kernel": 3}),
                      LayerSpec("relu")]
        flat = 16 * (h // 2) * (w // 2)
        specs += [LayerSpec("maxpool2d", {"pool": 2}), LayerSpec("flatten"),
                  LayerSpec("fc", {"in_features": flat, "units": 64}), LayerSpec("relu"),
                  LayerSpec("dropout", {"rate": 0.3}),
                  LayerSpec("fc", {"in_features": 64, "units": 2}), LayerSpec("linear")]
        return Network(specs, tuple(cnn_input), seed, kind)
    raise InvalidConfigError(f"unknown architecture {kind!r}")


def fc_widths(net: Network) -> list[int]:
    fcs = [s for s in net.specs if s.kind == "fc"]
    return [fcs[0].params["in_features"]] + [s.params["units"] for s in fcs]


def parameter_report(kind: str) -> dict:
    net = build_table1(kind)
    return {"kind": kind, "computed": net.n_parameters(),
            "reported": TABLE1_REPORTED_TOTALS[kind]}


# -- model file ---------------------------------------------------------------

MODEL_MAGIC = b"CSILOCNN"
MODEL_VERSION = 1


def network_to_bytes(net: Network) -> bytes:
    """``CSILOCNN`` container: magic, u32 version, u32 table length, JSON layer
    table (specs, input shape, parameter shapes), parameters as little-endian
    doubles in table order, 8-byte BLAKE2b checksum of the preceding bytes."""
    params = net.parameters()
    table = {
        "name": net.name,
        "seed": net.seed,
        "input_shape": list(net.input_shape),
        "layers": [{"kind": s.kind, "params": s.params} for s in net.specs],
        "tensors": [{"layer": i, "name": n, "shape": list(p.shape)} for i, n, p in params],
    }
    tb = json.dumps(table, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(tb)))
    buf.write(tb)
    for _, _, p in params:
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.blake2b(body, digest_size=8).digest()


def network_from_bytes(data: bytes) -> Network:
    if len(data) < 24 or data[:8] != MODEL_MAGIC:
        raise FileFormatError("not a CSILOCNN model file")
    version, tlen = struct.unpack_from("<II", data, 8)
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"model version {version}, expected {MODEL_VERSION}")
    body, check = data[:-8], data[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != check:
        raise ChecksumMismatchError("model checksum mismatch (truncated or corrupted file)")
    table = json.loads(body[16:16 + tlen].decode())
    specs = [LayerSpec(layer["kind"], layer["params"]) for layer in table["layers"]]
    net = Network(specs, tuple(table["input_shape"]), table["seed"], table["name"])
    pos = 16 + tlen
    for t in table["tensors"]:
        n = int(np.prod(t["shape"]))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(t["shape"])
        net.layers[t["layer"]].params[t["name"]][...] = arr
        pos += 8 * n
    if pos != len(body):
        raise FileFormatError("trailing bytes in model payload")
    return net


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
