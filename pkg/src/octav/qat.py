"""Toy multi-layer perceptron with fake-quantized weights and activations.

Reverse-mode differentiation is written out by hand so the estimator masks
at every quantization site are explicit. Used to measure STE gradient
variance growth, PWL parameter freezing, and estimator/clipping orderings on
a synthetic classification task.
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .estimators import Estimator, backward, fake_quant
from .quantizer import QuantSpec, ScalarSet, _as_scalar_set, max_scalar
from .solver import OctavConfig, octav
from .tensor import group_view

QUANT_MODES = ("none", "max", "octav_dynamic", "static")
ACTIVATIONS = ("identity", "relu")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "relu"
    quantized: bool = True


@dataclass
class ToyNet:
    """MLP whose quantized layers fake-quantize their weights and inputs.

    ``static_scalars[i]`` holds ``(weight_scalars, activation_scalar)`` for
    quantized layer ``i`` when ``mode == "static"``.
    """

    layers: list[Layer]
    mode: str = "none"
    bits: int = 4
    weight_estimator: Estimator = Estimator.MAD
    activation_estimator: Estimator = Estimator.PWL
    weight_axis: int | None = 0
    static_scalars: dict[int, tuple] = field(default_factory=dict)
    octav_config: OctavConfig = OctavConfig()

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError("a ToyNet needs at least 2 layers")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError("layer dimensions do not chain")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
        if self.mode not in QUANT_MODES:
            raise ValueError(f"unknown quant mode {self.mode!r}")
        self.weight_estimator = Estimator(self.weight_estimator)
        self.activation_estimator = Estimator(self.activation_estimator)

    @property
    def in_features(self) -> int:
        return self.layers[0].weight.shape[1]

    def quant_sites(self) -> list[int]:
        if self.mode == "none":
            return []
        return [i for i, layer in enumerate(self.layers) if layer.quantized]

    def weight_spec(self) -> QuantSpec:
        return QuantSpec(self.bits, signed=True)

    def activation_spec(self, i: int) -> QuantSpec:
        unsigned = i > 0 and self.layers[i - 1].activation == "relu"
        return QuantSpec(self.bits, signed=not unsigned)

    def clipping_scalars(self, i: int, role: str, x: np.ndarray) -> ScalarSet:
        """Scalars for quantized layer ``i``; ``role`` is "weight" or "activation"."""
        if role == "weight":
            spec, view = self.weight_spec(), group_view(x, self.weight_axis)
        else:
            spec, view = self.activation_spec(i), group_view(x)
        if self.mode == "max":
            return max_scalar(x, view, spec.signed)
        if self.mode == "octav_dynamic":
            return octav(x, view, spec, self.octav_config)[0]
        w_s, a_s = self.static_scalars[i]
        return _as_scalar_set(w_s if role == "weight" else a_s, x)


def init_net(
    sizes: list[int],
    activation: str = "relu",
    seed: int = 0,
    quantize_ends: bool = False,
    orthogonal: bool = False,
    **kwargs,
) -> ToyNet:
    """He-initialised MLP; the output layer has an identity activation.

    First and last layers stay in full precision unless ``quantize_ends``.
    """
    rng = np.random.default_rng(seed)
    layers = []
    n = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        if orthogonal:
            q, r = np.linalg.qr(rng.standard_normal((max(fan_in, fan_out),) * 2))
            w = (q * np.sign(np.diag(r)))[:fan_out, :fan_in]
        else:
            gain = 2.0 if activation == "relu" else 1.0
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(gain / fan_in)
        last = i == n - 1
        layers.append(
            Layer(
                w,
                np.zeros(fan_out),
                "identity" if last else activation,
                quantized=quantize_ends or not (i == 0 or last),
            )
        )
    return ToyNet(layers, **kwargs)


class Backprop(NamedTuple):
    loss: float
    weight_grads: list[np.ndarray]
    activation_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]


def forward(net: ToyNet, x: np.ndarray):
    """Logits and the per-layer cache needed by the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_features:
        raise ValueError(f"batch shape {x.shape} does not match net input {net.in_features}")
    sites = set(net.quant_sites())
    cache = []
    a = x
    for i, layer in enumerate(net.layers):
        entry = {"a_in": a}
        if i in sites:
            w_s = net.clipping_scalars(i, "weight", layer.weight)
            a_s = net.clipping_scalars(i, "activation", a)
            w_q, w_mask = fake_quant(layer.weight, w_s, net.weight_spec(), net.weight_estimator)
            a_q, _ = fake_quant(a, a_s, net.activation_spec(i), net.activation_estimator)
            entry.update(w_q=w_q, w_mask=w_mask, a_q=a_q, a_scalar=a_s)
        else:
            entry.update(w_q=layer.weight, w_mask=None, a_q=a, a_scalar=None)
        z = entry["a_q"] @ entry["w_q"].T + layer.bias
        entry["z"] = z
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        cache.append(entry)
    return a, cache


def _activation_mask(net: ToyNet, i: int, entry: dict, kind: Estimator) -> np.ndarray | None:
    ss = entry["a_scalar"]
    if ss is None or ss.degenerate[0]:
        return None
    return backward(entry["a_in"], ss.scalars[0], kind, net.activation_spec(i).signed)


def backward_pass(net: ToyNet, cache, dout: np.ndarray, activation_estimator=None):
    """Propagate ``dout`` (gradient of the loss w.r.t. the logits).

    ``activation_estimator`` overrides the net's activation rule, so several
    rules can be compared on one forward pass.
    """
    kind = Estimator(activation_estimator or net.activation_estimator)
    n = len(net.layers)
    w_grads, b_grads, a_grads = [None] * n, [None] * n, [None] * n
    d = dout
    for i in reversed(range(n)):
        layer, entry = net.layers[i], cache[i]
        dz = d * (entry["z"] > 0) if layer.activation == "relu" else d
        dw = dz.T @ entry["a_q"]
        if entry["w_mask"] is not None:
            dw = dw * entry["w_mask"]
        w_grads[i] = dw
        b_grads[i] = dz.sum(axis=0)
        da = dz @ entry["w_q"]
        mask = _activation_mask(net, i, entry, kind)
        if mask is not None:
            da = da * mask
        a_grads[i] = da
        d = da
    return w_grads, a_grads, b_grads


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    b = len(y)
    loss = -np.mean(np.log(p[np.arange(b), y]))
    p[np.arange(b), y] -= 1.0
    return float(loss), p / b


def forward_backward(net: ToyNet, batch, targets) -> Backprop:
    """Mean softmax cross-entropy and its (estimated) gradients."""
    targets = np.asarray(targets)
    batch = np.asarray(batch, dtype=np.float64)
    if targets.shape != (batch.shape[0],):
        raise ValueError("targets must hold one class index per batch row")
    logits, cache = forward(net, batch)
    loss, dlogits = _softmax_xent(logits, targets)
    w, a, b = backward_pass(net, cache, dlogits)
    return Backprop(loss, w, a, b)


def loss_only(net: ToyNet, batch, targets) -> float:
    logits, _ = forward(net, batch)
    return _softmax_xent(logits, np.asarray(targets))[0]


@dataclass
class GradientVarianceReport:
    """Per-layer STE/PWL activation-gradient variance statistics.

    ``ratio`` is the mean over batches of Var(STE)/Var(PWL) and ``ratio_se``
    its standard error. ``predicted`` is prod over quantized layers i >= l of
    1 / (1 - clip_prob[i]).
    """

    var_ste: np.ndarray
    var_pwl: np.ndarray
    ratio: np.ndarray
    ratio_se: np.ndarray
    clip_prob: np.ndarray
    predicted: np.ndarray
    batches: int

    def to_json(self) -> str:
        return json.dumps(
            {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()},
            indent=2,
        )


def measure_variance_ratio(net: ToyNet, batches, seed: int = 0) -> GradientVarianceReport:
    """Compare STE and PWL activation gradients on identical forward passes.

    The upstream gradient at the logits is drawn i.i.d. standard normal for
    every batch, so the measurement does not depend on any labels.
    """
    rng = np.random.default_rng(seed)
    n = len(net.layers)
    sites = net.quant_sites()
    ste, pwl = [], []
    clipped = np.zeros(n)
    seen = np.zeros(n)
    for x in batches:
        logits, cache = forward(net, x)
        dout = rng.standard_normal(logits.shape)
        _, g_ste, _ = backward_pass(net, cache, dout, Estimator.STE)
        _, g_pwl, _ = backward_pass(net, cache, dout, Estimator.PWL)
        ste.append([np.var(g) for g in g_ste])
        pwl.append([np.var(g) for g in g_pwl])
        for i in sites:
            entry = cache[i]
            mags = entry["a_in"] if not net.activation_spec(i).signed else np.abs(entry["a_in"])
            clipped[i] += np.count_nonzero(mags > entry["a_scalar"].scalars[0])
            seen[i] += mags.size
    ste, pwl = np.array(ste), np.array(pwl)
    if np.any(pwl == 0):
        raise ValueError("degenerate layer: zero PWL gradient variance")
    per_batch = ste / pwl
    nb = len(per_batch)
    ratio = per_batch.mean(axis=0)
    se = per_batch.std(axis=0, ddof=1) / np.sqrt(nb) if nb > 1 else np.zeros(n)
    p = np.divide(clipped, seen, out=np.zeros(n), where=seen > 0)
    predicted = np.array([np.prod(1.0 / (1.0 - p[l:])) for l in range(n)])
    return GradientVarianceReport(
        ste.mean(axis=0), pwl.mean(axis=0), ratio, se, p, predicted, nb
    )


@dataclass
class LearnedParamCount:
    """Per-iteration counts for each quantized weight tensor k.

    ``per_iteration[i, k]`` is the number of weights whose backward mask is
    nonzero at iteration i, i.e. weights the update can still move.
    ``updated[i, k]`` is the number that actually received a nonzero
    gradient (this also drops weights feeding dead units). ``total[k]`` is
    the element count.
    """

    layers: list[int]
    per_iteration: np.ndarray
    updated: np.ndarray
    total: np.ndarray
    vacuous: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "layers": self.layers,
                "per_iteration": self.per_iteration.tolist(),
                "updated": self.updated.tolist(),
                "total": self.total.tolist(),
                "vacuous": self.vacuous,
            }
        )


def sgd_step(net: ToyNet, grads: Backprop, lr: float) -> None:
    for layer, dw, db in zip(net.layers, grads.weight_grads, grads.bias_grads):
        layer.weight -= lr * dw
        layer.bias -= lr * db


def track_learned_params(
    net: ToyNet, data, steps: int, lr: float, batch_size: int | None = None, seed: int = 0
) -> LearnedParamCount:
    """Train with plain SGD under frozen clipping scalars and count, per
    iteration, the weights of each quantized tensor that can still learn.

    Works on a copy of ``net``. ``data`` is an ``(x, y)`` pair; the full set
    is used each step unless ``batch_size`` is given.
    """
    if net.mode != "static":
        raise ValueError("track_learned_params needs static clipping scalars")
    net = copy.deepcopy(net)
    x, y = data
    sites = net.quant_sites()
    spec = net.weight_spec()
    scalars = {i: net.clipping_scalars(i, "weight", net.layers[i].weight) for i in sites}
    vacuous = not any(
        np.any(np.abs(net.layers[i].weight) > scalars[i].broadcast()) for i in sites
    )
    if vacuous:
        warnings.warn("no weight exceeds its static clipping scalar; counts are vacuous")
    rng = np.random.default_rng(seed)
    eligible = np.zeros((steps, len(sites)), dtype=np.int64)
    updated = np.zeros_like(eligible)
    for it in range(steps):
        if batch_size is None:
            xb, yb = x, y
        else:
            idx = rng.choice(len(x), batch_size, replace=False)
            xb, yb = x[idx], y[idx]
        for k, i in enumerate(sites):
            _, mask = fake_quant(net.layers[i].weight, scalars[i], spec, net.weight_estimator)
            eligible[it, k] = np.count_nonzero(mask)
        grads = forward_backward(net, xb, yb)
        for k, i in enumerate(sites):
            updated[it, k] = np.count_nonzero(grads.weight_grads[i])
        sgd_step(net, grads, lr)
    total = np.array([net.layers[i].weight.size for i in sites])
    return LearnedParamCount(sites, eligible, updated, total, vacuous)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def make_blobs(
    n_classes: int = 8,
    dim: int = 16,
    n_train: int = 8000,
    n_test: int = 2000,
    spread: float = 1.0,
    center_scale: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian-blob classification set with unit-variance clusters around
    centres drawn from N(0, center_scale**2) per coordinate."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, dim)) * center_scale
    n = n_train + n_test
    y = rng.integers(0, n_classes, n)
    x = centers[y] + spread * rng.standard_normal((n, dim))
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def accuracy(net: ToyNet, x, y) -> float:
    logits, _ = forward(net, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train_toy(
    net: ToyNet,
    data: Dataset,
    epochs: int,
    lr: float = 0.05,
    batch_size: int = 64,
    seed: int = 0,
) -> list[float]:
    """Minibatch SGD on a copy of ``net``; held-out accuracy after each epoch."""
    net = copy.deepcopy(net)
    rng = np.random.default_rng(seed)
    n = len(data.x_train)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            sgd_step(net, forward_backward(net, data.x_train[idx], data.y_train[idx]), lr)
        curve.append(accuracy(net, data.x_test, data.y_test))
    return curve
