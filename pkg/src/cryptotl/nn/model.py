"""Layer stack, forward and backward passes.

Inputs are batches of row vectors, shape ``(batch, width)``. Dense weights are
stored as ``(out, in)`` so that a layer computes ``x @ W.T + b``. The final
layer must be a sigmoid dense layer; the loss is the per-unit binary cross
entropy against one-hot targets, summed over units and averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..approx import RELU_APPROX_COEFFS, TRUSTED_RANGE, relu_approx, relu_approx_grad
from ..errors import DataError, UsageError

ACTIVATIONS = ("linear", "relu", "relu_approx", "sigmoid")
KINDS = ("conv1d", "dense", "avgpool", "maxpool", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0  # filter width, unit count or pool size
    activation: str = "linear"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise UsageError("dropout rate must be in [0, 1)")
        if self.kind != "dropout" and self.size < 1:
            raise UsageError(f"{self.kind} layer needs a positive size")

    def output_width(self, width: int) -> int:
        if self.kind == "dense":
            return self.size
        if self.kind in ("avgpool", "maxpool"):
            return width - self.size + 1
        return width


@dataclass(frozen=True)
class ModelSpec:
    input_width: int
    layers: tuple
    frozen: int = 0  # leading layers that form the frozen prefix

    def __post_init__(self):
        w = self.input_width
        for layer in self.layers:
            w = layer.output_width(w)
            if w < 1:
                raise UsageError("layer stack shrinks the width below 1")
        last = self.layers[-1] if self.layers else None
        if last is None or last.kind != "dense" or last.activation != "sigmoid":
            raise UsageError("the last layer must be a sigmoid dense layer")

    @property
    def widths(self) -> list:
        out = [self.input_width]
        for layer in self.layers:
            out.append(layer.output_width(out[-1]))
        return out


def server_spec(width: int = 768, conv_width: int = 9, pool: int = 3) -> ModelSpec:
    o = width - pool + 1
    return ModelSpec(width, (
        LayerSpec("conv1d", conv_width),
        LayerSpec("dense", width, "relu_approx"),
        LayerSpec("avgpool", pool),
        LayerSpec("dropout", rate=0.2),
        LayerSpec("dense", o),
        LayerSpec("dense", 2, "sigmoid"),
    ), frozen=5)


def client_spec(width: int = 766, pool: int = 3) -> ModelSpec:
    o = width - pool + 1
    return ModelSpec(width, (
        LayerSpec("dense", width, "relu"),
        LayerSpec("maxpool", pool),
        LayerSpec("dropout", rate=0.2),
        LayerSpec("dense", o),
        LayerSpec("dense", 2, "sigmoid"),
    ))


@dataclass
class ModelState:
    params: list  # one dict of arrays per layer ({} for parameter-free layers)
    seed: int = 0
    epoch: int = 0
    velocity: list | None = None

    def copy(self) -> "ModelState":
        return ModelState([{k: v.copy() for k, v in p.items()} for p in self.params],
                          self.seed, self.epoch,
                          None if self.velocity is None
                          else [{k: v.copy() for k, v in p.items()} for p in self.velocity])

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for p in self.params for v in p.values()]) \
            if any(self.params) else np.zeros(0)

    def equals(self, other: "ModelState") -> bool:
        return all(p.keys() == q.keys() and all(np.array_equal(p[k], q[k]) for k in p)
                   for p, q in zip(self.params, other.params))


def check_state(state: ModelState, spec: ModelSpec):
    widths = spec.widths
    if len(state.params) != len(spec.layers):
        raise DataError("state does not match the layer count of the model")
    for i, (layer, p) in enumerate(zip(spec.layers, state.params)):
        if layer.kind == "dense":
            shapes = {"W": (layer.size, widths[i]), "b": (layer.size,)}
        elif layer.kind == "conv1d":
            shapes = {"w": (layer.size,), "b": (1,)}
        else:
            shapes = {}
        if {k: v.shape for k, v in p.items()} != shapes:
            raise DataError(f"layer {i} parameters do not match the model layout")
        if any(not np.all(np.isfinite(v)) for v in p.values()):
            raise DataError(f"layer {i} has non-finite parameters")


def init_state(spec: ModelSpec, seed: int = 0) -> ModelState:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    widths = spec.widths
    params = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            lim = math.sqrt(6.0 / (widths[i] + layer.size))
            params.append({"W": rng.uniform(-lim, lim, (layer.size, widths[i])),
                           "b": np.zeros(layer.size)})
        elif layer.kind == "conv1d":
            lim = math.sqrt(6.0 / (2 * layer.size))
            params.append({"w": rng.uniform(-lim, lim, layer.size), "b": np.zeros(1)})
        else:
            params.append({})
    return ModelState(params, seed)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z, name):
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "relu_approx":
        return relu_approx(z, RELU_APPROX_COEFFS)
    return _sigmoid(z)


def _activation_grad(z, a, name):
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "relu_approx":
        return relu_approx_grad(z, RELU_APPROX_COEFFS)
    return a * (1.0 - a)


@dataclass
class ForwardPass:
    output: np.ndarray
    activations: list  # input of every layer, then the output
    caches: list = field(default_factory=list)
    out_of_range: int = 0  # relu_approx pre-activations outside the trusted range


def forward(state: ModelState, spec: ModelSpec, x, mode: str = "infer", rng=None) -> ForwardPass:
    if mode not in ("train", "infer"):
        raise UsageError("mode must be 'train' or 'infer'")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.input_width:
        raise DataError(f"input width {x.shape[1]} does not match {spec.input_width}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(state.seed)
    acts = [x]
    caches = []
    oor = 0
    h = x
    for layer, p in zip(spec.layers, state.params):
        cache = None
        if layer.kind == "dense":
            z = h @ p["W"].T + p["b"]
            if layer.activation == "relu_approx":
                oor += int(np.count_nonzero((z < TRUSTED_RANGE[0]) | (z > TRUSTED_RANGE[1])))
            out = _activate(z, layer.activation)
            cache = z
        elif layer.kind == "conv1d":
            half = layer.size // 2
            xp = np.pad(h, ((0, 0), (half, half)))
            t = h.shape[1]
            out = sum(p["w"][j] * xp[:, j: j + t] for j in range(layer.size)) + p["b"][0]
            cache = xp
        elif layer.kind == "avgpool":
            n = h.shape[1] - layer.size + 1
            out = sum(h[:, i: i + n] for i in range(layer.size)) / layer.size
        elif layer.kind == "maxpool":
            n = h.shape[1] - layer.size + 1
            windows = np.stack([h[:, i: i + n] for i in range(layer.size)])
            cache = np.argmax(windows, axis=0)  # first maximum wins
            out = np.max(windows, axis=0)
        else:
            if mode == "train" and layer.rate > 0:
                keep = (rng.random(h.shape) >= layer.rate) / (1.0 - layer.rate)
                out = h * keep
                cache = keep
            else:
                out = h
        caches.append(cache)
        h = out
        acts.append(h)
    return ForwardPass(h, acts, caches, oor)


def bce_loss(probs: np.ndarray, labels) -> float:
    y = one_hot(labels)
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    return float(-np.mean(np.sum(y * np.log(p) + (1 - y) * np.log(1 - p), axis=1)))


def loss_from_logits(logits: np.ndarray, labels) -> float:
    """Numerically stable twin of :func:`bce_loss` for the final pre-activations."""
    y = one_hot(labels)
    return float(np.mean(np.sum(np.logaddexp(0.0, logits) - y * logits, axis=1)))


def one_hot(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    out = np.zeros((labels.size, 2))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss(state: ModelState, spec: ModelSpec, x, labels, mode: str = "infer", rng=None) -> float:
    fp = forward(state, spec, x, mode, rng)
    return loss_from_logits(fp.caches[-1], labels)


def backward(state: ModelState, spec: ModelSpec, fp: ForwardPass, labels) -> list:
    """Gradients of the mean BCE loss, one dict per layer matching ``state.params``."""
    if fp is None or len(fp.caches) != len(spec.layers):
        raise UsageError("backward needs the forward pass of the same model")
    y = one_hot(labels)
    batch = y.shape[0]
    grad = (fp.output - y) / batch  # gradient w.r.t. the final logits
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p, cache = spec.layers[i], state.params[i], fp.caches[i]
        x_in = fp.activations[i]
        if layer.kind == "dense":
            if i != len(spec.layers) - 1:
                grad = grad * _activation_grad(cache, fp.activations[i + 1], layer.activation)
            grads[i] = {"W": grad.T @ x_in, "b": grad.sum(axis=0)}
            grad = grad @ p["W"]
        elif layer.kind == "conv1d":
            f = layer.size
            t = x_in.shape[1]
            half = f // 2
            dw = np.array([np.sum(grad * cache[:, j: j + t]) for j in range(f)])
            dxp = np.zeros_like(cache)
            for j in range(f):
                dxp[:, j: j + t] += p["w"][j] * grad
            grads[i] = {"w": dw, "b": np.array([grad.sum()])}
            grad = dxp[:, half: half + t]
        elif layer.kind == "avgpool":
            n = grad.shape[1]
            dx = np.zeros_like(x_in)
            for k in range(layer.size):
                dx[:, k: k + n] += grad / layer.size
            grads[i] = {}
            grad = dx
        elif layer.kind == "maxpool":
            n = grad.shape[1]
            dx = np.zeros_like(x_in)
            rows = np.arange(grad.shape[0])[:, None]
            cols = np.arange(n)[None, :] + cache
            np.add.at(dx, (rows, cols), grad)
            grads[i] = {}
            grad = dx
        else:
            grads[i] = {}
            if cache is not None:
                grad = grad * cache
    return grads


def predict(state: ModelState, spec: ModelSpec, x) -> tuple:
    """Class (argmax of the two sigmoid units, ties to class 0) and its unit value."""
    probs = forward(state, spec, x, "infer").output
    cls = np.argmax(probs, axis=1)
    return cls, probs[np.arange(probs.shape[0]), cls]


def accuracy(state: ModelState, spec: ModelSpec, x, labels) -> float:
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        return float("nan")
    return float(np.mean(predict(state, spec, x)[0] == labels))
