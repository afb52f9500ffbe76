"""Optimizers and training loops (plain SGD with momentum and DP-SGD)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..approx import TRUSTED_RANGE
from ..errors import DataError, UsageError
from .model import (ModelSpec, ModelState, accuracy, backward, check_state, client_spec,
                    forward, init_state, loss, server_spec)
from .privacy import DpConfig, PrivacyReport, account_epsilon


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 1
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be at least 1")
        if self.batch_size < 1:
            raise UsageError("batch size must be at least 1")
        if not 0 < self.val_fraction < 1:
            raise UsageError("validation fraction must be in (0, 1)")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise UsageError("lr must be >= 0 and momentum in [0, 1)")


@dataclass
class TrainResult:
    state: ModelState
    history: list = field(default_factory=list)  # per epoch: (train_loss, val_loss)
    privacy: PrivacyReport | None = None
    val_accuracy: float = float("nan")
    steps: int = 0


def sgd_step(state: ModelState, grads: list, lr: float, momentum: float = 0.0) -> ModelState:
    """v <- momentum * v - lr * g;  theta <- theta + v.  Returns a new state."""
    velocity = state.velocity or [{k: np.zeros_like(v) for k, v in p.items()} for p in state.params]
    new_params, new_vel = [], []
    for p, g, v in zip(state.params, grads, velocity):
        nv = {k: momentum * v[k] - lr * g[k] for k in p}
        new_vel.append(nv)
        new_params.append({k: p[k] + nv[k] for k in p})
    return ModelState(new_params, state.seed, state.epoch, new_vel)


def _sum_gradients(per_example: list) -> list:
    total = [{k: np.zeros_like(v) for k, v in g.items()} for g in per_example[0]]
    for g in per_example:
        for t, gi in zip(total, g):
            for k in t:
                t[k] += gi[k]
    return total


def mean_gradients(per_example: list) -> list:
    """Sum per-example gradients in order, then divide by their count."""
    return [{k: v / len(per_example) for k, v in t.items()} for t in _sum_gradients(per_example)]


def _global_norm(grads: list) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for g in grads for v in g.values()))


def dpsgd_step(state: ModelState, per_example: list, dp: DpConfig, rng,
               lr: float = 0.01, momentum: float = 0.0) -> ModelState:
    """Clip each example to norm ``clip``, add N(0, (noise*clip)^2) to the sum, average, step."""
    if not dp.clip > 0:
        raise UsageError("clip norm must be positive")
    if not per_example:
        raise DataError("empty batch")
    rng = np.random.default_rng(rng)
    clipped = []
    for g in per_example:
        norm = _global_norm(g)
        factor = min(1.0, dp.clip / norm) if norm > 0 else 1.0
        clipped.append([{k: v * factor for k, v in gi.items()} for gi in g])
    total = _sum_gradients(clipped)
    if dp.noise > 0:
        std = dp.noise * dp.clip
        for g in total:
            for k in g:
                g[k] = g[k] + rng.normal(0.0, std, g[k].shape)
    avg = [{k: v / len(clipped) for k, v in g.items()} for g in total]
    return sgd_step(state, avg, lr, momentum)


def check_labels(y) -> np.ndarray:
    y = np.asarray(y).ravel()
    if y.size == 0:
        raise DataError("empty dataset")
    if not np.all(np.isin(y, (0, 1))):
        raise DataError("labels must be 0 or 1")
    if np.all(y == y[0]):
        raise DataError(f"class balance error: every label is {int(y[0])}")
    return y.astype(np.int64)


def _split(n: int, frac: float, rng) -> tuple:
    perm = rng.permutation(n)
    n_val = int(round(frac * n)) if n >= 10 else 0
    return perm[n_val:], perm[:n_val]


def fit(state: ModelState, spec: ModelSpec, x, y, config: TrainConfig = TrainConfig(),
        dp: DpConfig | None = None) -> TrainResult:
    """Mini-batch training with early stopping on a held-out split; restores the best epoch."""
    x = np.asarray(x, dtype=np.float64)
    y = check_labels(y)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise DataError("features and labels disagree in length")
    if x.shape[1] != spec.input_width:
        raise DataError(f"feature width {x.shape[1]} does not match {spec.input_width}")
    check_state(state, spec)
    use_dp = dp is not None and dp.noise > 0
    rng = np.random.default_rng(config.seed)
    tr, va = _split(len(y), config.val_fraction, rng)
    result = TrainResult(state)
    best_val, bad = math.inf, 0
    best = state
    oor = 0
    for epoch in range(config.epochs):
        order = rng.permutation(tr)
        for start in range(0, len(order), config.batch_size):
            idx = order[start: start + config.batch_size]
            if use_dp:
                per_ex = []
                for i in idx:
                    fp = forward(state, spec, x[i: i + 1], "train", rng)
                    oor += fp.out_of_range
                    per_ex.append(backward(state, spec, fp, y[i: i + 1]))
                state = dpsgd_step(state, per_ex, dp, rng, config.lr, config.momentum)
            else:
                fp = forward(state, spec, x[idx], "train", rng)
                oor += fp.out_of_range
                state = sgd_step(state, backward(state, spec, fp, y[idx]), config.lr, config.momentum)
            result.steps += 1
        state.epoch = epoch + 1
        train_loss = loss(state, spec, x[tr], y[tr])
        val_loss = loss(state, spec, x[va], y[va]) if len(va) else train_loss
        result.history.append((train_loss, val_loss))
        if val_loss < best_val:
            best_val, best, bad = val_loss, state, 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    if oor:
        warnings.warn(f"{oor} relu_approx pre-activations fell outside {TRUSTED_RANGE}",
                      RuntimeWarning, stacklevel=2)
    result.state = best
    result.val_accuracy = accuracy(best, spec, x[va], y[va]) if len(va) else accuracy(best, spec, x, y)
    if use_dp:
        delta = dp.delta if dp.delta is not None else 1.0 / len(y)
        q = min(1.0, config.batch_size / max(1, len(tr)))
        result.privacy = account_epsilon(dp, q, result.steps, delta)
    return result


def train_source(x, y, spec: ModelSpec | None = None, config: TrainConfig = TrainConfig(),
                 dp: DpConfig | None = None) -> TrainResult:
    """Train the full server network; DP-SGD when ``dp`` has a positive noise multiplier."""
    x = np.asarray(x, dtype=np.float64)
    spec = server_spec(x.shape[1]) if spec is None else spec
    return fit(init_state(spec, config.seed), spec, x, y, config, dp)


def finetune_client(features, y, spec: ModelSpec | None = None,
                    config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train the client stack on (decrypted) frozen-layer features."""
    features = np.asarray(features, dtype=np.float64)
    spec = client_spec() if spec is None else spec
    if features.ndim != 2 or features.shape[1] != spec.input_width:
        raise DataError(f"features must have width {spec.input_width}")
    return fit(init_state(spec, config.seed), spec, features, y, config)
