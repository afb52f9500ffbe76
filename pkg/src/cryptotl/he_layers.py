"""Encrypted evaluation of the frozen server stack.

Slot layout: the N/2 slots are cut into ``p_impl`` regions of ``R`` slots (the
next power of two at or above ``2t``). Item ``i`` lives in ``[iR, iR + t)``.
Every multiplicative layer masks its output back to ``[0, t)`` of each region
through its plaintext operands, so a cyclic rotation by less than ``R - t``
only ever pulls zeros across a region boundary. Layers that read past ``t``
(the diagonal method) first get a duplicated copy ``[y | y | 0]`` from
:func:`replicate`, which costs one rotation and no level.

Level schedule of :func:`frozen_forward` (input at level ``l``)::

    conv        l   -> l-1
    dense1      l-1 -> l-2
    relu        l-2 -> l-4
    avgpool     l-4 -> l-5
    dense2      l-5 -> l-6

Replication and giant-step rotations run before the rescale of their stage,
while the scale is still large, so their rounding noise is relatively smaller.
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import ckks
from .approx import RELU_APPROX_COEFFS, relu_approx
from .ckks import Ciphertext, CkksParams, GaloisKeySet, RelinKey
from .errors import CapacityError, DataError, DepthExhaustedError, LevelMismatchError, UsageError

CIRCUIT_DEPTH = 6
CONV_WIDTH = 9
POOL_SIZE = 3
ITEM_WIDTH = 768
MIN_MASK_LOG_SCALE = 20.0


# --------------------------------------------------------------------------- packing

def bsgs_split(t: int) -> tuple[int, int]:
    """t = t1 * t2 with t1 the smallest divisor of t that is at least sqrt(t)."""
    t1 = min(d for d in range(1, t + 1) if t % d == 0 and d * d >= t)
    return t1, t // t1


@dataclass(frozen=True)
class PackingPlan:
    slots: int
    t: int
    region: int
    p_impl: int
    p_paper: int
    t1: int
    t2: int
    conv_width: int = CONV_WIDTH
    pool: int = POOL_SIZE

    @property
    def out_width(self) -> int:
        return self.t - self.pool + 1

    @property
    def rotations(self) -> frozenset:
        return plan_rotations(self)


def plan_packing(params_or_slots, t: int = ITEM_WIDTH, conv_width: int = CONV_WIDTH,
                 pool: int = POOL_SIZE) -> PackingPlan:
    """Region layout for items of width ``t``.

    ``p_paper = floor(slots / 2t)`` counts how many duplicated items fit side by
    side; ``p_impl = slots / R`` is what the rotation-safe region layout holds.
    """
    slots = params_or_slots.slots if isinstance(params_or_slots, CkksParams) else int(params_or_slots)
    if t < pool or t < 2:
        raise UsageError(f"item width {t} too small")
    if conv_width % 2 == 0:
        raise UsageError("convolution width must be odd")
    if 2 * t > slots:
        raise CapacityError(f"2t = {2 * t} exceeds {slots} slots")
    region = 1 << (2 * t - 1).bit_length()
    t1, t2 = bsgs_split(t)
    return PackingPlan(slots, t, region, slots // region, slots // (2 * t), t1, t2, conv_width, pool)


def plan_rotations(plan: PackingPlan) -> frozenset:
    half = plan.conv_width // 2
    steps = set(range(-half, 0)) | set(range(1, half + 1))
    steps |= set(range(1, plan.t1))
    steps |= {k * plan.t1 for k in range(1, plan.t2)}
    steps |= set(range(1, plan.pool))
    steps.add(-plan.t)
    steps.discard(0)
    return frozenset(steps)


def pack_batch(items, plan: PackingPlan) -> np.ndarray:
    items = [np.asarray(x, dtype=np.float64).ravel() for x in items]
    if len(items) > plan.p_impl:
        raise CapacityError(f"{len(items)} items exceed batch capacity {plan.p_impl}")
    out = np.zeros(plan.slots)
    for i, x in enumerate(items):
        if x.size > plan.t:
            raise CapacityError(f"item {i} has width {x.size} > {plan.t}")
        out[i * plan.region: i * plan.region + x.size] = x
    return out


def unpack_batch(slots, plan: PackingPlan, n_items: int, width: int | None = None) -> np.ndarray:
    width = plan.t if width is None else width
    if n_items > plan.p_impl:
        raise CapacityError(f"{n_items} items exceed batch capacity {plan.p_impl}")
    v = np.asarray(slots)
    return np.stack([v[i * plan.region: i * plan.region + width] for i in range(n_items)]) \
        if n_items else np.zeros((0, width))


def region_mask(plan: PackingPlan, lo: int, hi: int, value=1.0) -> np.ndarray:
    """Slot vector equal to ``value`` on local offsets [lo, hi) of every region."""
    local = np.zeros(plan.region)
    local[lo:hi] = value
    return np.tile(local, plan.p_impl)


def region_vector(plan: PackingPlan, v, offset: int = 0) -> np.ndarray:
    """Place ``v`` at local offset ``offset`` of every region."""
    v = np.asarray(v, dtype=np.float64)
    local = np.zeros(plan.region)
    local[offset: offset + v.size] = v
    return np.tile(local, plan.p_impl)


# --------------------------------------------------------------------------- weights

@dataclass(frozen=True, eq=False)
class FrozenWeights:
    """Frozen server prefix: conv(f) -> dense1 (t x t) -> relu_approx -> avgpool -> dense2."""

    conv_w: np.ndarray
    conv_b: float
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    relu_coeffs: tuple = RELU_APPROX_COEFFS
    pool: int = POOL_SIZE

    def __post_init__(self):
        t = self.width
        o = t - self.pool + 1
        expect = {"w1": (t, t), "b1": (t,), "w2": (o, o), "b2": (o,)}
        for name, shape in expect.items():
            if np.shape(getattr(self, name)) != shape:
                raise DataError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        if np.ndim(self.conv_w) != 1 or len(self.conv_w) % 2 == 0:
            raise DataError("conv filter must be a 1-D array of odd length")
        if len(self.relu_coeffs) != 4:
            raise DataError("relu_approx needs four coefficients")
        for name in ("conv_w", "w1", "b1", "w2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} contains non-finite values")

    @property
    def width(self) -> int:
        return int(np.shape(self.w1)[0])

    @property
    def out_width(self) -> int:
        return self.width - self.pool + 1

    @classmethod
    def random(cls, t: int = ITEM_WIDTH, seed=None, conv_width: int = CONV_WIDTH,
               pool: int = POOL_SIZE) -> "FrozenWeights":
        """Glorot-uniform weights and small uniform biases."""
        rng = np.random.default_rng(seed)
        o = t - pool + 1

        def glorot(fan_in, fan_out, shape):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, shape)

        return cls(conv_w=glorot(conv_width, conv_width, conv_width),
                   conv_b=float(rng.uniform(-0.1, 0.1)),
                   w1=glorot(t, t, (t, t)), b1=rng.uniform(-0.1, 0.1, t),
                   w2=glorot(o, o, (o, o)), b2=rng.uniform(-0.1, 0.1, o),
                   pool=pool)


# --------------------------------------------------------------------------- plaintext twin

def plain_conv_same(x: np.ndarray, w: np.ndarray, b: float = 0.0) -> np.ndarray:
    """out[..., k] = sum_j w[j] * x[..., k + j - f//2], zero padded."""
    x = np.atleast_2d(x)
    half = len(w) // 2
    xp = np.pad(x, ((0, 0), (half, half)))
    t = x.shape[1]
    out = sum(w[j] * xp[:, j: j + t] for j in range(len(w)))
    return out + b


def plain_avgpool_valid(x: np.ndarray, f: int = POOL_SIZE) -> np.ndarray:
    x = np.atleast_2d(x)
    n = x.shape[1] - f + 1
    return sum(x[:, i: i + n] for i in range(f)) / f


def plaintext_frozen_forward(items, weights: FrozenWeights) -> np.ndarray:
    x = np.atleast_2d(np.asarray(items, dtype=np.float64))
    if x.shape[1] != weights.width:
        raise DataError(f"items have width {x.shape[1]}, expected {weights.width}")
    h = plain_conv_same(x, weights.conv_w, weights.conv_b)
    h = h @ weights.w1.T + weights.b1
    h = relu_approx(h, weights.relu_coeffs)
    h = plain_avgpool_valid(h, weights.pool)
    return h @ weights.w2.T + weights.b2


# --------------------------------------------------------------------------- plaintext operands

@dataclass(frozen=True, eq=False)
class EncodedOperand:
    """A stack of encoded plaintexts sharing one level and scale."""

    data: np.ndarray  # (m, level + 1, N)
    log_scale: float

    @property
    def level(self) -> int:
        return self.data.shape[1] - 1

    def plaintext(self, i: int, params: CkksParams) -> ckks.Plaintext:
        return ckks.Plaintext(params, self.data[i], self.log_scale)


def _log_prime(params: CkksParams, level: int) -> float:
    return math.log2(params.primes[level])


def conv_tap_vectors(w, plan: PackingPlan) -> np.ndarray:
    """Masked tap vectors for rotate-then-multiply convolution, ordered by step."""
    w = np.asarray(w, dtype=np.float64)
    half = len(w) // 2
    rows = []
    for j, wj in enumerate(w):
        s = j - half
        rows.append(region_mask(plan, max(0, -s), min(plan.t, plan.t - s), wj))
    return np.stack(rows)


def bsgs_diagonals(m: np.ndarray, plan: PackingPlan) -> np.ndarray:
    """Shifted, masked generalized diagonals diag'_{k t1 + j} as slot vectors."""
    t = plan.t
    if m.shape[0] > t or m.shape[1] > t:
        raise DataError(f"matrix {m.shape} does not fit width {t}")
    mp = np.zeros((t, t))
    mp[: m.shape[0], : m.shape[1]] = m
    rows = np.arange(t)
    diag = mp[rows[None, :], (rows[None, :] + rows[:, None]) % t]  # diag[i, r] = M[r, r+i]
    out = np.zeros((t, plan.slots))
    for i in range(t):
        k = i // plan.t1
        local = np.zeros(plan.region)
        local[k * plan.t1: k * plan.t1 + t] = diag[i]
        out[i] = np.tile(local, plan.p_impl)
    return out


def encode_conv(w, plan: PackingPlan, params: CkksParams, level: int,
                log_scale: float | None = None) -> EncodedOperand:
    log_scale = _log_prime(params, level) if log_scale is None else log_scale
    return EncodedOperand(ckks.encode_many(conv_tap_vectors(w, plan), params, level, log_scale), log_scale)


def encode_bsgs(m, plan: PackingPlan, params: CkksParams, level: int,
                log_scale: float | None = None) -> EncodedOperand:
    log_scale = _log_prime(params, level) if log_scale is None else log_scale
    diags = bsgs_diagonals(np.asarray(m, dtype=np.float64), plan)
    return EncodedOperand(ckks.encode_many(diags, params, level, log_scale), log_scale)


def encode_pool_mask(plan: PackingPlan, params: CkksParams, level: int,
                     log_scale: float) -> EncodedOperand:
    mask = region_mask(plan, 0, plan.out_width, 1.0 / plan.pool)
    return EncodedOperand(ckks.encode_many(mask[None, :], params, level, log_scale), log_scale)


def pool_mask_log_scale(params: CkksParams, level: int, in_log_scale: float) -> float:
    """Mask scale that brings the pooled output back to the default scale, if precise enough."""
    return max(_log_prime(params, level) + params.log_scale - in_log_scale, MIN_MASK_LOG_SCALE)


def relu_output_log_scale(params: CkksParams, level: int, in_log_scale: float, c3: float) -> float:
    sq = 2 * in_log_scale - _log_prime(params, level) - math.log2(abs(c3))
    return sq + in_log_scale - _log_prime(params, level - 1)


@dataclass(frozen=True)
class EvalKeys:
    relin: RelinKey
    galois: GaloisKeySet


@dataclass(frozen=True, eq=False)
class LayerPlaintexts:
    """Everything the server precomputes for one weight set, plan and input level."""

    params: CkksParams
    plan: PackingPlan
    weights: FrozenWeights
    level: int
    log_scale: float
    conv: EncodedOperand
    dense1: EncodedOperand
    pool_mask: EncodedOperand
    dense2: EncodedOperand
    schedule: dict = field(default_factory=dict)


def check_depth(level: int, needed: int = CIRCUIT_DEPTH):
    if level < needed:
        raise DepthExhaustedError(
            f"circuit needs {needed} levels but only {level} are available")


def prepare_layers(weights: FrozenWeights, plan: PackingPlan, params: CkksParams,
                   level: int | None = None, log_scale: float | None = None) -> LayerPlaintexts:
    """Encode every frozen-layer operand at the level and scale where it is consumed."""
    level = params.max_level if level is None else level
    log_scale = params.log_scale if log_scale is None else log_scale
    check_depth(level)
    if weights.width != plan.t or weights.pool != plan.pool or len(weights.conv_w) != plan.conv_width:
        raise DataError("weights do not match the packing plan")
    if plan.slots != params.slots:
        raise DataError("packing plan was built for a different slot count")
    c3 = weights.relu_coeffs[0]
    if c3 == 0:
        raise UsageError("relu_approx needs a nonzero cubic coefficient")
    sched = {"conv": (level, log_scale)}
    conv = encode_conv(weights.conv_w, plan, params, level)
    s = log_scale  # scale is preserved: the mask scale equals the dropped prime
    sched["dense1"] = (level - 1, s)
    dense1 = encode_bsgs(weights.w1, plan, params, level - 1)
    sched["relu"] = (level - 2, s)
    s = relu_output_log_scale(params, level - 2, s, c3)
    sched["pool"] = (level - 4, s)
    mask_scale = pool_mask_log_scale(params, level - 4, s)
    pool = encode_pool_mask(plan, params, level - 4, mask_scale)
    s = s + mask_scale - _log_prime(params, level - 4)
    sched["dense2"] = (level - 5, s)
    dense2 = encode_bsgs(weights.w2, plan, params, level - 5)
    sched["output"] = (level - 6, s)
    return LayerPlaintexts(params, plan, weights, level, log_scale, conv, dense1, pool, dense2, sched)


# --------------------------------------------------------------------------- encrypted layers

def _check_operand(ct: Ciphertext, op: EncodedOperand, name: str):
    if ct.level != op.level:
        raise LevelMismatchError(f"{name}: ciphertext at level {ct.level}, operand at {op.level}")


def _add_bias(ct: Ciphertext, vec: np.ndarray) -> Ciphertext:
    if not np.any(vec):
        return ct
    return ckks.he_add(ct, ckks.encode(vec, ct.params, ct.level, log_scale=ct.log_scale))


def replicate(ct: Ciphertext, plan: PackingPlan, gks: GaloisKeySet) -> Ciphertext:
    """[y | 0] -> [y | y | 0] in every region; the upper part must already be zero."""
    return ckks.he_add(ct, ckks.rotate(ct, -plan.t, gks))


def _conv_product(ct: Ciphertext, taps: EncodedOperand, gks: GaloisKeySet) -> Ciphertext:
    if ct.level < 1:
        raise DepthExhaustedError("convolution needs one level")
    _check_operand(ct, taps, "conv")
    half = taps.data.shape[0] // 2
    steps = [j - half for j in range(taps.data.shape[0])]
    rots = ckks.rotate_many(ct, [s for s in steps if s], gks)
    terms = [ct if s == 0 else rots[s] for s in steps]
    return ckks.he_mac_plain(terms, taps.data, taps.log_scale)


def enc_conv1d(ct: Ciphertext, taps: EncodedOperand, plan: PackingPlan, gks: GaloisKeySet,
               bias: float = 0.0, duplicate: bool = False) -> Ciphertext:
    """Zero-padded 'same' convolution of every item; consumes one level.

    Rotations are hoisted: the input is rotated by every tap offset and each
    rotation is multiplied by a tap vector masked to the in-range positions.
    """
    out = _conv_product(ct, taps, gks)
    if duplicate:
        out = replicate(out, plan, gks)
    hi = 2 * plan.t if duplicate else plan.t
    return _add_bias(ckks.rescale(out), region_mask(plan, 0, hi, bias))


def enc_dense_bsgs(ct: Ciphertext, diags: EncodedOperand, plan: PackingPlan, gks: GaloisKeySet,
                   bias=None) -> Ciphertext:
    """Matrix-vector product on duplicated input with the baby-step giant-step diagonal method."""
    if ct.level < 1:
        raise DepthExhaustedError("dense layer needs one level")
    _check_operand(ct, diags, "dense")
    t1, t2 = plan.t1, plan.t2
    baby = ckks.rotate_many(ct, range(1, t1), gks)
    babies = [ct] + [baby[j] for j in range(1, t1)]
    acc = None
    for k in range(t2):
        inner = ckks.he_mac_plain(babies, diags.data[k * t1:(k + 1) * t1], diags.log_scale)
        if k:
            inner = ckks.rotate(inner, k * t1, gks)
        acc = inner if acc is None else ckks.he_add(acc, inner)
    out = ckks.rescale(acc)
    if bias is not None:
        out = _add_bias(out, region_vector(plan, bias))
    return out


def enc_relu_approx(ct: Ciphertext, coeffs, relin: RelinKey, plan: PackingPlan) -> Ciphertext:
    """c3 z^3 + c2 z^2 + c1 z + c0 in two levels.

    The cubic coefficient is folded into the scale of z^2, so the cubic branch
    is (c3 z^2) * (z + c2/c3); the linear branch is multiplied by a plaintext
    whose scale lands it on the same level and scale. The constant is added
    only on valid slots so the region tails stay zero.
    """
    c3, c2, c1, c0 = (float(c) for c in coeffs)
    if c3 == 0:
        raise UsageError("relu_approx needs a nonzero cubic coefficient")
    if ct.level < 2:
        raise DepthExhaustedError("relu_approx needs two levels")
    params = ct.params
    lvl = ct.level
    sq = ckks.rescale(ckks.relinearize(ckks.he_mul(ct, ct), relin))
    if c3 < 0:
        sq = ckks.he_negate(sq)
    sq = Ciphertext(params, sq.data, sq.log_scale - math.log2(abs(c3)))  # now encodes c3 z^2
    shifted = ckks.mod_switch_to(ckks.he_add_const(ct, c2 / c3), lvl - 1)
    cubic = ckks.rescale(ckks.relinearize(ckks.he_mul(sq, shifted), relin))

    z = ckks.mod_switch_to(ct, lvl - 1)
    c1_pt = ckks.encode(np.full(params.slots, c1), params, lvl - 1, log_scale=sq.log_scale)
    linear = ckks.rescale(ckks.he_mul_plain(z, c1_pt))
    out = ckks.he_add(cubic, linear)
    return _add_bias(out, region_mask(plan, 0, plan.t, c0))


def _pool_product(ct: Ciphertext, mask: EncodedOperand, plan: PackingPlan,
                  gks: GaloisKeySet) -> Ciphertext:
    if ct.level < 1:
        raise DepthExhaustedError("pooling needs one level")
    _check_operand(ct, mask, "pool")
    rots = ckks.rotate_many(ct, range(1, plan.pool), gks)
    acc = ct
    for i in range(1, plan.pool):
        acc = ckks.he_add(acc, rots[i])
    return ckks.he_mul_plain(acc, mask.plaintext(0, ct.params))


def enc_avgpool(ct: Ciphertext, mask: EncodedOperand, plan: PackingPlan, gks: GaloisKeySet,
                duplicate: bool = False) -> Ciphertext:
    """Valid stride-1 average pooling; the 1/f mask also zeroes invalid slots."""
    out = _pool_product(ct, mask, plan, gks)
    if duplicate:
        out = replicate(out, plan, gks)
    return ckks.rescale(out)


@contextlib.contextmanager
def _stage(ops: dict, name: str):
    with ckks.counting() as c:
        yield
    ops.setdefault(name, Counter()).update(c)


def frozen_forward(ct: Ciphertext, layers, plan: PackingPlan, keys: EvalKeys,
                   layer_ops: dict | None = None) -> Ciphertext:
    """Encrypted frozen stack; consumes exactly six levels.

    ``layers`` is a :class:`LayerPlaintexts` or a :class:`FrozenWeights` (encoded
    on the fly). If ``layer_ops`` is a dict it receives one op counter per stage.
    """
    check_depth(ct.level)
    if isinstance(layers, FrozenWeights):
        layers = prepare_layers(layers, plan, ct.params, ct.level, ct.log_scale)
    ckks.check_fingerprint(ct.params, layers, keys.relin, keys.galois)
    if layers.plan != plan:
        raise DataError("layers were prepared for a different packing plan")
    if ct.level != layers.level or not ckks._same_scale(ct.log_scale, layers.log_scale):
        raise LevelMismatchError(
            f"query at level {ct.level}, scale 2^{ct.log_scale:.3f}; layers prepared for "
            f"level {layers.level}, scale 2^{layers.log_scale:.3f}")
    w = layers.weights
    ops = layer_ops if layer_ops is not None else {}
    gks = keys.galois

    with _stage(ops, "conv"):
        h = _conv_product(ct, layers.conv, gks)
    with _stage(ops, "replicate"):
        h = replicate(h, plan, gks)
    with _stage(ops, "conv"):
        h = _add_bias(ckks.rescale(h), region_mask(plan, 0, 2 * plan.t, w.conv_b))
    with _stage(ops, "dense1"):
        h = enc_dense_bsgs(h, layers.dense1, plan, gks, bias=w.b1)
    with _stage(ops, "relu"):
        h = enc_relu_approx(h, w.relu_coeffs, keys.relin, plan)
    with _stage(ops, "pool"):
        h = _pool_product(h, layers.pool_mask, plan, gks)
    with _stage(ops, "replicate"):
        h = replicate(h, plan, gks)
    with _stage(ops, "pool"):
        h = ckks.rescale(h)
    with _stage(ops, "dense2"):
        h = enc_dense_bsgs(h, layers.dense2, plan, gks, bias=w.b2)
    return h
