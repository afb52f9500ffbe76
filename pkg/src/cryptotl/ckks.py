"""Leveled CKKS over the RNS ring.

Chain layout: ``q_0`` (integer-part headroom), the mid primes (one per
multiplicative level, close to the scale) and a final special prime ``P`` used
only inside key switching. A fresh ciphertext sits at level ``L = len(chain) - 2``
with rows for ``q_0..q_L``; every rescale drops the top row.

Ciphertexts and plaintexts are kept in the evaluation domain. Scales are
tracked as base-2 logarithms so that they serialize canonically.

Key switching uses one RNS digit per active ciphertext prime, lifted to the
basis ``{q_0..q_l, P}``, followed by a rounded division by ``P``.
"""

from __future__ import annotations

import contextlib
import contextvars
import functools
import hashlib
import math
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import (DepthExhaustedError, EncodingRangeError, FingerprintMismatchError,
                     LevelMismatchError, MissingKeyError, ParameterError, ScaleMismatchError,
                     UsageError)
from .ring import (RingElement, RingParams, crt_lift, gaussian_coefficients, generate_primes,
                   ternary_coefficients)

MAX_LOG_SCALE = 60
SCALE_TOLERANCE = 2.0 ** -40
ENCODE_MARGIN_BITS = 1
INSECURE_LABEL = "TOY-INSECURE"


# --------------------------------------------------------------------------- params

@dataclass(frozen=True, eq=False)
class CkksParams:
    ring: RingParams
    log_scale: float
    name: str
    insecure: bool = False

    def __post_init__(self):
        if self.log_scale > MAX_LOG_SCALE:
            raise ParameterError(f"log2(scale) = {self.log_scale} exceeds {MAX_LOG_SCALE}")
        if len(self.ring.primes) < 2:
            raise ParameterError("chain too short: need at least 2 primes")
        for q in self.ring.primes[1:-1]:
            if abs(math.log2(q) - self.log_scale) > 1:
                raise ParameterError(f"mid prime {q} is not within 1 bit of the scale")

    @property
    def degree(self) -> int:
        return self.ring.degree

    @property
    def slots(self) -> int:
        return self.ring.degree // 2

    @property
    def primes(self) -> tuple:
        return self.ring.primes

    @property
    def max_level(self) -> int:
        """Level of a fresh ciphertext (number of rescales available)."""
        return len(self.ring.primes) - 2

    @property
    def special_index(self) -> int:
        return len(self.ring.primes) - 1

    @property
    def scale(self) -> float:
        return 2.0 ** self.log_scale

    @property
    def label(self) -> str:
        return INSECURE_LABEL if self.insecure else self.name

    @property
    def total_bits(self) -> int:
        return sum(p.bit_length() for p in self.ring.primes)

    @functools.cached_property
    def fingerprint(self) -> bytes:
        h = hashlib.sha256(b"cryptotl-ckks-params\x00")
        h.update(struct.pack("<I", self.degree))
        h.update(struct.pack("<I", len(self.primes)))
        for p in self.primes:
            h.update(struct.pack("<Q", p))
        h.update(struct.pack("<d", float(self.log_scale)))
        return h.digest()

    def __repr__(self):
        return (f"CkksParams({self.label}, N={self.degree}, log2q={self.total_bits}, "
                f"log2scale={self.log_scale})")


def make_params(degree: int, bit_sizes, log_scale: float, name: str = "custom",
                insecure: bool = False) -> CkksParams:
    if len(bit_sizes) < 2:
        raise ParameterError("chain too short: need at least 2 primes")
    primes = generate_primes(degree, bit_sizes)
    return CkksParams(RingParams(degree, primes), float(log_scale), name, insecure)


PRESET_LAYOUTS = {
    "CryptoTL_p1": (8192, [40] + [22] * 6 + [46], 22, False),
    "CryptoTL_p2": (16384, [60] + [50] * 6 + [60], 50, False),
    INSECURE_LABEL: (1024, [40] + [25] * 6 + [46], 25, True),
}
_ALIASES = {"p1": "CryptoTL_p1", "p2": "CryptoTL_p2", "toy": INSECURE_LABEL}


@functools.lru_cache(maxsize=None)
def get_preset(name: str) -> CkksParams:
    key = _ALIASES.get(name.lower(), name) if isinstance(name, str) else name
    if key not in PRESET_LAYOUTS:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESET_LAYOUTS)}")
    degree, bits, log_scale, insecure = PRESET_LAYOUTS[key]
    return make_params(degree, bits, log_scale, key, insecure)


def builtin_presets() -> dict:
    return {name: get_preset(name) for name in PRESET_LAYOUTS}


# --------------------------------------------------------------------------- op counting

_counters: contextvars.ContextVar = contextvars.ContextVar("cryptotl_op_counters", default=())


@contextlib.contextmanager
def counting():
    """Count homomorphic operations issued inside the block.

    Blocks nest: an operation is counted by every enclosing block.

    >>> with counting() as ops:
    ...     pass
    >>> ops["rotate"]
    0
    """
    ops = Counter()
    token = _counters.set(_counters.get() + (ops,))
    try:
        yield ops
    finally:
        _counters.reset(token)


def _tick(name: str, n: int = 1):
    for ops in _counters.get():
        ops[name] += n


# --------------------------------------------------------------------------- containers

@dataclass(frozen=True, eq=False)
class Plaintext:
    params: CkksParams
    data: np.ndarray  # (level + 1, N), evaluation domain
    log_scale: float

    @property
    def level(self) -> int:
        return self.data.shape[0] - 1

    @property
    def scale(self) -> float:
        return 2.0 ** self.log_scale

    @property
    def element(self) -> RingElement:
        return RingElement(self.params.ring, self.data, True)


@dataclass(frozen=True, eq=False)
class Ciphertext:
    params: CkksParams
    data: np.ndarray  # (size, level + 1, N), evaluation domain
    log_scale: float

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] not in (2, 3):
            raise UsageError(f"ciphertext must have 2 or 3 components, got {self.data.shape}")

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def level(self) -> int:
        return self.data.shape[1] - 1

    @property
    def scale(self) -> float:
        return 2.0 ** self.log_scale

    @property
    def fingerprint(self) -> bytes:
        return self.params.fingerprint

    @property
    def components(self) -> list:
        return [RingElement(self.params.ring, c, True) for c in self.data]

    def __eq__(self, other):
        if not isinstance(other, Ciphertext):
            return NotImplemented
        return (self.params.fingerprint == other.params.fingerprint
                and self.log_scale == other.log_scale
                and np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SecretKey:
    params: CkksParams
    data: np.ndarray  # (L + 2, N): s under every prime including P


@dataclass(frozen=True, eq=False)
class PublicKey:
    params: CkksParams
    b: np.ndarray  # (L + 1, N)
    a: np.ndarray


@dataclass(frozen=True, eq=False)
class KeySwitchKey:
    """Digit keys (b_i, a_i) over {q_0..q_L, P}; a_i is expanded from ``seed``."""

    params: CkksParams
    b: np.ndarray  # (L + 1, L + 2, N)
    a: np.ndarray
    seed: bytes


@dataclass(frozen=True, eq=False)
class RelinKey:
    params: CkksParams
    key: KeySwitchKey


@dataclass(frozen=True, eq=False)
class GaloisKeySet:
    params: CkksParams
    keys: dict = field(default_factory=dict)  # step -> KeySwitchKey

    @property
    def steps(self) -> frozenset:
        return frozenset(self.keys)

    def __contains__(self, step):
        return step in self.keys

    def get(self, step: int) -> KeySwitchKey:
        try:
            return self.keys[step]
        except KeyError:
            raise MissingKeyError(f"no Galois key for rotation step {step}") from None


def check_fingerprint(params: CkksParams, *objs):
    for o in objs:
        if o.params is not params and o.params.fingerprint != params.fingerprint:
            raise FingerprintMismatchError("operands were produced under different parameters")


# --------------------------------------------------------------------------- encoding

@functools.lru_cache(maxsize=None)
def _embedding(degree: int):
    n2 = 2 * degree
    slots = degree // 2
    rot = np.array([pow(5, j, n2) for j in range(slots)], dtype=np.int64)
    slot_idx = (rot - 1) // 2
    conj_idx = ((n2 - rot) - 1) // 2
    zeta = np.exp(1j * np.pi * np.arange(degree) / degree)
    return slot_idx, conj_idx, zeta


def _slots_to_real_coeffs(values: np.ndarray, degree: int) -> np.ndarray:
    """Inverse canonical embedding of real slot vectors (rows) to real coefficients."""
    slot_idx, conj_idx, zeta = _embedding(degree)
    vals = np.zeros((values.shape[0], degree), dtype=np.complex128)
    vals[:, slot_idx] = values
    vals[:, conj_idx] = np.conj(values)
    return (np.fft.fft(vals, axis=1) / degree * np.conj(zeta)).real


def _coeffs_to_slots(coeffs: np.ndarray, degree: int) -> np.ndarray:
    slot_idx, _, zeta = _embedding(degree)
    vals = np.fft.ifft(coeffs * zeta) * degree
    return vals[slot_idx].real


def _prepare_values(values, slots: int, batch: bool) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if not batch:
        v = v[None, :]
    if v.shape[1] > slots:
        raise EncodingRangeError(f"{v.shape[1]} values exceed {slots} slots")
    if not np.all(np.isfinite(v)):
        raise EncodingRangeError("values must be finite")
    if v.shape[1] < slots:
        v = np.pad(v, ((0, 0), (0, slots - v.shape[1])))
    return v


def _check_range(params: CkksParams, level: int, log_scale: float, max_abs: float):
    if max_abs == 0:
        return
    bits = log_scale + math.log2(max_abs)
    limit = math.log2(params.ring.modulus(level)) - ENCODE_MARGIN_BITS
    if bits >= limit:
        raise EncodingRangeError(
            f"scaled magnitude 2^{bits:.1f} exceeds level-{level} modulus budget 2^{limit:.1f}")


def _round_coeffs(real_coeffs: np.ndarray, log_scale: float) -> np.ndarray:
    scaled = np.rint(real_coeffs * 2.0 ** log_scale)
    if np.max(np.abs(scaled), initial=0.0) >= 2.0 ** 62:
        raise EncodingRangeError("scaled coefficients exceed 62 bits")
    return scaled.astype(np.int64)


def encode_many(values, params: CkksParams, level: int | None = None,
                log_scale: float | None = None, chunk: int = 64) -> np.ndarray:
    """Encode each row of ``values``; returns raw evaluation-domain data (m, level+1, N)."""
    level = params.max_level if level is None else level
    log_scale = params.log_scale if log_scale is None else log_scale
    v = _prepare_values(values, params.slots, batch=True)
    _check_range(params, level, log_scale, float(np.max(np.abs(v), initial=0.0)))
    ring = params.ring
    n = params.degree
    out = np.empty((v.shape[0], level + 1, n), dtype=np.uint64)
    pidx = np.tile(ring.pidx(level), min(chunk, v.shape[0]))
    for start in range(0, v.shape[0], chunk):
        block = v[start:start + chunk]
        coeffs = _round_coeffs(_slots_to_real_coeffs(block, n), log_scale)
        dst = out[start:start + block.shape[0]]
        for i in range(level + 1):
            dst[:, i, :] = (coeffs % np.int64(ring.primes[i])).astype(np.uint64)
        flat = dst.reshape(-1, n)
        ring.ntt_rows(flat, pidx[: flat.shape[0]])
    return out


def encode(values, params: CkksParams, level: int | None = None,
           scale: float | None = None, log_scale: float | None = None) -> Plaintext:
    """Encode up to N/2 reals (zero-padded) at ``level`` and ``scale``."""
    if scale is not None:
        if scale <= 0:
            raise UsageError("scale must be positive")
        log_scale = math.log2(scale)
    log_scale = params.log_scale if log_scale is None else log_scale
    level = params.max_level if level is None else level
    data = encode_many(np.asarray(values, dtype=np.float64)[None, :], params, level, log_scale)[0]
    return Plaintext(params, data, float(log_scale))


def decode(pt: Plaintext) -> np.ndarray:
    params = pt.params
    ring = params.ring
    coeff_rows = pt.data.copy()
    ring.intt_rows(coeff_rows, ring.pidx(pt.level))
    if pt.level == 0:
        p = np.uint64(ring.primes[0])
        r = coeff_rows[0]
        ints = np.where(r > p // np.uint64(2), -((p - r).astype(np.float64)), r.astype(np.float64))
    else:
        ints = np.array([float(x) for x in crt_lift(ring, coeff_rows)])
    return _coeffs_to_slots(ints, params.degree) / 2.0 ** pt.log_scale


# --------------------------------------------------------------------------- keys

def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _signed_to_ntt(params: CkksParams, coeffs: np.ndarray, pidx: np.ndarray) -> np.ndarray:
    rows = params.ring.reduce_signed(coeffs, pidx)
    params.ring.ntt_rows(rows, pidx)
    return rows


def _all_pidx(params: CkksParams) -> np.ndarray:
    return np.arange(len(params.primes), dtype=np.int64)


def _ext_pidx(params: CkksParams, level: int) -> np.ndarray:
    return np.append(np.arange(level + 1, dtype=np.int64), params.special_index)


def expand_uniform(params: CkksParams, seed: bytes, digits: int) -> np.ndarray:
    """Deterministic uniform residues (digits, L+2, N) from a 32-byte seed."""
    rng = np.random.default_rng(np.random.SeedSequence(int.from_bytes(seed, "little")))
    n = params.degree
    out = np.empty((digits, len(params.primes), n), dtype=np.uint64)
    for i in range(digits):
        for j, q in enumerate(params.primes):
            out[i, j] = rng.integers(0, q, size=n, dtype=np.uint64)
    return out


def _make_switch_key(sk: SecretKey, target: np.ndarray, rng: np.random.Generator) -> KeySwitchKey:
    """Key switching from secret ``target`` (all rows, NTT) to ``sk``."""
    params = sk.params
    ring = params.ring
    digits = params.max_level + 1
    pidx = _all_pidx(params)
    special = params.primes[-1]
    seed = rng.bytes(32)
    a = expand_uniform(params, seed, digits)
    b = np.empty_like(a)
    for i in range(digits):
        e = _signed_to_ntt(params, gaussian_coefficients(ring, rng), pidx)
        bi = ring.sub_rows(e, ring.mul_rows(a[i], sk.data, pidx), pidx)
        gadget = ring.mul_scalar_rows(target[i:i + 1], [special % params.primes[i]], pidx[i:i + 1])
        bi[i] = ring.add_rows(bi[i:i + 1], gadget, pidx[i:i + 1])[0]
        b[i] = bi
    for arr in (a, b):
        arr.setflags(write=False)
    return KeySwitchKey(params, b, a, seed)


def keygen(params: CkksParams, seed=None):
    """Secret, public and relinearization keys, deterministic for a given seed."""
    if len(params.primes) < 2:
        raise ParameterError("chain too short for key generation")
    rng = _rng(seed)
    ring = params.ring
    pidx = _all_pidx(params)
    s = _signed_to_ntt(params, ternary_coefficients(ring, rng), pidx)
    s.setflags(write=False)
    sk = SecretKey(params, s)

    top = ring.pidx(params.max_level)
    a = np.empty((top.size, params.degree), dtype=np.uint64)
    for i in top:
        a[i] = rng.integers(0, params.primes[i], size=params.degree, dtype=np.uint64)
    e = _signed_to_ntt(params, gaussian_coefficients(ring, rng), top)
    b = ring.sub_rows(e, ring.mul_rows(a, s[: top.size], top), top)
    pk = PublicKey(params, b, a)

    s2 = ring.mul_rows(s, s, pidx)
    rk = RelinKey(params, _make_switch_key(sk, s2, rng))
    return sk, pk, rk


def galois_element(step: int, degree: int) -> int:
    return pow(5, step % (degree // 2), 2 * degree)


def gen_galois_keys(sk: SecretKey, steps, seed=None) -> GaloisKeySet:
    params = sk.params
    steps = sorted({int(s) for s in steps})
    if not steps:
        raise UsageError("empty rotation step set")
    for s in steps:
        if s == 0 or abs(s) >= params.slots:
            raise UsageError(f"rotation step {s} outside 0 < |step| < {params.slots}")
    rng = _rng(seed)
    keys = {}
    for s in steps:
        perm = params.ring.galois_perm(galois_element(s, params.degree))
        keys[s] = _make_switch_key(sk, np.ascontiguousarray(sk.data[:, perm]), rng)
    return GaloisKeySet(params, keys)


# --------------------------------------------------------------------------- encrypt / decrypt

def encrypt(pt: Plaintext, key, seed=None) -> Ciphertext:
    """Encrypt under a public key, or symmetrically under the secret key."""
    params = pt.params
    check_fingerprint(params, key)
    ring = params.ring
    rng = _rng(seed)
    lvl = pt.level
    pidx = ring.pidx(lvl)
    e0 = _signed_to_ntt(params, gaussian_coefficients(ring, rng), pidx)
    if isinstance(key, SecretKey):
        a = np.empty((lvl + 1, params.degree), dtype=np.uint64)
        for i in pidx:
            a[i] = rng.integers(0, params.primes[i], size=params.degree, dtype=np.uint64)
        c0 = ring.sub_rows(ring.add_rows(e0, pt.data, pidx),
                           ring.mul_rows(a, key.data[: lvl + 1], pidx), pidx)
        c1 = a
    elif isinstance(key, PublicKey):
        v = _signed_to_ntt(params, ternary_coefficients(ring, rng), pidx)
        e1 = _signed_to_ntt(params, gaussian_coefficients(ring, rng), pidx)
        c0 = ring.add_rows(ring.add_rows(ring.mul_rows(v, key.b[: lvl + 1], pidx), e0, pidx),
                           pt.data, pidx)
        c1 = ring.add_rows(ring.mul_rows(v, key.a[: lvl + 1], pidx), e1, pidx)
    else:
        raise UsageError(f"cannot encrypt with {type(key).__name__}")
    return Ciphertext(params, np.stack([c0, c1]), pt.log_scale)


def decrypt(ct: Ciphertext, sk: SecretKey) -> Plaintext:
    check_fingerprint(ct.params, sk)
    if ct.size != 2:
        raise UsageError("relinearize the ciphertext before decrypting")
    ring = ct.params.ring
    pidx = ring.pidx(ct.level)
    m = ring.add_rows(ct.data[0], ring.mul_rows(ct.data[1], sk.data[: ct.level + 1], pidx), pidx)
    return Plaintext(ct.params, m, ct.log_scale)


def decrypt_decode(ct: Ciphertext, sk: SecretKey) -> np.ndarray:
    return decode(decrypt(ct, sk))


# --------------------------------------------------------------------------- arithmetic

def _same_scale(a: float, b: float) -> bool:
    return abs(2.0 ** (a - b) - 1.0) <= SCALE_TOLERANCE


def _check_operands(ct: Ciphertext, other, need_scale: bool):
    check_fingerprint(ct.params, other)
    if ct.level != other.level:
        raise LevelMismatchError(f"operand levels differ: {ct.level} vs {other.level}")
    if need_scale and not _same_scale(ct.log_scale, other.log_scale):
        raise ScaleMismatchError(
            f"operand scales differ: 2^{ct.log_scale:.6f} vs 2^{other.log_scale:.6f}")


def _flat_pidx(params: CkksParams, level: int, copies: int) -> np.ndarray:
    return np.tile(params.ring.pidx(level), copies)


def _rows_op(op, ct: Ciphertext, other_rows: np.ndarray) -> np.ndarray:
    n = ct.params.degree
    pidx = _flat_pidx(ct.params, ct.level, other_rows.shape[0] // (ct.level + 1))
    return op(np.ascontiguousarray(ct.data[: other_rows.shape[0] // (ct.level + 1)]).reshape(-1, n),
              other_rows, pidx).reshape(-1, ct.level + 1, n)


def he_add(ct: Ciphertext, other) -> Ciphertext:
    _check_operands(ct, other, need_scale=True)
    ring = ct.params.ring
    pidx = ring.pidx(ct.level)
    _tick("add")
    if isinstance(other, Plaintext):
        out = ct.data.copy()
        out[0] = ring.add_rows(ct.data[0], other.data, pidx)
        return Ciphertext(ct.params, out, ct.log_scale)
    size = max(ct.size, other.size)
    out = np.empty((size,) + ct.data.shape[1:], dtype=np.uint64)
    for c in range(size):
        if c < ct.size and c < other.size:
            out[c] = ring.add_rows(ct.data[c], other.data[c], pidx)
        else:
            out[c] = (ct.data if c < ct.size else other.data)[c]
    return Ciphertext(ct.params, out, ct.log_scale)


def he_negate(ct: Ciphertext) -> Ciphertext:
    n = ct.params.degree
    flat = ct.params.ring.neg_rows(ct.data.reshape(-1, n), _flat_pidx(ct.params, ct.level, ct.size))
    return Ciphertext(ct.params, flat.reshape(ct.data.shape), ct.log_scale)


def he_sub(ct: Ciphertext, other) -> Ciphertext:
    if isinstance(other, Plaintext):
        neg = Plaintext(other.params, other.params.ring.neg_rows(other.data, other.params.ring.pidx(other.level)),
                        other.log_scale)
        return he_add(ct, neg)
    return he_add(ct, he_negate(other))


def he_add_const(ct: Ciphertext, value) -> Ciphertext:
    """Add a scalar or slot vector, encoded at the ciphertext's level and scale."""
    vals = np.broadcast_to(np.asarray(value, dtype=np.float64), (ct.params.slots,))
    return he_add(ct, encode(vals, ct.params, ct.level, log_scale=ct.log_scale))


def he_mul_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    _check_operands(ct, pt, need_scale=False)
    ring = ct.params.ring
    pidx = ring.pidx(ct.level)
    _tick("mul_plain")
    out = np.stack([ring.mul_rows(c, pt.data, pidx) for c in ct.data])
    return Ciphertext(ct.params, out, ct.log_scale + pt.log_scale)


def he_mac_plain(cts, pts: np.ndarray, log_scale_pt: float) -> Ciphertext:
    """sum_i cts[i] * pts[i] with a fused kernel; counts one plain multiplication per term."""
    first = cts[0]
    params = first.params
    stack = np.stack([c.data for c in cts])
    if pts.shape[0] != stack.shape[0] or pts.shape[1] != first.level + 1:
        raise LevelMismatchError("plaintext stack does not match the ciphertext level")
    ring = params.ring
    _tick("mul_plain", stack.shape[0])
    _tick("add", stack.shape[0] - 1)
    out = K.mac_plain(pts, stack, ring.pidx(first.level), ring.moduli,
                      ring.barrett_lo, ring.barrett_hi)
    return Ciphertext(params, out, first.log_scale + log_scale_pt)


def he_mul(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_operands(a, b, need_scale=False)
    if a.size != 2 or b.size != 2:
        raise UsageError("he_mul expects size-2 operands; relinearize first")
    ring = a.params.ring
    pidx = ring.pidx(a.level)
    _tick("mul")
    d0 = ring.mul_rows(a.data[0], b.data[0], pidx)
    d1 = ring.add_rows(ring.mul_rows(a.data[0], b.data[1], pidx),
                       ring.mul_rows(a.data[1], b.data[0], pidx), pidx)
    d2 = ring.mul_rows(a.data[1], b.data[1], pidx)
    return Ciphertext(a.params, np.stack([d0, d1, d2]), a.log_scale + b.log_scale)


def _divide_by_last(params: CkksParams, rows: np.ndarray, pidx: np.ndarray) -> np.ndarray:
    """Rounded division by the prime of the last row; rows is (C, J, N) NTT."""
    ring = params.ring
    last = int(pidx[-1])
    big = ring.primes[last]
    keep = pidx[:-1]
    inv = [pow(big, -1, ring.primes[j]) for j in keep]
    out = np.empty((rows.shape[0], keep.size, rows.shape[2]), dtype=np.uint64)
    for c in range(rows.shape[0]):
        top = rows[c, -1:].copy()
        ring.intt_rows(top, pidx[-1:])
        lifted = K.center_lift(top[0], np.uint64(big), keep, ring.moduli)
        ring.ntt_rows(lifted, keep)
        out[c] = ring.mul_scalar_rows(ring.sub_rows(rows[c, :-1], lifted, keep), inv, keep)
    return out


def rescale(ct: Ciphertext) -> Ciphertext:
    if ct.level == 0:
        raise DepthExhaustedError("cannot rescale at level 0: multiplicative depth exhausted")
    _tick("rescale")
    q = ct.params.primes[ct.level]
    out = _divide_by_last(ct.params, ct.data, ct.params.ring.pidx(ct.level))
    return Ciphertext(ct.params, out, ct.log_scale - math.log2(q))


def mod_switch_to(x, level: int):
    """Drop primes above ``level`` without touching the scale."""
    if level > x.level or level < 0:
        raise LevelMismatchError(f"cannot switch from level {x.level} to {level}")
    if isinstance(x, Plaintext):
        return Plaintext(x.params, np.ascontiguousarray(x.data[: level + 1]), x.log_scale)
    return Ciphertext(x.params, np.ascontiguousarray(x.data[:, : level + 1]), x.log_scale)


def _decompose(params: CkksParams, d: np.ndarray, level: int) -> np.ndarray:
    """RNS digits of ``d`` (one per active prime) lifted to {q_0..q_l, P}, NTT."""
    ring = params.ring
    coef = d.copy()
    ring.intt_rows(coef, ring.pidx(level))
    ext = _ext_pidx(params, level)
    dig = K.lift_digits(coef, ext, ring.moduli)
    ring.ntt_rows(dig.reshape(-1, params.degree), np.tile(ext, level + 1))
    return dig


def _switch(params: CkksParams, dig: np.ndarray, key: KeySwitchKey, level: int,
            perm: np.ndarray) -> np.ndarray:
    ring = params.ring
    ext = _ext_pidx(params, level)
    acc = K.keyswitch_mac(dig, key.b[: level + 1], key.a[: level + 1], ext, perm, ext,
                          ring.moduli, ring.barrett_lo, ring.barrett_hi)
    return _divide_by_last(params, acc, ext)


@functools.lru_cache(maxsize=None)
def _identity_perm(degree: int) -> np.ndarray:
    return np.arange(degree, dtype=np.int64)


def relinearize(ct: Ciphertext, rk: RelinKey) -> Ciphertext:
    check_fingerprint(ct.params, rk)
    if ct.size == 2:
        warnings.warn("relinearize called on a size-2 ciphertext; returning it unchanged",
                      stacklevel=2)
        return ct
    _tick("relinearize")
    params = ct.params
    ring = params.ring
    pidx = ring.pidx(ct.level)
    dig = _decompose(params, ct.data[2], ct.level)
    u = _switch(params, dig, rk.key, ct.level, _identity_perm(params.degree))
    c0 = ring.add_rows(ct.data[0], u[0], pidx)
    c1 = ring.add_rows(ct.data[1], u[1], pidx)
    return Ciphertext(params, np.stack([c0, c1]), ct.log_scale)


def _rotate_with_digits(ct: Ciphertext, step: int, gks: GaloisKeySet, dig: np.ndarray) -> Ciphertext:
    params = ct.params
    ring = params.ring
    key = gks.get(step)
    perm = ring.galois_perm(galois_element(step, params.degree))
    u = _switch(params, dig, key, ct.level, perm)
    c0 = ring.add_rows(np.ascontiguousarray(ct.data[0][:, perm]), u[0], ring.pidx(ct.level))
    _tick("rotate")
    return Ciphertext(params, np.stack([c0, u[1]]), ct.log_scale)


def rotate(ct: Ciphertext, step: int, gks: GaloisKeySet) -> Ciphertext:
    """Cyclic left rotation of all N/2 slots by ``step`` (negative: right)."""
    check_fingerprint(ct.params, gks)
    if ct.size != 2:
        raise UsageError("relinearize before rotating")
    if step % ct.params.slots == 0:
        return ct
    gks.get(step)
    dig = _decompose(ct.params, ct.data[1], ct.level)
    return _rotate_with_digits(ct, step, gks, dig)


def rotate_many(ct: Ciphertext, steps, gks: GaloisKeySet) -> dict:
    """Several rotations of one ciphertext sharing a single digit decomposition."""
    check_fingerprint(ct.params, gks)
    steps = list(steps)
    for s in steps:
        if s % ct.params.slots:
            gks.get(s)
    out = {}
    dig = None
    for s in steps:
        if s % ct.params.slots == 0:
            out[s] = ct
            continue
        if dig is None:
            dig = _decompose(ct.params, ct.data[1], ct.level)
        out[s] = _rotate_with_digits(ct, s, gks, dig)
    return out
