"""Negacyclic polynomial ring Z_q[X]/(X^N + 1) in residue-number-system form.

An element stores one row of N residues per active prime of the chain. The
level of an element is the index of its highest active prime, so a level-l
element carries rows for q_0..q_l. Elements live either in the coefficient
domain or in the evaluation (NTT) domain; multiplication is only defined in
the latter.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ParameterError, RepresentationError, UsageError

SIGMA_ERR = 3.2
MAX_PRIME_BITS = 62


def _is_prime(n: int) -> bool:
    from sympy import isprime

    return bool(isprime(n))


def generate_primes(degree: int, bit_sizes, exclude=()) -> list[int]:
    """Scan downward from 2**bits for distinct primes congruent to 1 mod 2N."""
    used = set(exclude)
    out = []
    step = 2 * degree
    for bits in bit_sizes:
        if bits > MAX_PRIME_BITS:
            raise ParameterError(f"prime size {bits} exceeds {MAX_PRIME_BITS} bits")
        cand = (1 << bits) + 1 - step
        while True:
            if cand < step:
                raise ParameterError(f"no {bits}-bit prime = 1 mod {step} available")
            if cand not in used and _is_prime(cand):
                break
            cand -= step
        used.add(cand)
        out.append(cand)
    return out


def _primitive_root_2n(p: int, degree: int) -> int:
    exp = (p - 1) // (2 * degree)
    for x in range(2, p):
        g = pow(x, exp, p)
        if pow(g, degree, p) == p - 1:
            return g
    raise ParameterError(f"no primitive {2 * degree}-th root of unity mod {p}")


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _shoup(values: list[int], p: int) -> list[int]:
    return [(w << 64) // p for w in values]


class RingParams:
    """Ring degree plus prime chain with all per-prime precomputed tables.

    Immutable after construction: the numpy tables are flagged read-only.
    """

    def __init__(self, degree: int, primes):
        primes = [int(p) for p in primes]
        if degree < 2 or degree & (degree - 1):
            raise ParameterError(f"degree must be a power of two, got {degree}")
        if len(primes) < 2:
            raise ParameterError("prime chain needs at least 2 primes")
        if len(set(primes)) != len(primes):
            raise ParameterError("chain primes must be pairwise distinct")
        for p in primes:
            if p % (2 * degree) != 1:
                raise ParameterError(f"{p} is not 1 mod {2 * degree}")
            if p >= 1 << MAX_PRIME_BITS:
                raise ParameterError(f"{p} is not below 2**{MAX_PRIME_BITS}")
            if not _is_prime(p):
                raise ParameterError(f"{p} is not prime")

        self.degree = degree
        self.primes = tuple(primes)
        n = degree
        rev = _bit_reverse(n)
        self.bit_reverse = rev

        moduli = np.array(primes, dtype=np.uint64)
        ratio = [(1 << 128) // p for p in primes]
        r0 = np.array([r & (2**64 - 1) for r in ratio], dtype=np.uint64)
        r1 = np.array([r >> 64 for r in ratio], dtype=np.uint64)

        psi = np.empty((len(primes), n), dtype=np.uint64)
        psi_sh = np.empty_like(psi)
        ipsi = np.empty_like(psi)
        ipsi_sh = np.empty_like(psi)
        ninv = np.empty(len(primes), dtype=np.uint64)
        ninv_sh = np.empty(len(primes), dtype=np.uint64)
        self.roots = []
        for k, p in enumerate(primes):
            root = _primitive_root_2n(p, n)
            self.roots.append(root)
            iroot = pow(root, -1, p)
            pw = [1] * n
            ipw = [1] * n
            for i in range(1, n):
                pw[i] = pw[i - 1] * root % p
                ipw[i] = ipw[i - 1] * iroot % p
            fwd = [pw[r] for r in rev]
            inv = [ipw[r] for r in rev]
            psi[k] = fwd
            psi_sh[k] = _shoup(fwd, p)
            ipsi[k] = inv
            ipsi_sh[k] = _shoup(inv, p)
            ni = pow(n, -1, p)
            ninv[k] = ni
            ninv_sh[k] = (ni << 64) // p

        for arr in (moduli, r0, r1, psi, psi_sh, ipsi, ipsi_sh, ninv, ninv_sh, rev):
            arr.setflags(write=False)
        self.moduli = moduli
        self.barrett_lo = r0
        self.barrett_hi = r1
        self._psi = psi
        self._psi_shoup = psi_sh
        self._ipsi = ipsi
        self._ipsi_shoup = ipsi_sh
        self._ninv = ninv
        self._ninv_shoup = ninv_sh

        # Evaluation point of NTT output slot k is psi**(2*rev(k) + 1).
        exps = 2 * rev + 1
        pos = np.empty(2 * n, dtype=np.int64)
        pos[exps] = np.arange(n)
        self._eval_exponent = exps
        self._exponent_pos = pos

    @property
    def slots(self) -> int:
        return self.degree // 2

    @property
    def max_level(self) -> int:
        return len(self.primes) - 1

    def pidx(self, level: int) -> np.ndarray:
        return np.arange(level + 1, dtype=np.int64)

    def modulus(self, level: int) -> int:
        return math.prod(self.primes[: level + 1])

    def __repr__(self):
        bits = [p.bit_length() for p in self.primes]
        return f"RingParams(N={self.degree}, bits={bits})"

    # -- raw row kernels (used by ckks for non-standard bases) ----------------

    def ntt_rows(self, data: np.ndarray, pidx: np.ndarray) -> None:
        K.ntt_forward(data, pidx, self.moduli, self._psi, self._psi_shoup)

    def intt_rows(self, data: np.ndarray, pidx: np.ndarray) -> None:
        K.ntt_inverse(data, pidx, self.moduli, self._ipsi, self._ipsi_shoup,
                      self._ninv, self._ninv_shoup)

    def mul_rows(self, a, b, pidx):
        return K.mul(a, b, pidx, self.moduli, self.barrett_lo, self.barrett_hi)

    def mul_scalar_rows(self, a, scalars, pidx):
        return K.mul_scalar(a, np.asarray(scalars, dtype=np.uint64), pidx,
                            self.moduli, self.barrett_lo, self.barrett_hi)

    def add_rows(self, a, b, pidx):
        return K.add(a, b, pidx, self.moduli)

    def sub_rows(self, a, b, pidx):
        return K.sub(a, b, pidx, self.moduli)

    def neg_rows(self, a, pidx):
        return K.neg(a, pidx, self.moduli)

    def reduce_signed(self, coeffs: np.ndarray, pidx: np.ndarray) -> np.ndarray:
        return K.reduce_signed(np.ascontiguousarray(coeffs, dtype=np.int64), pidx, self.moduli)

    @functools.lru_cache(maxsize=None)
    def galois_perm(self, g: int) -> np.ndarray:
        """Index map realizing X -> X**g on evaluation-domain rows."""
        n2 = 2 * self.degree
        if g % 2 == 0:
            raise UsageError(f"Galois element must be odd, got {g}")
        target = (self._eval_exponent * (g % n2)) % n2
        perm = self._exponent_pos[target]
        perm.setflags(write=False)
        return perm

    @functools.lru_cache(maxsize=None)
    def _coeff_automorphism_map(self, g: int):
        n = self.degree
        idx = (np.arange(n, dtype=np.int64) * (g % (2 * n))) % (2 * n)
        flip = idx >= n
        idx = np.where(flip, idx - n, idx)
        return idx, flip


@dataclass(frozen=True, eq=False)
class RingElement:
    params: RingParams
    data: np.ndarray
    is_ntt: bool = False

    def __post_init__(self):
        d = self.data
        if d.ndim != 2 or d.shape[1] != self.params.degree or d.dtype != np.uint64:
            raise UsageError(f"bad residue matrix shape/dtype {d.shape} {d.dtype}")
        if d.shape[0] > len(self.params.primes):
            raise UsageError("more residue rows than chain primes")

    @property
    def level(self) -> int:
        return self.data.shape[0] - 1

    def __eq__(self, other):
        if not isinstance(other, RingElement):
            return NotImplemented
        return (self.params is other.params and self.is_ntt == other.is_ntt
                and np.array_equal(self.data, other.data))

    def __add__(self, other):
        return ring_add(self, other)

    def __sub__(self, other):
        return ring_sub(self, other)

    def __mul__(self, other):
        return ring_mul(self, other)

    def __neg__(self):
        return ring_neg(self)


def _check_pair(a: RingElement, b: RingElement):
    if a.params is not b.params:
        raise UsageError("ring elements belong to different parameter sets")
    if a.level != b.level:
        raise UsageError(f"level mismatch: {a.level} vs {b.level}")
    if a.is_ntt != b.is_ntt:
        raise RepresentationError("operands are in different domains")


def zero(params: RingParams, level: int, is_ntt: bool = False) -> RingElement:
    return RingElement(params, np.zeros((level + 1, params.degree), dtype=np.uint64), is_ntt)


def from_integers(params: RingParams, coeffs, level: int | None = None) -> RingElement:
    """Coefficient-domain element from small signed integer coefficients."""
    level = params.max_level if level is None else level
    c = np.zeros(params.degree, dtype=np.int64)
    coeffs = np.asarray(coeffs, dtype=np.int64)
    c[: coeffs.shape[0]] = coeffs
    return RingElement(params, params.reduce_signed(c, params.pidx(level)), False)


def to_integers(e: RingElement) -> list[int]:
    """CRT-lift coefficients to centered integers modulo the active modulus."""
    if e.is_ntt:
        e = ntt_inverse(e)
    return crt_lift(e.params, e.data)


def crt_lift(params: RingParams, rows: np.ndarray) -> list[int]:
    k = rows.shape[0]
    primes = params.primes[:k]
    if k == 1:
        p = primes[0]
        return [x - p if x > p // 2 else x for x in rows[0].tolist()]
    big = math.prod(primes)
    acc = np.zeros(rows.shape[1], dtype=object)
    for i, p in enumerate(primes):
        qi = big // p
        coef = qi * pow(qi, -1, p)
        acc = acc + rows[i].astype(object) * coef
    half = big // 2
    return [x - big if x > half else x for x in (acc % big).tolist()]


def ntt_forward(e: RingElement) -> RingElement:
    if e.is_ntt:
        raise RepresentationError("element is already in the evaluation domain")
    out = e.data.copy()
    e.params.ntt_rows(out, e.params.pidx(e.level))
    return RingElement(e.params, out, True)


def ntt_inverse(e: RingElement) -> RingElement:
    if not e.is_ntt:
        raise RepresentationError("element is already in the coefficient domain")
    out = e.data.copy()
    e.params.intt_rows(out, e.params.pidx(e.level))
    return RingElement(e.params, out, False)


def ring_add(a: RingElement, b: RingElement) -> RingElement:
    _check_pair(a, b)
    return RingElement(a.params, a.params.add_rows(a.data, b.data, a.params.pidx(a.level)), a.is_ntt)


def ring_sub(a: RingElement, b: RingElement) -> RingElement:
    _check_pair(a, b)
    return RingElement(a.params, a.params.sub_rows(a.data, b.data, a.params.pidx(a.level)), a.is_ntt)


def ring_neg(a: RingElement) -> RingElement:
    return RingElement(a.params, a.params.neg_rows(a.data, a.params.pidx(a.level)), a.is_ntt)


def ring_mul(a: RingElement, b: RingElement) -> RingElement:
    _check_pair(a, b)
    if not a.is_ntt:
        raise RepresentationError("ring_mul requires evaluation-domain operands")
    return RingElement(a.params, a.params.mul_rows(a.data, b.data, a.params.pidx(a.level)), True)


def drop_level(e: RingElement, target: int) -> RingElement:
    """Discard residues above ``target``; remaining residues are unchanged."""
    if target > e.level or target < 0:
        raise UsageError(f"cannot drop from level {e.level} to {target}")
    return RingElement(e.params, e.data[: target + 1].copy(), e.is_ntt)


def apply_automorphism(e: RingElement, g: int) -> RingElement:
    """X -> X**g for odd g, in either domain."""
    params = e.params
    if g % 2 == 0:
        raise UsageError(f"automorphism index must be odd, got {g}")
    if e.is_ntt:
        return RingElement(params, np.ascontiguousarray(e.data[:, params.galois_perm(g)]), True)
    idx, flip = params._coeff_automorphism_map(g)
    pidx = params.pidx(e.level)
    negated = params.neg_rows(e.data, pidx)
    src = np.where(flip[None, :], negated, e.data)
    out = np.empty_like(e.data)
    out[:, idx] = src
    return RingElement(params, out, False)


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_uniform(params: RingParams, level: int, rng) -> RingElement:
    """Uniform residues under each active prime (already evaluation-domain uniform)."""
    rng = _rng(rng)
    rows = np.empty((level + 1, params.degree), dtype=np.uint64)
    for i in range(level + 1):
        rows[i] = rng.integers(0, params.primes[i], size=params.degree, dtype=np.uint64)
    return RingElement(params, rows, True)


def ternary_coefficients(params: RingParams, rng) -> np.ndarray:
    return _rng(rng).integers(-1, 2, size=params.degree, dtype=np.int64)


def sample_ternary(params: RingParams, rng, level: int | None = None) -> RingElement:
    return from_integers(params, ternary_coefficients(params, rng), level)


@functools.lru_cache(maxsize=8)
def _gaussian_table(sigma: float):
    bound = int(math.ceil(10 * sigma))
    support = np.arange(-bound, bound + 1)
    weights = np.exp(-(support.astype(float) ** 2) / (2 * sigma * sigma))
    return support, weights / weights.sum()


def gaussian_coefficients(params: RingParams, rng, sigma: float = SIGMA_ERR, size=None) -> np.ndarray:
    support, probs = _gaussian_table(sigma)
    return _rng(rng).choice(support, size=size or params.degree, p=probs).astype(np.int64)


def sample_error(params: RingParams, level: int, rng, sigma: float = SIGMA_ERR) -> RingElement:
    """Centered discrete Gaussian coefficients, reduced under each active prime."""
    return from_integers(params, gaussian_coefficients(params, rng, sigma), level)
