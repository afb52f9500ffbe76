"""Compiled residue arithmetic.

All arrays hold unsigned 64-bit residues. Every prime is below 2**62, which keeps
sums of two residues below 2**63 and lets Barrett reduction of a 128-bit product
finish with a single conditional subtraction. ``pidx`` arrays map each row of a
2-D operand to the prime it lives under (an index into the ring's modulus table).

Mixing ``uint64`` with Python int literals makes numba promote to float64, so
every constant used below is an explicit ``np.uint64``.
"""

import numpy as np
from numba import njit

_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_ONE = np.uint64(1)
_ZERO = np.uint64(0)


@njit(inline="always", cache=True)
def mulhi(a, b):
    a_lo = a & _M32
    a_hi = a >> _S32
    b_lo = b & _M32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _S32) + (p1 & _M32) + (p2 & _M32)
    return p3 + (p1 >> _S32) + (p2 >> _S32) + (mid >> _S32)


@njit(inline="always", cache=True)
def mulmod(a, b, p, r0, r1):
    # Barrett reduction of the 128-bit product with ratio floor(2**128 / p) = r1:r0.
    lo = a * b
    hi = mulhi(a, b)
    carry = mulhi(lo, r0)
    t_lo = lo * r1
    t_hi = mulhi(lo, r1)
    tmp1 = t_lo + carry
    tmp3 = t_hi + (_ONE if tmp1 < t_lo else _ZERO)
    t_lo = hi * r0
    t_hi = mulhi(hi, r0)
    tmp1b = tmp1 + t_lo
    carry = t_hi + (_ONE if tmp1b < tmp1 else _ZERO)
    q = hi * r1 + tmp3 + carry
    r = lo - q * p
    if r >= p:
        r -= p
    return r


@njit(inline="always", cache=True)
def mulmod_shoup(x, w, w_shoup, p):
    q = mulhi(x, w_shoup)
    r = x * w - q * p
    if r >= p:
        r -= p
    return r


@njit(inline="always", cache=True)
def addmod(a, b, p):
    s = a + b
    if s >= p:
        s -= p
    return s


@njit(inline="always", cache=True)
def submod(a, b, p):
    if a >= b:
        return a - b
    return a + p - b


@njit(cache=True)
def ntt_forward(data, pidx, moduli, psi, psi_shoup):
    """In-place negacyclic forward NTT of each row; natural in, bit-reversed out."""
    rows, n = data.shape
    for r in range(rows):
        k = pidx[r]
        p = moduli[k]
        a = data[r]
        t = n
        m = 1
        while m < n:
            t >>= 1
            for i in range(m):
                j1 = 2 * i * t
                w = psi[k, m + i]
                ws = psi_shoup[k, m + i]
                for j in range(j1, j1 + t):
                    u = a[j]
                    v = mulmod_shoup(a[j + t], w, ws, p)
                    a[j] = addmod(u, v, p)
                    a[j + t] = submod(u, v, p)
            m <<= 1


@njit(cache=True)
def ntt_inverse(data, pidx, moduli, ipsi, ipsi_shoup, ninv, ninv_shoup):
    """In-place inverse of :func:`ntt_forward`."""
    rows, n = data.shape
    for r in range(rows):
        k = pidx[r]
        p = moduli[k]
        a = data[r]
        t = 1
        m = n
        while m > 1:
            j1 = 0
            h = m >> 1
            for i in range(h):
                w = ipsi[k, h + i]
                ws = ipsi_shoup[k, h + i]
                for j in range(j1, j1 + t):
                    u = a[j]
                    v = a[j + t]
                    a[j] = addmod(u, v, p)
                    a[j + t] = mulmod_shoup(submod(u, v, p), w, ws, p)
                j1 += 2 * t
            t <<= 1
            m = h
        w = ninv[k]
        ws = ninv_shoup[k]
        for j in range(n):
            a[j] = mulmod_shoup(a[j], w, ws, p)


@njit(cache=True)
def mul(a, b, pidx, moduli, r0, r1):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        k = pidx[r]
        p = moduli[k]
        c0 = r0[k]
        c1 = r1[k]
        for j in range(n):
            out[r, j] = mulmod(a[r, j], b[r, j], p, c0, c1)
    return out


@njit(cache=True)
def mul_scalar(a, s, pidx, moduli, r0, r1):
    """Multiply row ``r`` by the residue ``s[r]``."""
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        k = pidx[r]
        p = moduli[k]
        c0 = r0[k]
        c1 = r1[k]
        x = s[r]
        for j in range(n):
            out[r, j] = mulmod(a[r, j], x, p, c0, c1)
    return out


@njit(cache=True)
def add(a, b, pidx, moduli):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = moduli[pidx[r]]
        for j in range(n):
            out[r, j] = addmod(a[r, j], b[r, j], p)
    return out


@njit(cache=True)
def sub(a, b, pidx, moduli):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = moduli[pidx[r]]
        for j in range(n):
            out[r, j] = submod(a[r, j], b[r, j], p)
    return out


@njit(cache=True)
def neg(a, pidx, moduli):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = moduli[pidx[r]]
        for j in range(n):
            x = a[r, j]
            out[r, j] = p - x if x != _ZERO else _ZERO
    return out


@njit(cache=True)
def reduce_signed(x, pidx, moduli):
    """Residues of the signed integers ``x`` under each prime in ``pidx``."""
    n = x.shape[0]
    out = np.empty((pidx.shape[0], n), dtype=np.uint64)
    for r in range(pidx.shape[0]):
        p = np.int64(moduli[pidx[r]])
        for j in range(n):
            out[r, j] = np.uint64(x[j] % p)
    return out


@njit(cache=True)
def center_lift(v, big, pidx, moduli):
    """Map residues ``v`` modulo ``big`` to centered integers, reduced by each prime."""
    n = v.shape[0]
    half = big >> _ONE
    out = np.empty((pidx.shape[0], n), dtype=np.uint64)
    for r in range(pidx.shape[0]):
        p = moduli[pidx[r]]
        big_mod = big % p
        for j in range(n):
            x = v[j]
            if x > half:
                # x - big, represented as (x mod p) - (big mod p)
                out[r, j] = submod(x % p, big_mod, p)
            else:
                out[r, j] = x % p
    return out


@njit(cache=True)
def mac_plain(pts, cts, pidx, moduli, r0, r1):
    """sum_t pts[t] * cts[t, c] for each ciphertext component c."""
    terms, comps, rows, n = cts.shape
    out = np.zeros((comps, rows, n), dtype=np.uint64)
    for c in range(comps):
        for r in range(rows):
            k = pidx[r]
            p = moduli[k]
            c0 = r0[k]
            c1 = r1[k]
            acc = out[c, r]
            for t in range(terms):
                pt = pts[t, r]
                ct = cts[t, c, r]
                for j in range(n):
                    acc[j] = addmod(acc[j], mulmod(pt[j], ct[j], p, c0, c1), p)
    return out


@njit(cache=True)
def lift_digits(coef, pidx, moduli):
    """out[i, j] = coef[i] mod (prime pidx[j]); coef rows are digit values."""
    digits, n = coef.shape
    out = np.empty((digits, pidx.shape[0], n), dtype=np.uint64)
    for i in range(digits):
        for r in range(pidx.shape[0]):
            p = moduli[pidx[r]]
            for j in range(n):
                out[i, r, j] = coef[i, j] % p
    return out


@njit(cache=True)
def keyswitch_mac(dig, kb, ka, rowmap, perm, pidx, moduli, r0, r1):
    """Inner product of permuted digits with key-switching key rows.

    ``dig`` has shape (digits, rows, N) in the evaluation domain; digit ``i``
    row ``r`` is paired with key row ``rowmap[r]``. ``perm`` applies a Galois
    automorphism to the digits on the fly (identity for relinearization).
    """
    digits, rows, n = dig.shape
    out = np.zeros((2, rows, n), dtype=np.uint64)
    for r in range(rows):
        k = pidx[r]
        p = moduli[k]
        c0 = r0[k]
        c1 = r1[k]
        kr = rowmap[r]
        acc0 = out[0, r]
        acc1 = out[1, r]
        for i in range(digits):
            d = dig[i, r]
            b = kb[i, kr]
            a = ka[i, kr]
            for j in range(n):
                x = d[perm[j]]
                acc0[j] = addmod(acc0[j], mulmod(x, b[j], p, c0, c1), p)
                acc1[j] = addmod(acc1[j], mulmod(x, a[j], p, c0, c1), p)
    return out
