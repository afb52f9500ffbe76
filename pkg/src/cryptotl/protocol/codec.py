"""Binary codecs for ciphertexts, evaluation keys and weight files.

Bodies are little-endian. Every key or ciphertext container starts with a
4-byte magic, a u16 format version and the 32-byte parameter fingerprint;
decoders check those and the total length implied by the header before they
touch the bulk data. There is deliberately no codec for secret keys here.

Layouts::

    CTLC  magic | u16 ver | fp[32] | u8 level | f64 log2 scale | u8 count | u64 residues
    CTLP  header | b, a: (L+1) x N u64 each
    CTLR  header | seed[32] | b: (L+1) x (L+2) x N u64
    CTLG  header | u16 steps | per step: i32 step | seed[32] | b
    CTLK  magic | u16 ver | u64 len | CTLR bytes | CTLG bytes
    CTLW  magic | u16 ver | u16 tensors | per tensor: u8 name len | name | u8 ndim
          | u32 dims | f64 data

``header`` is ``magic | u16 ver | fp[32] | u8 label len | label`` where the
label is the preset name (``TOY-INSECURE`` for insecure parameters).
"""

from __future__ import annotations

import math
import struct

import numpy as np

from ..ckks import (Ciphertext, CkksParams, GaloisKeySet, KeySwitchKey, PublicKey, RelinKey,
                    expand_uniform)
from ..errors import CodecError, FingerprintMismatchError
from ..he_layers import EvalKeys, FrozenWeights

VERSION = 1
MAX_TENSORS = 4096
MAX_TENSOR_ELEMENTS = 1 << 28

_CT_HEAD = struct.Struct("<4sH32sBdB")


class _Reader:
    def __init__(self, buf, what: str):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise CodecError(f"{self.what}: truncated input")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s))

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def finish(self):
        if self.remaining():
            raise CodecError(f"{self.what}: {self.remaining()} trailing bytes")


def _check_magic(r: _Reader, magic: bytes):
    got = bytes(r.take(4))
    if got != magic:
        raise CodecError(f"{r.what}: bad magic {got!r}")
    (ver,) = r.unpack("<H")
    if ver != VERSION:
        raise CodecError(f"{r.what}: unsupported version {ver}")


def _check_fp(params: CkksParams, fp: bytes):
    if fp != params.fingerprint:
        raise FingerprintMismatchError("serialized object belongs to different parameters")


def _residues(r: _Reader, params: CkksParams, shape: tuple) -> np.ndarray:
    n = int(np.prod(shape))
    raw = np.frombuffer(r.take(8 * n), dtype="<u8").astype(np.uint64).reshape(shape)
    # canonicalize: corrupted residues still parse but stay valid ring elements
    rows = shape[-2]
    mod = params.ring.moduli[:rows] if rows <= len(params.primes) else None
    if mod is None:
        raise CodecError("residue matrix has more rows than the chain")
    return raw % mod[:, None]


def _key_header(magic: bytes, params: CkksParams) -> bytes:
    label = params.label.encode("ascii")
    return magic + struct.pack("<H", VERSION) + params.fingerprint + struct.pack("<B", len(label)) + label


def _read_key_header(r: _Reader, magic: bytes, params: CkksParams) -> str:
    _check_magic(r, magic)
    fp = bytes(r.take(32))
    _check_fp(params, fp)
    (n,) = r.unpack("<B")
    return bytes(r.take(n)).decode("ascii", errors="replace")


def read_label(buf) -> str:
    """Preset label stored in a key file header, without decoding the body."""
    r = _Reader(buf, "key header")
    r.take(4)
    r.unpack("<H")
    r.take(32)
    (n,) = r.unpack("<B")
    return bytes(r.take(n)).decode("ascii", errors="replace")


def read_fingerprint(buf) -> bytes:
    r = _Reader(buf, "header")
    r.take(6)
    return bytes(r.take(32))


# --------------------------------------------------------------------------- ciphertext

def ciphertext_size(params: CkksParams, level: int, count: int = 2) -> int:
    return _CT_HEAD.size + 8 * count * (level + 1) * params.degree


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    head = _CT_HEAD.pack(b"CTLC", VERSION, ct.params.fingerprint, ct.level, float(ct.log_scale), ct.size)
    return head + np.ascontiguousarray(ct.data, dtype="<u8").tobytes()


def deserialize_ciphertext(buf, params: CkksParams) -> Ciphertext:
    r = _Reader(buf, "ciphertext")
    if r.remaining() < _CT_HEAD.size:
        raise CodecError("ciphertext: truncated header")
    magic, ver, fp, level, log_scale, count = _CT_HEAD.unpack(r.take(_CT_HEAD.size))
    if magic != b"CTLC":
        raise CodecError(f"ciphertext: bad magic {magic!r}")
    if ver != VERSION:
        raise CodecError(f"ciphertext: unsupported version {ver}")
    _check_fp(params, fp)
    if level > params.max_level:
        raise CodecError(f"ciphertext: level {level} above {params.max_level}")
    if count not in (2, 3):
        raise CodecError(f"ciphertext: component count {count}")
    if not math.isfinite(log_scale) or not 0 < log_scale < 4096:
        raise CodecError("ciphertext: invalid scale")
    need = 8 * count * (level + 1) * params.degree
    if r.remaining() != need:
        raise CodecError(f"ciphertext: expected {need} residue bytes, got {r.remaining()}")
    data = _residues(r, params, (count, level + 1, params.degree))
    return Ciphertext(params, data, log_scale)


# --------------------------------------------------------------------------- keys

def serialize_public_key(pk: PublicKey) -> bytes:
    return _key_header(b"CTLP", pk.params) + np.ascontiguousarray(np.stack([pk.b, pk.a]), "<u8").tobytes()


def deserialize_public_key(buf, params: CkksParams) -> PublicKey:
    r = _Reader(buf, "public key")
    _read_key_header(r, b"CTLP", params)
    rows = params.max_level + 1
    if r.remaining() != 16 * rows * params.degree:
        raise CodecError("public key: wrong body length")
    ba = _residues(r, params, (2, rows, params.degree))
    return PublicKey(params, ba[0], ba[1])


def _switch_key_body(key: KeySwitchKey) -> bytes:
    return key.seed + np.ascontiguousarray(key.b, "<u8").tobytes()


def _switch_key_size(params: CkksParams) -> int:
    d = params.max_level + 1
    return 32 + 8 * d * len(params.primes) * params.degree


def _read_switch_key(r: _Reader, params: CkksParams) -> KeySwitchKey:
    seed = bytes(r.take(32))
    d = params.max_level + 1
    b = _residues(r, params, (d, len(params.primes), params.degree))
    a = expand_uniform(params, seed, d)
    b.setflags(write=False)
    a.setflags(write=False)
    return KeySwitchKey(params, b, a, seed)


def serialize_relin_key(rk: RelinKey) -> bytes:
    return _key_header(b"CTLR", rk.params) + _switch_key_body(rk.key)


def deserialize_relin_key(buf, params: CkksParams) -> RelinKey:
    r = _Reader(buf, "relin key")
    _read_key_header(r, b"CTLR", params)
    if r.remaining() != _switch_key_size(params):
        raise CodecError("relin key: wrong body length")
    key = _read_switch_key(r, params)
    return RelinKey(params, key)


def serialize_galois_keys(gks: GaloisKeySet) -> bytes:
    parts = [_key_header(b"CTLG", gks.params), struct.pack("<H", len(gks.keys))]
    for step in sorted(gks.keys):
        parts.append(struct.pack("<i", step))
        parts.append(_switch_key_body(gks.keys[step]))
    return b"".join(parts)


def deserialize_galois_keys(buf, params: CkksParams) -> GaloisKeySet:
    r = _Reader(buf, "galois keys")
    _read_key_header(r, b"CTLG", params)
    (count,) = r.unpack("<H")
    if r.remaining() != count * (4 + _switch_key_size(params)):
        raise CodecError("galois keys: wrong body length")
    keys = {}
    for _ in range(count):
        (step,) = r.unpack("<i")
        if step == 0 or abs(step) >= params.slots or step in keys:
            raise CodecError(f"galois keys: invalid or repeated step {step}")
        keys[step] = _read_switch_key(r, params)
    return GaloisKeySet(params, keys)


def serialize_eval_keys(keys: EvalKeys) -> bytes:
    rk = serialize_relin_key(keys.relin)
    return b"CTLK" + struct.pack("<HQ", VERSION, len(rk)) + rk + serialize_galois_keys(keys.galois)


def deserialize_eval_keys(buf, params: CkksParams) -> EvalKeys:
    r = _Reader(buf, "eval keys")
    _check_magic(r, b"CTLK")
    (n,) = r.unpack("<Q")
    if n > r.remaining():
        raise CodecError("eval keys: truncated input")
    rk = deserialize_relin_key(r.take(n), params)
    gks = deserialize_galois_keys(r.take(r.remaining()), params)
    return EvalKeys(rk, gks)


# --------------------------------------------------------------------------- tensors / weights

def serialize_tensors(tensors: dict) -> bytes:
    if len(tensors) > MAX_TENSORS:
        raise CodecError("too many tensors")
    parts = [b"CTLW", struct.pack("<HH", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        if not 0 < len(key) < 256 or arr.ndim > 8:
            raise CodecError(f"cannot encode tensor {name!r}")
        parts.append(struct.pack("<B", len(key)) + key + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def deserialize_tensors(buf) -> dict:
    r = _Reader(buf, "weights")
    _check_magic(r, b"CTLW")
    (count,) = r.unpack("<H")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<B")
        try:
            name = bytes(r.take(n)).decode("utf-8")
        except UnicodeDecodeError:
            raise CodecError("weights: tensor name is not utf-8") from None
        if not name or name in out:
            raise CodecError(f"weights: empty or repeated tensor name {name!r}")
        (ndim,) = r.unpack("<B")
        if ndim > 8:
            raise CodecError("weights: too many dimensions")
        shape = r.unpack(f"<{ndim}I")
        size = math.prod(shape)
        if size > MAX_TENSOR_ELEMENTS or 8 * size > r.remaining():
            raise CodecError(f"weights: tensor {name!r} exceeds the remaining input")
        out[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    r.finish()
    return out


_FROZEN_NAMES = ("conv.w", "conv.b", "dense1.W", "dense1.b", "dense2.W", "dense2.b",
                 "relu.coeffs", "pool.size")


def frozen_to_tensors(w: FrozenWeights) -> dict:
    return {"conv.w": w.conv_w, "conv.b": np.array([w.conv_b]), "dense1.W": w.w1,
            "dense1.b": w.b1, "dense2.W": w.w2, "dense2.b": w.b2,
            "relu.coeffs": np.array(w.relu_coeffs, dtype=np.float64),
            "pool.size": np.array([float(w.pool)])}


def frozen_from_tensors(t: dict) -> FrozenWeights:
    if set(t) != set(_FROZEN_NAMES):
        raise CodecError("weights file does not hold a frozen prefix")
    try:
        return FrozenWeights(conv_w=t["conv.w"], conv_b=float(t["conv.b"].ravel()[0]),
                             w1=t["dense1.W"], b1=t["dense1.b"], w2=t["dense2.W"], b2=t["dense2.b"],
                             relu_coeffs=tuple(float(c) for c in t["relu.coeffs"].ravel()),
                             pool=int(t["pool.size"].ravel()[0]))
    except (IndexError, ValueError) as exc:
        raise CodecError(f"weights: {exc}") from None


def serialize_frozen_weights(w: FrozenWeights) -> bytes:
    return serialize_tensors(frozen_to_tensors(w))


def deserialize_frozen_weights(buf) -> FrozenWeights:
    return frozen_from_tensors(deserialize_tensors(buf))
