"""Local files: key directories and weight containers.

A key directory holds ``secret.key``, ``public.key``, ``relin.key``,
``galois.key`` and a ``keys.meta`` text file (key=value lines). The secret key
format ``CTLS`` exists only here, for the client's own disk; no frame type can
carry it.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ckks
from .ckks import CkksParams, GaloisKeySet, PublicKey, RelinKey, SecretKey
from .errors import CodecError, DataError, UsageError
from .he_layers import EvalKeys, FrozenWeights, PackingPlan, plan_packing, plan_rotations
from .nn.model import ModelSpec, ModelState, check_state, client_spec, server_spec
from .protocol import codec

KEY_FILES = ("secret.key", "public.key", "relin.key", "galois.key", "keys.meta")


# --------------------------------------------------------------------------- key=value text

def write_kv(path, values: dict):
    lines = [f"{k}={v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------- secret key (local only)

def _secret_bytes(sk: SecretKey) -> bytes:
    params = sk.params
    row = sk.data[:1].copy()
    params.ring.intt_rows(row, np.zeros(1, dtype=np.int64))
    q = np.uint64(params.primes[0])
    coeffs = np.where(row[0] > q // np.uint64(2), -((q - row[0]).astype(np.int64)), row[0].astype(np.int64))
    return codec._key_header(b"CTLS", params) + coeffs.astype(np.int8).tobytes()


def _secret_from_bytes(buf: bytes, params: CkksParams) -> SecretKey:
    r = codec._Reader(buf, "secret key")
    codec._read_key_header(r, b"CTLS", params)
    if r.remaining() != params.degree:
        raise CodecError("secret key: wrong body length")
    coeffs = np.frombuffer(r.take(params.degree), dtype=np.int8).astype(np.int64)
    if np.any(np.abs(coeffs) > 1):
        raise CodecError("secret key: coefficients must be ternary")
    pidx = np.arange(len(params.primes), dtype=np.int64)
    data = params.ring.reduce_signed(coeffs, pidx)
    params.ring.ntt_rows(data, pidx)
    data.setflags(write=False)
    return SecretKey(params, data)


# --------------------------------------------------------------------------- key directory

@dataclass
class KeyBundle:
    params: CkksParams
    plan: PackingPlan
    secret: SecretKey
    public: PublicKey
    relin: RelinKey
    galois: GaloisKeySet

    @property
    def eval_keys(self) -> EvalKeys:
        return EvalKeys(self.relin, self.galois)


def generate_keys(params: CkksParams, width: int, seed: int) -> KeyBundle:
    plan = plan_packing(params, width)
    rng = np.random.default_rng(seed)
    sk, pk, rk = ckks.keygen(params, rng)
    gks = ckks.gen_galois_keys(sk, plan_rotations(plan), rng)
    return KeyBundle(params, plan, sk, pk, rk, gks)


def save_keys(bundle: KeyBundle, out_dir, force: bool = False) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    existing = [f for f in KEY_FILES if (out / f).exists()]
    if existing and not force:
        raise UsageError(f"{out} already holds {', '.join(existing)}; pass --force to overwrite")
    p = bundle.params
    blobs = {
        "secret.key": _secret_bytes(bundle.secret),
        "public.key": codec.serialize_public_key(bundle.public),
        "relin.key": codec.serialize_relin_key(bundle.relin),
        "galois.key": codec.serialize_galois_keys(bundle.galois),
    }
    for name, blob in blobs.items():
        tmp = out / (name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, out / name)
    os.chmod(out / "secret.key", 0o600)
    write_kv(out / "keys.meta", {"preset": p.name, "label": p.label, "insecure": str(p.insecure).lower(),
                                 "fingerprint": p.fingerprint.hex(), "width": bundle.plan.t,
                                 "galois_steps": len(bundle.galois.keys)})
    return [str(out / f) for f in KEY_FILES]


def load_params_from_meta(key_dir) -> tuple:
    meta_path = Path(key_dir) / "keys.meta"
    if not meta_path.exists():
        raise DataError(f"{key_dir} is not a key directory (keys.meta missing)")
    meta = read_kv(meta_path)
    params = ckks.get_preset(meta.get("preset", ""))
    if params.fingerprint.hex() != meta.get("fingerprint"):
        raise DataError("keys.meta fingerprint does not match its preset")
    try:
        width = int(meta["width"])
    except (KeyError, ValueError):
        raise DataError("keys.meta lacks a valid width") from None
    return params, plan_packing(params, width), meta


def load_keys(key_dir, with_galois: bool = True) -> KeyBundle:
    d = Path(key_dir)
    params, plan, _ = load_params_from_meta(d)
    try:
        sk = _secret_from_bytes((d / "secret.key").read_bytes(), params)
        pk = codec.deserialize_public_key((d / "public.key").read_bytes(), params)
        rk = codec.deserialize_relin_key((d / "relin.key").read_bytes(), params)
        gks = codec.deserialize_galois_keys((d / "galois.key").read_bytes(), params) \
            if with_galois else GaloisKeySet(params, {})
    except FileNotFoundError as exc:
        raise DataError(f"missing key file: {exc.filename}") from None
    return KeyBundle(params, plan, sk, pk, rk, gks)


def eval_key_bytes(key_dir) -> bytes:
    """EVALKEYS payload assembled from the stored relin and Galois key files."""
    d = Path(key_dir)
    rk = (d / "relin.key").read_bytes()
    return b"CTLK" + struct.pack("<HQ", codec.VERSION, len(rk)) + rk + (d / "galois.key").read_bytes()


# --------------------------------------------------------------------------- weights

def state_to_tensors(state: ModelState, kind: str) -> dict:
    out = {"model.kind": np.array([0.0 if kind == "server" else 1.0])}
    for i, p in enumerate(state.params):
        for k, v in p.items():
            out[f"layer{i}.{k}"] = v
    return out


def state_from_tensors(t: dict) -> tuple:
    if "model.kind" not in t:
        raise DataError("weights file does not hold a model")
    kind = "server" if t["model.kind"].ravel()[0] == 0.0 else "client"
    try:
        width = t["layer1.W"].shape[1] if kind == "server" else t["layer0.W"].shape[1]
    except KeyError:
        raise DataError("weights file is missing layer tensors") from None
    spec = server_spec(width) if kind == "server" else client_spec(width)
    params = []
    for i, layer in enumerate(spec.layers):
        names = {"dense": ("W", "b"), "conv1d": ("w", "b")}.get(layer.kind, ())
        params.append({k: np.array(t.get(f"layer{i}.{k}")) for k in names})
    state = ModelState(params)
    try:
        check_state(state, spec)
    except DataError:
        raise
    except Exception as exc:  # shape errors from missing tensors
        raise DataError(f"weights do not match the model: {exc}") from None
    return kind, spec, state


def save_model(path, state: ModelState, kind: str):
    Path(path).write_bytes(codec.serialize_tensors(state_to_tensors(state, kind)))


def load_model(path) -> tuple:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    try:
        tensors = codec.deserialize_tensors(blob)
    except CodecError as exc:
        raise DataError(f"{path}: {exc}") from None
    return state_from_tensors(tensors)


def save_frozen(path, weights: FrozenWeights):
    Path(path).write_bytes(codec.serialize_frozen_weights(weights))


def load_frozen(path) -> FrozenWeights:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    try:
        return codec.deserialize_frozen_weights(blob)
    except CodecError as exc:
        raise DataError(f"{path}: {exc}") from None


__all__ = ["KeyBundle", "generate_keys", "save_keys", "load_keys", "load_params_from_meta",
           "eval_key_bytes", "save_model", "load_model", "save_frozen", "load_frozen",
           "read_kv", "write_kv", "ModelSpec"]
