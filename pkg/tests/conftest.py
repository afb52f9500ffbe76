"""Shared fixtures. Anything at the p1 preset is session-scoped: keygen is the slow part."""

import numpy as np
import pytest

from cryptotl import ckks
from cryptotl.he_layers import EvalKeys, plan_packing, plan_rotations


@pytest.fixture(scope="session")
def toy():
    return ckks.get_preset("toy")


@pytest.fixture(scope="session")
def p1():
    return ckks.get_preset("p1")


@pytest.fixture(scope="session")
def toy_keys(toy):
    """Keys at TOY with rotations for the t=64 circuit plus a few generic steps."""
    sk, pk, rk = ckks.keygen(toy, seed=1)
    plan = plan_packing(toy, 64)
    steps = set(plan_rotations(plan)) | {1, -1, 2, 3, -3, 5}
    gks = ckks.gen_galois_keys(sk, steps, seed=2)
    return sk, pk, rk, gks


@pytest.fixture(scope="session")
def toy_plan(toy):
    return plan_packing(toy, 64)


@pytest.fixture(scope="session")
def toy_eval(toy_keys):
    _, _, rk, gks = toy_keys
    return EvalKeys(rk, gks)


@pytest.fixture(scope="session")
def p1_plan(p1):
    return plan_packing(p1, 768)


@pytest.fixture(scope="session")
def p1_keys(p1, p1_plan):
    sk, pk, rk = ckks.keygen(p1, seed=11)
    gks = ckks.gen_galois_keys(sk, plan_rotations(p1_plan), seed=12)
    return sk, pk, rk, gks


@pytest.fixture(scope="session")
def p1_eval(p1_keys):
    _, _, rk, gks = p1_keys
    return EvalKeys(rk, gks)


def encrypt_values(params, sk, values, seed=0, level=None):
    pt = ckks.encode(values, params, level=level)
    return ckks.encrypt(pt, sk, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fuzz_server_session(params, layers, plan, sk, eval_keys, n, seed=0):
    """Feed ``n`` mutated frames through frame decoding and the session state machine.

    Returns a Counter of outcomes. Anything other than FrameError from decoding
    or ERROR/no frames from ``handle`` propagates and fails the caller.
    """
    from collections import Counter

    from cryptotl.errors import FrameError
    from cryptotl.protocol import codec
    from cryptotl.protocol.frames import Tag, decode_frame, hello, with_seq
    from cryptotl.protocol.session import Phase, ServerSession

    ct_head = codec.serialize_ciphertext(encrypt_values(params, sk, np.zeros(4), seed=seed))[:64]
    corpus = [
        hello(params.fingerprint).encode(),
        with_seq(Tag.QUERY, 1, ct_head).encode(),
        with_seq(Tag.RESPONSE, 1, ct_head).encode(),
        b"\x00\x00\x00\x40\x02CTLK" + bytes(60),
        b"\x00\x00\x00\x0b\x7f" + bytes(11),
    ]
    rng = np.random.default_rng(seed)
    phases = (Phase.AWAITING_HELLO, Phase.AWAITING_KEYS, Phase.READY)
    outcomes = Counter()
    base = ServerSession(params, layers, plan)
    for _ in range(n):
        buf = bytearray(corpus[rng.integers(len(corpus))])
        kind = rng.integers(4)
        if kind == 0:
            for _ in range(rng.integers(1, 4)):
                buf[rng.integers(len(buf))] = rng.integers(256)
        elif kind == 1:
            buf = buf[: rng.integers(len(buf))]
        elif kind == 2:
            buf += rng.bytes(rng.integers(1, 16))
        else:
            buf = bytearray(rng.bytes(rng.integers(0, 48)))
        try:
            frame = decode_frame(bytes(buf))
        except FrameError:
            outcomes["frame-error"] += 1
            continue
        session = ServerSession.__new__(ServerSession)
        session.__dict__.update(base.__dict__)
        session._answered = {}
        session.phase = phases[rng.integers(3)]
        session.keys = eval_keys if session.phase is Phase.READY else None
        replies, _ = session.handle(frame)
        if any(r.tag is not Tag.ERROR for r in replies):
            raise AssertionError(f"non-error reply to fuzzed frame {bytes(buf)[:32]!r}")
        outcomes["error-frame" if replies else "accepted"] += 1
    return outcomes


def tiny_spec():
    """Every layer kind and activation at input width 12."""
    from cryptotl.nn import LayerSpec, ModelSpec
    return ModelSpec(12, (
        LayerSpec("conv1d", 3),
        LayerSpec("dense", 12, "relu_approx"),
        LayerSpec("avgpool", 3),
        LayerSpec("dropout", rate=0.3),
        LayerSpec("dense", 10, "relu"),
        LayerSpec("maxpool", 3),
        LayerSpec("dense", 6, "linear"),
        LayerSpec("dense", 2, "sigmoid"),
    ), frozen=3)


def max_fd_error(spec, seed=0, h=1e-5):
    """Largest norm-wise relative error between backprop and central differences, per tensor."""
    from cryptotl.nn import backward, forward, init_state, loss

    state = init_state(spec, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, spec.input_width))
    y = np.array([0, 1, 1, 0, 1])
    fp = forward(state, spec, x, "train", np.random.default_rng(9))
    grads = backward(state, spec, fp, y)
    worst = 0.0
    for i, p in enumerate(state.params):
        for k, v in p.items():
            num = np.zeros_like(v)
            for idx in np.ndindex(v.shape):
                vals = []
                for eps in (h, -h):
                    s = state.copy()
                    s.params[i][k] = v.copy()
                    s.params[i][k][idx] += eps
                    vals.append(loss(s, spec, x, y, "train", np.random.default_rng(9)))
                num[idx] = (vals[0] - vals[1]) / (2 * h)
            denom = max(np.linalg.norm(grads[i][k]) + np.linalg.norm(num), 1e-12)
            worst = max(worst, float(np.linalg.norm(grads[i][k] - num) / denom))
    return worst
