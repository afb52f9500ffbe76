import ast
import pathlib
import struct
import threading

import numpy as np
import pytest

import cryptotl
from cryptotl import ckks
from cryptotl.errors import CodecError, FingerprintMismatchError, FrameError, SessionError
from cryptotl.he_layers import FrozenWeights, plaintext_frozen_forward, prepare_layers
from cryptotl.protocol import (Client, OfflineListener, Server, ServerMetrics, ServerSession, TcpListener,
                               client_query, codec, connect_tcp, count_frames, num_queries,
                               open_offline_session)
from cryptotl.protocol.frames import (ErrorCode, Frame, Tag, decode_frame, encode_frame, error, hello,
                                      parse_error, parse_header, read_frame, split_seq, with_seq)
from cryptotl.protocol.session import Phase

from conftest import encrypt_values, fuzz_server_session

PKG = pathlib.Path(cryptotl.__file__).parent


@pytest.fixture(scope="module")
def weights():
    return FrozenWeights.random(64, seed=5)


@pytest.fixture(scope="module")
def layers(toy, toy_plan, weights):
    return prepare_layers(weights, toy_plan, toy, toy.max_level, toy.log_scale)


@pytest.fixture(scope="module")
def eval_bytes(toy_eval):
    return codec.serialize_eval_keys(toy_eval)


# --------------------------------------------------------------------------- frames

def test_frame_roundtrip_and_header_errors():
    f = with_seq(Tag.QUERY, 7, b"abc")
    raw = f.encode()
    assert raw[:5] == struct.pack(">IB", 11, 0x03)
    assert decode_frame(raw) == f
    assert split_seq(f.payload) == (7, b"abc")
    with pytest.raises(FrameError, match="unknown frame tag"):
        decode_frame(b"\x00\x00\x00\x00\x55")
    with pytest.raises(FrameError, match="exceeds"):
        parse_header(struct.pack(">IB", 1001, 1), max_frame=1000)
    with pytest.raises(FrameError):
        decode_frame(raw[:-1])
    with pytest.raises(ValueError):
        encode_frame(0x55)


def test_read_frame_stream_ends():
    raw = encode_frame(Tag.HELLO, b"xy")
    chunks = iter([raw[:5], raw[5:]])
    assert read_frame(lambda n: next(chunks)) == Frame(Tag.HELLO, b"xy")
    assert read_frame(lambda n: b"") is None
    with pytest.raises(FrameError):
        read_frame(lambda n: b"\x00\x00")


def test_error_payload_roundtrip():
    code, seq, msg = parse_error(error(ErrorCode.KEYS_REQUIRED, "keys required", 9).payload)
    assert (code, seq, msg) == (ErrorCode.KEYS_REQUIRED, 9, "keys required")
    assert int(ErrorCode.KEYS_REQUIRED) == 0x02


def test_max_frame_env(monkeypatch):
    monkeypatch.setenv("CRYPTOTL_MAX_FRAME", "16")
    with pytest.raises(FrameError, match="exceeds"):
        decode_frame(encode_frame(Tag.QUERY, bytes(17)))
    monkeypatch.setenv("CRYPTOTL_MAX_FRAME", "lots")
    with pytest.raises(FrameError):
        decode_frame(encode_frame(Tag.QUERY, b""))


# --------------------------------------------------------------------------- codecs

def test_ciphertext_roundtrip_many(toy, toy_keys, rng):
    sk = toy_keys[0]
    for i in range(100):
        level = int(rng.integers(0, toy.max_level + 1))
        ct = encrypt_values(toy, sk, rng.uniform(-1, 1, 8), seed=i, level=level)
        back = codec.deserialize_ciphertext(codec.serialize_ciphertext(ct), toy)
        assert back.level == ct.level and back.log_scale == ct.log_scale
        assert np.array_equal(back.data, ct.data)


def test_ciphertext_size_layout(toy, toy_keys):
    ct = encrypt_values(toy, toy_keys[0], [1.0])
    assert len(codec.serialize_ciphertext(ct)) == 4 + 2 + 32 + 1 + 8 + 1 + 2 * 7 * 1024 * 8
    assert codec.ciphertext_size(toy, 6) == len(codec.serialize_ciphertext(ct))


@pytest.mark.slow
def test_p1_ciphertext_size(p1, p1_keys):
    ct = encrypt_values(p1, p1_keys[0], [1.0])
    assert len(codec.serialize_ciphertext(ct)) == 4 + 2 + 32 + 1 + 8 + 1 + 2 * 7 * 8192 * 8


def test_residue_flip_parses_header_flip_raises(toy, toy_keys):
    ct = encrypt_values(toy, toy_keys[0], [0.5, -0.25])
    raw = bytearray(codec.serialize_ciphertext(ct))
    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    back = codec.deserialize_ciphertext(bytes(flipped), toy)
    assert np.all(back.data < toy.ring.moduli[: back.level + 1][None, :, None])
    for pos in (0, 4, 10):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises((CodecError, FingerprintMismatchError)):
            codec.deserialize_ciphertext(bytes(bad), toy)
    with pytest.raises(CodecError):
        codec.deserialize_ciphertext(bytes(raw[:-8]), toy)
    with pytest.raises(CodecError):
        codec.deserialize_ciphertext(bytes(raw) + b"\x00", toy)


def test_ciphertext_wrong_params(toy, p1, toy_keys):
    raw = codec.serialize_ciphertext(encrypt_values(toy, toy_keys[0], [1.0]))
    with pytest.raises(FingerprintMismatchError):
        codec.deserialize_ciphertext(raw, p1)


def test_key_codecs_roundtrip(toy, toy_keys):
    sk, pk, rk, gks = toy_keys
    pk2 = codec.deserialize_public_key(codec.serialize_public_key(pk), toy)
    assert np.array_equal(pk2.a, pk.a) and np.array_equal(pk2.b, pk.b)
    rk2 = codec.deserialize_relin_key(codec.serialize_relin_key(rk), toy)
    assert np.array_equal(rk2.key.a, rk.key.a) and np.array_equal(rk2.key.b, rk.key.b)
    raw = codec.serialize_galois_keys(gks)
    assert codec.read_label(raw) == "TOY-INSECURE"
    gks2 = codec.deserialize_galois_keys(raw, toy)
    assert gks2.steps == gks.steps
    for s in gks.keys:
        assert np.array_equal(gks2.keys[s].a, gks.keys[s].a)
    with pytest.raises(CodecError):
        codec.deserialize_galois_keys(raw[:-1], toy)


def test_relin_key_transmits_seed_not_a(toy, toy_keys):
    rk = toy_keys[2]
    raw = codec.serialize_relin_key(rk)
    assert len(raw) == len(codec._key_header(b"CTLR", toy)) + 32 + rk.key.b.nbytes


def test_tensor_codec(rng):
    t = {"a": rng.normal(size=(3, 4)), "b": np.array([1.5]), "scalar": np.array(2.0)}
    back = codec.deserialize_tensors(codec.serialize_tensors(t))
    assert set(back) == set(t) and all(np.array_equal(back[k], t[k]) for k in t)
    raw = codec.serialize_tensors(t)
    with pytest.raises(CodecError):
        codec.deserialize_tensors(raw[:-1])
    with pytest.raises(CodecError):
        codec.deserialize_tensors(b"CTLW\x01\x00\x01\x00\x01a\x02\xff\xff\xff\xff\xff\xff\xff\xff")


def test_frozen_weights_codec(weights):
    back = codec.deserialize_frozen_weights(codec.serialize_frozen_weights(weights))
    assert np.array_equal(back.w1, weights.w1) and back.relu_coeffs == weights.relu_coeffs
    assert back.pool == weights.pool and back.conv_b == weights.conv_b


def test_no_secret_key_codec_on_the_wire():
    """Nothing in the protocol package can serialize a secret key."""
    names = [n for n in dir(codec) if "secret" in n.lower()]
    assert names == []
    for path in (PKG / "protocol").glob("*.py"):
        tree = ast.parse(path.read_text())
        for node in ast.walk(tree):
            if isinstance(node, ast.FunctionDef):
                assert "secret" not in node.name.lower(), (path.name, node.name)
            if isinstance(node, ast.Constant) and isinstance(node.value, bytes):
                assert node.value != b"CTLS", path.name
    assert not any("SECRET" in t.name for t in Tag)


def test_client_refuses_to_run_without_secret_key(toy, toy_plan, toy_keys):
    with pytest.raises(TypeError):
        Client(lambda: None, toy, toy_keys[1], b"", toy_plan)


# --------------------------------------------------------------------------- state machine

def _session(toy, layers, toy_plan, metrics=None):
    return ServerSession(toy, layers, toy_plan, metrics or ServerMetrics())


def _query(toy, sk, seq, items, plan, seed=0):
    from cryptotl.he_layers import pack_batch
    ct = encrypt_values(toy, sk, pack_batch(items, plan), seed=seed)
    return with_seq(Tag.QUERY, seq, codec.serialize_ciphertext(ct))


def test_query_before_keys_is_rejected(toy, layers, toy_plan, toy_keys):
    s = _session(toy, layers, toy_plan)
    assert s.handle(hello(toy.fingerprint)) == ([], False)
    replies, close = s.handle(_query(toy, toy_keys[0], 1, np.zeros((1, 64)), toy_plan))
    assert close and s.phase is Phase.CLOSED
    code, _, msg = parse_error(replies[0].payload)
    assert code == ErrorCode.KEYS_REQUIRED and int(code) == 0x02 and msg == "keys required"
    assert s.handle(hello(toy.fingerprint)) == ([], True)


def test_fingerprint_mismatch(toy, p1, layers, toy_plan):
    metrics = ServerMetrics()
    s = _session(toy, layers, toy_plan, metrics)
    replies, close = s.handle(hello(p1.fingerprint))
    assert close and parse_error(replies[0].payload)[0] == ErrorCode.FINGERPRINT_MISMATCH
    assert metrics.snapshot()["error.fingerprint_mismatch"] == 1


@pytest.mark.parametrize("frames", [
    [Tag.QUERY], [Tag.EVALKEYS], [Tag.HELLO, Tag.HELLO], [Tag.RESPONSE], [Tag.ERROR],
])
def test_out_of_order_frames_close_the_session(toy, layers, toy_plan, frames):
    s = _session(toy, layers, toy_plan)
    replies, close = [], False
    for tag in frames:
        payload = hello(toy.fingerprint).payload if tag is Tag.HELLO else b"\x00" * 8
        replies, close = s.handle(Frame(tag, payload))
    assert close and replies[0].tag is Tag.ERROR


def test_session_answers_queries_and_replays(toy, layers, toy_plan, toy_keys, eval_bytes, weights, caplog):
    sk = toy_keys[0]
    metrics = ServerMetrics()
    s = _session(toy, layers, toy_plan, metrics)
    s.handle(hello(toy.fingerprint))
    assert s.handle(Frame(Tag.EVALKEYS, eval_bytes)) == ([], False)
    items = np.random.default_rng(3).uniform(-1, 1, (2, 64))
    with caplog.at_level("INFO", logger="cryptotl.server"):
        (r1,), _ = s.handle(_query(toy, sk, 1, items, toy_plan))
        (r2,), _ = s.handle(_query(toy, sk, 2, items[:1], toy_plan, seed=1))
        (r1b,), _ = s.handle(_query(toy, sk, 1, items, toy_plan, seed=9))
    assert r1.tag is Tag.RESPONSE and split_seq(r2.payload)[0] == 2
    assert r1b == r1
    assert metrics.snapshot() == {"query.answered": 2, "query.replayed": 1}
    events = [m for m in caplog.messages if '"event": "query"' in m]
    assert len(events) == 2 and '"levels_consumed": 6' in events[0] and "bytes_in" in events[0]
    from cryptotl.he_layers import unpack_batch
    out = codec.deserialize_ciphertext(split_seq(r1.payload)[1], toy)
    feats = unpack_batch(ckks.decrypt_decode(out, sk), toy_plan, 2, toy_plan.out_width)
    assert np.abs(feats - plaintext_frozen_forward(items, weights)).max() < 1e-3


def test_bad_query_body_is_recoverable(toy, layers, toy_plan, toy_keys, eval_bytes):
    s = _session(toy, layers, toy_plan)
    s.handle(hello(toy.fingerprint))
    s.handle(Frame(Tag.EVALKEYS, eval_bytes))
    (r,), close = s.handle(with_seq(Tag.QUERY, 5, b"garbage"))
    code, seq, _ = parse_error(r.payload)
    assert not close and code == ErrorCode.MALFORMED and seq == 5
    low = encrypt_values(toy, toy_keys[0], [1.0], level=3)
    (r,), close = s.handle(with_seq(Tag.QUERY, 6, codec.serialize_ciphertext(low)))
    assert not close and parse_error(r.payload)[0] == ErrorCode.CRYPTO
    assert s.phase is Phase.READY


def test_evalkeys_missing_rotations_is_fatal(toy, layers, toy_plan, toy_keys):
    sk, _, rk, gks = toy_keys
    from cryptotl.he_layers import EvalKeys
    partial = ckks.GaloisKeySet(toy, {k: v for k, v in list(gks.keys.items())[:3]})
    s = _session(toy, layers, toy_plan)
    s.handle(hello(toy.fingerprint))
    (r,), close = s.handle(Frame(Tag.EVALKEYS, codec.serialize_eval_keys(EvalKeys(rk, partial))))
    assert close and "missing rotation keys" in parse_error(r.payload)[2]


def test_fuzzed_frames_yield_structured_errors(toy, layers, toy_plan, toy_keys, toy_eval):
    out = fuzz_server_session(toy, layers, toy_plan, toy_keys[0], toy_eval, 20_000, seed=7)
    assert sum(out.values()) == 20_000 and out["frame-error"] > 0 and out["error-frame"] > 0


def test_num_queries():
    assert num_queries(5, 2) == 3
    assert num_queries(0, 2) == 0
    assert num_queries(4, 4) == 1
    assert [num_queries(n, 2) for n in range(0, 51)] == [-(-n // 2) for n in range(0, 51)]


# --------------------------------------------------------------------------- loopback

def _serve(listener, toy, layers, toy_plan, sessions=1):
    srv = Server(listener, toy, layers, toy_plan, max_sessions=sessions)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    return srv, th


@pytest.mark.parametrize("mode", ["offline", "tcp"])
def test_loopback_matches_plaintext(mode, tmp_path, toy, layers, toy_plan, toy_keys, eval_bytes, weights):
    if mode == "tcp":
        listener = TcpListener()
        address = listener.address
        connect = lambda: connect_tcp(address)  # noqa: E731
    else:
        listener = OfflineListener(tmp_path, poll=0.01)
        connect = lambda: open_offline_session(tmp_path)  # noqa: E731
    srv, th = _serve(listener, toy, layers, toy_plan)
    x = np.random.default_rng(0).normal(size=(9, 64))
    client = Client(connect, toy, toy_keys[0], eval_bytes, toy_plan, seed=0)
    with client:
        feats = client_query(client, x)
    th.join(timeout=60)
    assert not th.is_alive()
    assert client.queries_sent == num_queries(9, toy_plan.p_impl) == 3
    assert np.abs(feats - plaintext_frozen_forward(x, weights)).max() < 1e-3
    assert srv.metrics.snapshot()["query.answered"] == 3
    if mode == "offline":
        (session_dir,) = tmp_path.glob("session-*")
        assert count_frames(session_dir, Tag.QUERY) == 3
        assert count_frames(session_dir, Tag.RESPONSE, "s2c") == 3
        for marker in ("client.open", "server.claimed", "client.closed", "server.closed"):
            assert (session_dir / marker).exists()


def test_client_reports_server_error(tmp_path, toy, p1, layers, toy_plan, toy_keys, eval_bytes):
    listener = OfflineListener(tmp_path, poll=0.01)
    srv = Server(listener, p1, layers, toy_plan, max_sessions=1)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    client = Client(lambda: open_offline_session(tmp_path), toy, toy_keys[0], eval_bytes, toy_plan)
    with client, pytest.raises(SessionError, match="FINGERPRINT_MISMATCH"):
        client.query(np.zeros((1, 64)))
    th.join(timeout=30)


def test_unreachable_server():
    listener = TcpListener()
    address = listener.address
    listener.close()
    with pytest.raises(ConnectionError):
        connect_tcp(address, timeout=2)


def test_shutdown_flushes_error_frame(toy, layers, toy_plan, eval_bytes):
    listener = TcpListener()
    srv, th = _serve(listener, toy, layers, toy_plan)
    conn = connect_tcp(listener.address, timeout=30)
    conn.send(hello(toy.fingerprint))
    conn.send(Frame(Tag.EVALKEYS, eval_bytes))
    while not srv._active:
        threading.Event().wait(0.01)
    srv.shutdown()
    reply = conn.recv()
    assert reply.tag is Tag.ERROR and parse_error(reply.payload)[0] == ErrorCode.SHUTDOWN
    conn.close()
    th.join(timeout=30)
    assert not th.is_alive()
