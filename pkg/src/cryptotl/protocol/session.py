"""Client/server session logic.

Server phases and the only accepted transitions::

    awaiting-hello --HELLO(fp ok)--> awaiting-keys --EVALKEYS--> ready --QUERY--> ready

Anything else is a protocol violation: the server answers with an ERROR frame
and closes. Failures while evaluating a well-formed QUERY (bad ciphertext
bytes, level or scale mismatch) are reported with an ERROR frame that echoes
the sequence number, and the session continues.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from collections import Counter, OrderedDict

import numpy as np

from .. import ckks
from ..ckks import CkksParams, SecretKey
from ..errors import CodecError, CryptoError, CryptoTLError, FrameError, SessionError
from ..he_layers import LayerPlaintexts, PackingPlan, frozen_forward, pack_batch, unpack_batch
from . import codec
from .frames import ErrorCode, Frame, Tag, error, hello, parse_error, parse_hello, split_seq, with_seq

log = logging.getLogger("cryptotl.server")


class Phase(enum.Enum):
    AWAITING_HELLO = "awaiting-hello"
    AWAITING_KEYS = "awaiting-keys"
    READY = "ready"
    CLOSED = "closed"


class ServerMetrics:
    """Thread-safe counters shared by every session of one server."""

    def __init__(self):
        self._lock = threading.Lock()
        self.counts = Counter()

    def incr(self, name: str, n: int = 1):
        with self._lock:
            self.counts[name] += n

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self.counts)


def _log_event(event: str, **fields):
    log.info(json.dumps({"event": event, **fields}, sort_keys=True))


class ServerSession:
    def __init__(self, params: CkksParams, layers: LayerPlaintexts, plan: PackingPlan,
                 metrics: ServerMetrics | None = None, replay_cache: int = 4):
        self.params = params
        self.layers = layers
        self.plan = plan
        self.metrics = metrics or ServerMetrics()
        self.phase = Phase.AWAITING_HELLO
        self.keys = None
        self._answered = OrderedDict()  # seq -> RESPONSE frame, for idempotent retries
        self._replay_cache = replay_cache

    def _fatal(self, code: ErrorCode, message: str, seq: int = 0):
        self.phase = Phase.CLOSED
        self.metrics.incr(f"error.{code.name.lower()}")
        _log_event("error", code=code.name, message=message, fatal=True)
        return [error(code, message, seq)], True

    def handle(self, frame: Frame) -> tuple:
        """Process one inbound frame; returns (frames to send, close the session)."""
        if self.phase is Phase.CLOSED:
            return [], True
        if frame.tag is Tag.HELLO:
            if self.phase is not Phase.AWAITING_HELLO:
                return self._fatal(ErrorCode.UNEXPECTED_FRAME, "HELLO sent twice")
            try:
                fp = parse_hello(frame.payload)
            except FrameError as exc:
                return self._fatal(ErrorCode.MALFORMED, str(exc))
            if fp != self.params.fingerprint:
                return self._fatal(ErrorCode.FINGERPRINT_MISMATCH,
                                   "parameter fingerprint does not match the server")
            self.phase = Phase.AWAITING_KEYS
            return [], False
        if frame.tag is Tag.EVALKEYS:
            if self.phase is not Phase.AWAITING_KEYS:
                return self._fatal(ErrorCode.UNEXPECTED_FRAME,
                                   f"EVALKEYS not allowed in phase {self.phase.value}")
            try:
                keys = codec.deserialize_eval_keys(frame.payload, self.params)
            except CryptoTLError as exc:
                return self._fatal(ErrorCode.MALFORMED, f"bad evaluation keys: {exc}")
            missing = self.plan.rotations - keys.galois.steps
            if missing:
                return self._fatal(ErrorCode.MALFORMED, f"missing rotation keys {sorted(missing)[:8]}")
            self.keys = keys
            self.phase = Phase.READY
            return [], False
        if frame.tag is Tag.QUERY:
            if self.phase is Phase.AWAITING_KEYS:
                return self._fatal(ErrorCode.KEYS_REQUIRED, "keys required")
            if self.phase is not Phase.READY:
                return self._fatal(ErrorCode.UNEXPECTED_FRAME, "QUERY before HELLO")
            try:
                seq, body = split_seq(frame.payload)
            except FrameError as exc:
                return self._fatal(ErrorCode.MALFORMED, str(exc))
            return [self._query(seq, body, len(frame.payload))], False
        return self._fatal(ErrorCode.UNEXPECTED_FRAME, f"clients may not send {frame.tag.name}")

    def _query(self, seq: int, body: bytes, size: int) -> Frame:
        if seq in self._answered:
            self.metrics.incr("query.replayed")
            return self._answered[seq]
        start = time.perf_counter()
        try:
            ct = codec.deserialize_ciphertext(body, self.params)
            out = frozen_forward(ct, self.layers, self.plan, self.keys)
        except (CodecError, CryptoError) as exc:
            code = ErrorCode.MALFORMED if isinstance(exc, CodecError) else ErrorCode.CRYPTO
            self.metrics.incr(f"error.{code.name.lower()}")
            _log_event("error", code=code.name, message=str(exc), seq=seq, fatal=False)
            return error(code, str(exc), seq)
        payload = codec.serialize_ciphertext(out)
        reply = with_seq(Tag.RESPONSE, seq, payload)
        self._answered[seq] = reply
        while len(self._answered) > self._replay_cache:
            self._answered.popitem(last=False)
        self.metrics.incr("query.answered")
        _log_event("query", seq=seq, bytes_in=size, bytes_out=len(reply.payload),
                   levels_consumed=ct.level - out.level, wall_s=round(time.perf_counter() - start, 4))
        return reply


def run_server_session(conn, session: ServerSession, stop: threading.Event | None = None):
    """Drive one session until EOF, a fatal error or a shutdown request."""
    session.metrics.incr("session.opened")
    try:
        while True:
            if stop is not None and stop.is_set():
                conn.send(error(ErrorCode.SHUTDOWN, "server shutting down"))
                break
            try:
                frame = conn.recv()
            except FrameError as exc:
                code = ErrorCode.FRAME_TOO_LARGE if "exceeds" in str(exc) else ErrorCode.MALFORMED
                session.metrics.incr(f"error.{code.name.lower()}")
                _log_event("error", code=code.name, message=str(exc), fatal=True)
                conn.send(error(code, str(exc)))
                break
            if frame is None:
                if stop is not None and stop.is_set():
                    conn.send(error(ErrorCode.SHUTDOWN, "server shutting down"))
                break
            replies, close = session.handle(frame)
            for r in replies:
                conn.send(r)
            if close:
                break
    except (ConnectionError, OSError) as exc:
        _log_event("disconnect", message=str(exc))
    finally:
        conn.close()
        session.metrics.incr("session.closed")


class Server:
    """Accept loop: one thread per session, shared immutable layers and metrics."""

    def __init__(self, listener, params: CkksParams, layers: LayerPlaintexts, plan: PackingPlan,
                 metrics: ServerMetrics | None = None, max_sessions: int | None = None):
        self.listener = listener
        self.params = params
        self.layers = layers
        self.plan = plan
        self.metrics = metrics or ServerMetrics()
        self.max_sessions = max_sessions
        self.stop = threading.Event()
        self._lock = threading.Lock()
        self._active = set()
        self._threads = []

    def _run(self, conn):
        try:
            run_server_session(conn, ServerSession(self.params, self.layers, self.plan, self.metrics),
                               self.stop)
        finally:
            with self._lock:
                self._active.discard(conn)

    def serve_forever(self):
        started = 0
        try:
            while not self.stop.is_set():
                if self.max_sessions is not None and started >= self.max_sessions:
                    break
                conn = self.listener.accept()
                if conn is None:
                    continue
                with self._lock:
                    self._active.add(conn)
                th = threading.Thread(target=self._run, args=(conn,), daemon=True)
                th.start()
                self._threads.append(th)
                started += 1
        finally:
            for th in self._threads:
                th.join()
            self.listener.close()

    def shutdown(self):
        """Stop accepting; sessions finish their current frame, flush, then close."""
        self.stop.set()
        with self._lock:
            for conn in list(self._active):
                conn.interrupt()


# --------------------------------------------------------------------------- client

def num_queries(n: int, p_impl: int) -> int:
    return -(-n // p_impl) if n > 0 else 0


class Client:
    """Client side of a session: owns the secret key, sends public material only."""

    def __init__(self, connect, params: CkksParams, sk: SecretKey, eval_keys: bytes,
                 plan: PackingPlan, retries: int = 2, seed=None):
        if not isinstance(sk, SecretKey):
            raise TypeError("the client needs the secret key")
        self._connect = connect
        self.params = params
        self.sk = sk
        self.eval_keys = eval_keys
        self.plan = plan
        self.retries = retries
        self.rng = np.random.default_rng(seed)
        self.conn = None
        self.seq = 0
        self.queries_sent = 0
        self.t_server = 0.0  # wall time from send to decrypted result

    def open(self):
        self.conn = self._connect()
        self.conn.send(hello(self.params.fingerprint))
        self.conn.send(Frame(Tag.EVALKEYS, self.eval_keys))

    def close(self):
        if self.conn is not None:
            self.conn.close()
            self.conn = None

    def __enter__(self):
        self.open()
        return self

    def __exit__(self, *exc):
        self.close()

    def _roundtrip(self, seq: int, body: bytes) -> bytes:
        frame = with_seq(Tag.QUERY, seq, body)
        for attempt in range(self.retries + 1):
            try:
                if self.conn is None:
                    self.open()
                self.conn.send(frame)
                self.queries_sent += 1
                while True:
                    reply = self.conn.recv()
                    if reply is None:
                        raise ConnectionError("server closed the session")
                    if reply.tag is Tag.ERROR:
                        code, eseq, msg = parse_error(reply.payload)
                        raise SessionError(f"server error {getattr(code, 'name', code)}: {msg}", code)
                    if reply.tag is not Tag.RESPONSE:
                        raise SessionError(f"unexpected {reply.tag.name} frame")
                    rseq, payload = split_seq(reply.payload)
                    if rseq == seq:
                        return payload
                    # a late answer to an earlier attempt; at most one result per seq is used
            except (ConnectionError, OSError):
                self.close()
                if attempt == self.retries:
                    raise
        raise ConnectionError("unreachable")

    def query(self, items) -> np.ndarray:
        items = list(items)
        if not items:
            return np.zeros((0, self.plan.out_width))
        start = time.perf_counter()
        self.seq += 1
        pt = ckks.encode(pack_batch(items, self.plan), self.params)
        ct = ckks.encrypt(pt, self.sk, self.rng)
        payload = self._roundtrip(self.seq, codec.serialize_ciphertext(ct))
        out = codec.deserialize_ciphertext(payload, self.params)
        feats = unpack_batch(ckks.decrypt_decode(out, self.sk), self.plan, len(items),
                             self.plan.out_width)
        self.t_server += time.perf_counter() - start
        return feats


def client_query(client: Client, items) -> np.ndarray:
    """Features for every item, issuing ceil(n / p_impl) queries."""
    items = np.asarray(items, dtype=np.float64)
    n = 0 if items.size == 0 else items.shape[0]
    p = client.plan.p_impl
    out = [client.query(items[i: i + p]) for i in range(0, n, p)]
    return np.concatenate(out) if out else np.zeros((0, client.plan.out_width))


__all__ = ["Phase", "Server", "ServerMetrics", "ServerSession", "run_server_session", "Client",
           "client_query", "num_queries"]
