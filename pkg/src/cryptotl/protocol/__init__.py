"""Wire format, session state machine and transports."""

from . import codec, frames, session, transport
from .codec import (deserialize_ciphertext, deserialize_eval_keys, deserialize_frozen_weights,
                    deserialize_galois_keys, deserialize_public_key, deserialize_relin_key,
                    deserialize_tensors, serialize_ciphertext, serialize_eval_keys,
                    serialize_frozen_weights, serialize_galois_keys, serialize_public_key,
                    serialize_relin_key, serialize_tensors)
from .frames import ErrorCode, Frame, Tag
from .session import (Client, Phase, Server, ServerMetrics, ServerSession, client_query, num_queries,
                      run_server_session)
from .transport import (FileConnection, OfflineListener, SocketConnection, TcpListener, connect_tcp,
                        count_frames, open_offline_session)

__all__ = [
    "codec", "frames", "session", "transport",
    "deserialize_ciphertext", "deserialize_eval_keys", "deserialize_frozen_weights",
    "deserialize_galois_keys", "deserialize_public_key", "deserialize_relin_key",
    "deserialize_tensors", "serialize_ciphertext", "serialize_eval_keys",
    "serialize_frozen_weights", "serialize_galois_keys", "serialize_public_key",
    "serialize_relin_key", "serialize_tensors",
    "ErrorCode", "Frame", "Tag",
    "Client", "Phase", "Server", "ServerMetrics", "ServerSession", "client_query", "num_queries",
    "run_server_session",
    "FileConnection", "OfflineListener", "SocketConnection", "TcpListener", "connect_tcp",
    "count_frames", "open_offline_session",
]
