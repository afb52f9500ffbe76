"""CryptoTL: transfer learning where the server's frozen layers run on CKKS ciphertexts.

Submodules:

* ``ring``: RNS polynomial arithmetic with a negacyclic NTT
* ``ckks``: encoding, keys, encryption and homomorphic operations
* ``he_layers``: the encrypted frozen stack (conv, dense, ReLU approximation, pooling)
* ``nn``: the plaintext model, training and DP-SGD accounting
* ``protocol``: wire codecs, frames, transports and the client/server session
* ``cli``: the ``cryptotl`` command
"""

from .errors import CryptoError, CryptoTLError, DataError, ProtocolError, UsageError

__version__ = "0.1.0"

__all__ = ["CryptoError", "CryptoTLError", "DataError", "ProtocolError", "UsageError", "__version__"]
