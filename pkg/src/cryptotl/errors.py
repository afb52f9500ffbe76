"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`CryptoTLError`.
The ``exit_code`` attribute is what the command line maps the error to.
"""


class CryptoTLError(Exception):
    exit_code = 1


class UsageError(CryptoTLError, ValueError):
    exit_code = 2


class DataError(CryptoTLError, ValueError):
    exit_code = 3


class ProtocolError(CryptoTLError):
    exit_code = 4


class CodecError(ProtocolError, ValueError):
    """Malformed, truncated or mismatching serialized bytes."""


class FrameError(ProtocolError):
    """Bad frame header, unknown tag or oversize frame."""


class SessionError(ProtocolError):
    """A peer violated the session state machine or reported a failure."""

    def __init__(self, message, code=None):
        super().__init__(message)
        self.code = code


class CryptoError(CryptoTLError):
    exit_code = 5


class ParameterError(CryptoError, ValueError):
    pass


class RepresentationError(CryptoError):
    """Operand is in the wrong domain (coefficient vs. evaluation)."""


class LevelMismatchError(CryptoError):
    pass


class ScaleMismatchError(CryptoError):
    pass


class DepthExhaustedError(CryptoError):
    pass


class MissingKeyError(CryptoError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class FingerprintMismatchError(CryptoError):
    pass


class EncodingRangeError(CryptoError, OverflowError):
    pass


class CapacityError(CryptoError, ValueError):
    pass
