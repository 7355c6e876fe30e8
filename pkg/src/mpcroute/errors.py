"""Exception types shared across the package."""


class RangeError(ValueError):
    """A real value falls outside the representable fixed-point range."""


class ProtocolError(RuntimeError):
    """The two parties disagree about protocol state, or a frame is malformed."""


class HandshakeError(ProtocolError):
    """Session handshake frames do not match."""


class TripleExhaustedError(ProtocolError):
    """A party ran out of dealer-generated correlated randomness."""


class MPCConnectionError(ConnectionError):
    """The peer endpoint went away."""


class CorruptFileError(ValueError):
    """An on-disk artifact has a bad magic, version or length."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""
