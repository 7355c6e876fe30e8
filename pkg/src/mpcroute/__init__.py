"""Two-party secret-shared routing of queries to a pool of MLP experts."""
from .errors import (
    CorruptFileError,
    HandshakeError,
    MPCConnectionError,
    ProtocolError,
    RangeError,
    TrainingError,
    TripleExhaustedError,
)
from .kernels import backend, native_available, set_backend
from .modelpool import ExpertSpec, ModelPool, RouterPolicy
from .protocol import ClientResult, InferenceSession, plaintext_pipeline, simulate
from .ring import RING16, RING64, FixedPointCodec, Ring
from .sharing import SharedTensor, reconstruct, share
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ClientResult", "CorruptFileError", "ExpertSpec", "FixedPointCodec", "HandshakeError",
    "InferenceSession", "MPCConnectionError", "ModelPool", "ProtocolError", "RING16", "RING64",
    "RangeError", "Ring", "RouterPolicy", "SharedTensor", "TrainConfig", "TrainingError",
    "TripleExhaustedError", "backend", "native_available", "plaintext_pipeline", "reconstruct",
    "set_backend", "share", "simulate",
]
