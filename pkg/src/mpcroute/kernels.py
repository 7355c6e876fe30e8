"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

>>> from mpcroute import kernels
>>> kernels.backend()  # doctest: +SKIP
'native'
"""
from __future__ import annotations

import numpy as np

from . import _pykernels

try:
    from . import _kernels as _native
except ImportError:  # extension not built
    _native = None

_impl = _native if _native is not None else _pykernels


def native_available() -> bool:
    return _native is not None


def backend() -> str:
    return "native" if _impl is _native else "python"


def set_backend(name: str) -> None:
    global _impl
    if name == "native":
        if _native is None:
            raise RuntimeError("native kernels are not built")
        _impl = _native
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def _c(x):
    return np.ascontiguousarray(x, dtype=np.uint64)


def beaver_mac(eps, delta, a, b, c, party0: bool, mask) -> np.ndarray:
    """Sum over the middle axis of the per-element Beaver recombination.

    All operands have shape ``(n, d, m)``; the result has shape ``(n, m)``.
    """
    return _impl.beaver_mac(_c(eps), _c(delta), _c(a), _c(b), _c(c), bool(party0), np.uint64(mask))


def beaver_combine(eps, delta, a, b, c, party0: bool, mask) -> np.ndarray:
    shape = np.shape(eps)
    flat = [_c(v).reshape(-1) for v in (eps, delta, a, b, c)]
    return _impl.beaver_combine(*flat, bool(party0), np.uint64(mask)).reshape(shape)


def ring_matmul(x, w, mask) -> np.ndarray:
    return _impl.ring_matmul(_c(x), _c(w), np.uint64(mask))
