"""Pure-numpy versions of the native kernels (same signatures)."""
import numpy as np

_FULL = np.uint64(0xFFFFFFFFFFFFFFFF)


def beaver_mac(eps, delta, a, b, c, party0, mask):
    t = c + eps * b + delta * a
    if party0:
        t = t + eps * delta
    out = t.sum(axis=1, dtype=np.uint64)
    return out if np.uint64(mask) == _FULL else out & np.uint64(mask)


def beaver_combine(eps, delta, a, b, c, party0, mask):
    t = c + eps * b + delta * a
    if party0:
        t = t + eps * delta
    return t & np.uint64(mask)


def ring_matmul(x, w, mask):
    out = np.matmul(x, w)
    return out if np.uint64(mask) == _FULL else out & np.uint64(mask)
