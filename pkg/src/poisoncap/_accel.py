"""Kernel backend selection.

The revocation scans exist twice: a vectorised numpy version and the scalar
loops from :mod:`poisoncap._loops` compiled with numba.  The cache replay is
inherently sequential; its fallback is the same loop run by the interpreter.

Set ``POISONCAP_BACKEND=numpy`` to force the fallback path.  When numba cannot
be imported the fallback is used automatically.
"""

import logging
import os

import numpy as np

from . import _loops

logger = logging.getLogger(__name__)

U64_MAX = np.uint64(0xFFFFFFFFFFFFFFFF)

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    logger.warning("numba unavailable, using numpy kernels")


def _requested_backend() -> str:
    name = os.environ.get("POISONCAP_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"POISONCAP_BACKEND must be 'numba' or 'numpy', not {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


def _fields(rows):
    """Decode base, top, perms and flags for an ``(n, 16)`` uint8 block."""
    base = np.ascontiguousarray(rows[:, 0:8]).view("<u8").ravel()
    padded = np.zeros((rows.shape[0], 8), dtype=np.uint8)
    padded[:, 0:6] = rows[:, 8:14]
    length = padded.view("<u8").ravel()
    overflow = length > (U64_MAX - base)
    top = np.where(overflow, U64_MAX, base + np.where(overflow, 0, length).astype(np.uint64))
    return base, top, rows[:, 14], rows[:, 15]


def scan_poison_numpy(raw, tags, lo, hi, probe_lo, probe_hi):
    seg = raw[lo:hi]
    is_cap = tags[lo:hi] & ((seg[:, 15] & 1) == 0)
    idx = np.nonzero(is_cap)[0]
    examined = len(idx)
    base, top, perms, flags = _fields(seg[idx])
    ok = (base >= np.uint64(probe_lo)) & (base < np.uint64(probe_hi))
    probe = np.where(ok, base >> np.uint64(4), 0).astype(np.int64)
    ok &= probe < raw.shape[0]
    probed = int(ok.sum())
    probe = np.where(ok, probe, 0)
    prow = raw[probe]
    pbase, ptop, _, pflags = _fields(prow)
    revoke = (
        ok
        & tags[probe]
        & ((pflags & 1) == 1)
        & ((perms & 0x10) == 0)
        & (((flags >> 1) & 1) == ((pflags >> 1) & 1))
        & (pbase <= base)
        & (top <= ptop)
    )
    return examined, probed, (idx[revoke] + lo).astype(np.int64)


def scan_shadow_numpy(raw, tags, lo, hi, bits, cov_base, cov_len):
    seg = raw[lo:hi]
    is_cap = tags[lo:hi] & ((seg[:, 15] & 1) == 0)
    idx = np.nonzero(is_cap)[0]
    base, _, _, _ = _fields(seg[idx])
    cov_base = np.uint64(cov_base)
    ok = (base >= cov_base) & (base < cov_base + np.uint64(cov_len))
    gran = np.where(ok, (base - np.where(ok, cov_base, 0).astype(np.uint64)) >> np.uint64(4), 0).astype(np.int64)
    painted = ok & (((bits[gran >> 3] >> (gran & 7)) & 1) == 1)
    return len(idx), int(ok.sum()), (idx[painted] + lo).astype(np.int64)


if HAVE_NUMBA:
    scan_poison_numba = numba.njit(cache=False)(_loops.scan_poison_loop)
    scan_shadow_numba = numba.njit(cache=False)(_loops.scan_shadow_loop)
    replay_numba = numba.njit(cache=False)(_loops.replay_loop)

replay_python = _loops.replay_loop

BACKEND = _requested_backend()


def _u64(x):
    return np.uint64(x)


def scan_poison(raw, tags, lo, hi, probe_lo, probe_hi, backend=None):
    backend = backend or BACKEND
    if backend == "numba":
        e, p, idx = scan_poison_numba(raw, tags, lo, hi, _u64(probe_lo), _u64(probe_hi))
        return int(e), int(p), idx
    return scan_poison_numpy(raw, tags, lo, hi, probe_lo, probe_hi)


def scan_shadow(raw, tags, lo, hi, bits, cov_base, cov_len, backend=None):
    backend = backend or BACKEND
    if backend == "numba":
        e, p, idx = scan_shadow_numba(raw, tags, lo, hi, bits, _u64(cov_base), _u64(cov_len))
        return int(e), int(p), idx
    return scan_shadow_numpy(raw, tags, lo, hi, bits, cov_base, cov_len)


def replay(*args, backend=None):
    backend = backend or BACKEND
    if backend == "numba":
        return replay_numba(*args)
    return replay_python(*args)
