"""Time the numba kernels against their fallbacks.

    python3 benchmarks/bench_kernels.py [--words N] [--repeat R]

Scans run over a synthetic memory image where a third of the words hold
capabilities and a tenth hold poison; the cache replay uses a churn trace.
Each row reports the best of R runs after one warm-up call (which absorbs
numba's JIT compile).
"""

import argparse
import time

import numpy as np

from poisoncap import _accel
from poisoncap.cachesim import CacheGeometry, CacheHierarchy
from poisoncap.churn import churn_trace


def synthetic_memory(nwords, seed=0):
    rng = np.random.default_rng(seed)
    raw = np.zeros((nwords, 16), dtype=np.uint8)
    tags = np.zeros(nwords, dtype=np.bool_)
    size = nwords * 16
    kind = rng.random(nwords)
    caps = kind < 0.33
    poison = (kind >= 0.33) & (kind < 0.43)
    base = (rng.integers(0, size // 2, nwords) & ~15).astype("<u8")
    length = (rng.integers(16, 4096, nwords) & ~15).astype("<u8")
    raw[:, 0:8] = base.view(np.uint8).reshape(-1, 8)
    raw[:, 8:14] = length.view(np.uint8).reshape(-1, 8)[:, 0:6]
    raw[:, 14] = np.where(caps, 0x0F, 0)
    raw[:, 15] = np.where(poison, 1, 0) | (rng.integers(0, 2, nwords) << 1)
    tags[caps | poison] = True
    bits = rng.integers(0, 256, size // 128, dtype=np.uint8)
    return raw, tags, bits


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--words", type=int, default=1 << 20, help="memory words to scan (16 bytes each)")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--iterations", type=int, default=60, help="churn iterations for the replay trace")
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    raw, tags, bits = synthetic_memory(args.words)
    n, size = args.words, args.words * 16
    rows = []
    for name, call in (
        ("scan_poison", lambda b: _accel.scan_poison(raw, tags, 0, n, 0, size, backend=b)),
        ("scan_shadow", lambda b: _accel.scan_shadow(raw, tags, 0, n, bits, 0, size, backend=b)),
    ):
        got = {b: call(b) for b in ("numpy", "numba")}
        assert got["numpy"][:2] == got["numba"][:2] and np.array_equal(got["numpy"][2], got["numba"][2])
        rows.append((name, f"{n} words", best_of(lambda: call("numpy"), args.repeat),
                     best_of(lambda: call("numba"), args.repeat)))

    trace = churn_trace(0, "poison", args.iterations)
    geo = CacheGeometry.preset("desk")

    def replay(b):
        return CacheHierarchy(geo, 0x11000, "poison", backend=b).run(trace)

    assert replay("numpy") == replay("numba")
    rows.append(("cache replay", f"{len(trace)} accesses", best_of(lambda: replay("numpy"), max(1, args.repeat // 2)),
                 best_of(lambda: replay("numba"), args.repeat)))

    print(f"{'kernel':<14} {'input':>18} {'fallback s':>12} {'numba s':>10} {'speedup':>8}")
    for name, what, slow, fast in rows:
        print(f"{name:<14} {what:>18} {slow:>12.4f} {fast:>10.4f} {slow / fast:>7.1f}x")


if __name__ == "__main__":
    main()
