"""Allocation-churn workloads for the cache-policy experiments.

The workload runs a real heap on tagged memory and records every committed
word access as a cache trace.  A hot, long-lived buffer is revisited after
each burst of short-lived allocations; the bursts are freed (poisoned) before
the hot buffer is touched again, so their lines sit in the cache as dead data.

``variant="zero"`` runs the same program on the zeroing baseline allocator
(zero on free and on reallocation, no poison), which leaves nothing for the
poison-aware policy to prefer.
"""

from __future__ import annotations

import random

from .alloc import EAGER_ZERO, LAZY_DETOX, Heap, HeapConfig
from .cachesim import Trace, TraceRecorder
from .cap_model import WORD_BYTES, Bounds, root_capability
from .memory import TaggedMemory
from .revoker import RootSet, sweep_poison, sweep_shadow

HEAP_BASE = 0x1000
HEAP_BYTES = 0x10000
LINE = 64


def churn_trace(
    seed: int,
    variant: str = "poison",
    iterations: int = 120,
    adversarial: bool = False,
) -> Trace:
    if variant not in ("poison", "zero"):
        raise ValueError(f"unknown churn variant {variant!r}")
    rng = random.Random(seed)
    mem = TaggedMemory(HEAP_BASE + HEAP_BYTES)
    root = root_capability(mem.size)
    poison = variant == "poison"
    heap = Heap(mem, root, HeapConfig(
        Bounds(HEAP_BASE, HEAP_BYTES),
        realloc_policy=LAZY_DETOX if poison else EAGER_ZERO,
        scheme="poison" if poison else "shadow",
        zero_on_free=not poison,
    ))
    recorder = TraceRecorder()
    mem.observers.append(recorder)
    handles: dict = {}

    def revoke(layer):
        roots = RootSet(handles, [Bounds(0, mem.size)])
        report = sweep_poison(mem, roots, root) if poison else sweep_shadow(mem, roots, heap.shadow)
        layer.quarantine_flush(report)

    heap.on_revocation_request = revoke

    # adversarial: hot set plus one burst just overflows the desk LLC
    hot_bytes = 7 * 1024 if adversarial else rng.choice((3, 4, 5, 6)) * 1024
    hot = heap.malloc(hot_bytes)
    handles["hot"] = hot
    for addr in range(hot.base, hot.bounds.top, WORD_BYTES):
        mem.store(hot, addr, rng.getrandbits(64).to_bytes(8, "little"))

    for _ in range(iterations):
        if adversarial:
            sizes = [512, 512, 512, 512]
        else:
            sizes = [rng.choice((48, 64, 128, 192, 256, 384, 512)) for _ in range(rng.randint(2, 6))]
        chunks = []
        for size in sizes:
            cap = heap.malloc(size)
            for addr in range(cap.base, cap.bounds.top, WORD_BYTES):
                mem.store(cap, addr, rng.getrandbits(64).to_bytes(8, "little"))
            chunks.append(cap)
        for cap in chunks:
            for addr in range(cap.base, cap.bounds.top, WORD_BYTES):
                mem.load(cap, addr, 8)
        for cap in chunks:
            heap.free(cap)
        stride = LINE if adversarial else rng.choice((LINE, LINE, 2 * LINE))
        for addr in range(hot.base, hot.bounds.top, stride):
            mem.load(hot, addr, 8)
            if adversarial or rng.random() < 0.5:
                mem.store(hot, addr, rng.getrandbits(64).to_bytes(8, "little"))
    return recorder.trace()
