from poisoncap.alloc import Heap, HeapConfig
from poisoncap.cap_model import Bounds, root_capability
from poisoncap.memory import STRICT, TaggedMemory
from poisoncap.revoker import RootSet, sweep_poison, sweep_shadow

HEAP_BASE = 0x1000


def make_heap(size=0x10000, cfg=STRICT, **kw):
    mem = TaggedMemory(HEAP_BASE + size, cfg)
    root = root_capability(mem.size)
    heap = Heap(mem, root, HeapConfig(Bounds(HEAP_BASE, size), **kw))
    return mem, root, heap


def sweep(mem, root, heap, registers=None):
    roots = RootSet(registers if registers is not None else {}, [Bounds(0, mem.size)])
    if heap.scheme == "shadow":
        return sweep_shadow(mem, roots, heap.shadow)
    return sweep_poison(mem, roots, root)


def revoke_and_flush(mem, root, heap, registers=None, layers=None):
    report = sweep(mem, root, heap, registers)
    for layer in layers or [heap]:
        layer.quarantine_flush(report)
    return report


def fuzz_state(seed, size=0x4000):
    """Random heap history with capabilities scattered through registers and memory.

    Returns ``(mem, root, heap, registers)``; nothing has been swept yet
    since the last frees, so dangling capabilities are present.
    """
    import random

    from poisoncap.cap_model import Perm, clear_perm, set_bounds, set_version

    rng = random.Random(seed)
    mem, root, heap = make_heap(size=size)
    live, pool = [], [heap.slab_cap, root]
    for _ in range(rng.randint(10, 50)):
        r = rng.random()
        if r < 0.45 or not live:
            try:
                cap = heap.malloc(rng.choice((16, 32, 64, 100, 256)))
            except Exception:
                continue
            live.append(cap)
            pool.append(cap)
            for addr in range(cap.base, cap.bounds.top, 16):
                mem.store(cap, addr, rng.getrandbits(64).to_bytes(8, "little"))
        elif r < 0.8:
            heap.free(live.pop(rng.randrange(len(live))))
        elif r < 0.9 and heap.quarantine.entries:
            revoke_and_flush(mem, root, heap, {f"r{i}": c for i, c in enumerate(pool)})
            pool = [c for c in pool if c.tag]
        else:
            src = rng.choice(pool)
            if not src.tag or src.length < 16:
                continue
            off = rng.randrange(0, src.length, 8)
            sub = set_bounds(src, Bounds(src.base + off, rng.randint(1, src.length - off)))
            if rng.random() < 0.3:
                wide = set_bounds(root, sub.bounds)
                sub = clear_perm(set_version(wide, rng.randrange(2)), Perm.POISON if rng.random() < 0.8 else Perm.NONE)
            pool.append(sub)
    # scatter copies into live memory through the root
    for cap in live:
        for addr in range(cap.base, cap.bounds.top, 16):
            if rng.random() < 0.5:
                mem.store_cap(root, addr, rng.choice(pool))
    registers = {f"r{i}": c for i, c in enumerate(pool) if rng.random() < 0.7}
    registers["root"] = root
    return mem, root, heap, registers


def reachable_caps(mem, registers):
    from poisoncap.cap_model import Capability

    out = [("reg", name, c) for name, c in registers.items() if isinstance(c, Capability) and c.tag]
    for i in range(mem.nwords):
        if mem.tags[i]:
            w = mem.word(i)
            if isinstance(w, Capability):
                out.append(("mem", i * 16, w))
    return out


def independent_should_revoke(mem, cap):
    """Revocation predicate written out longhand against raw memory."""
    from poisoncap.cap_model import Perm, PoisonWord

    index = (cap.base - cap.base % 16) // 16
    if index >= mem.nwords:
        return False
    w = mem.word(index)
    if not isinstance(w, PoisonWord):
        return False
    pb = w.poison_bounds
    inside = pb.base <= cap.base and cap.base + cap.length <= pb.base + pb.length
    return inside and w.poison_version == cap.version and not (cap.perms & Perm.POISON)
