"""Acceptance gate: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` (or plain ``pytest``; the
lines are written straight to the terminal).
"""

import random
import time

import numpy as np
import pytest

import matrix_oracle
from helpers import fuzz_state, independent_should_revoke, make_heap, reachable_caps, revoke_and_flush, sweep
from poisoncap.cachesim import CacheGeometry, CacheHierarchy
from poisoncap.cap_model import Capability
from poisoncap.churn import churn_trace
from poisoncap.errors import OutOfMemory, StaleSweep, Trap, TrapKind
from poisoncap.harness import CORPUS_DIR, compare_revokers, corpus_files, load_scenario, run_scenario
from poisoncap.memory import LEGACY

BASELINE = {"revoker": "shadow", "mode": "legacy"}


@pytest.fixture
def record(capsys):
    def _record(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return _record


def test_1_access_matrix_oracle(record):
    t0 = time.perf_counter()
    bad = matrix_oracle.mismatches()
    dt = time.perf_counter() - t0
    n = len(matrix_oracle.rows())
    record(1, n == 32 and not bad and dt < 1.0, f"{n} rows x 3 presets, {len(bad)} mismatches, {dt:.3f}s")


def test_2_mini_juliet_corpus(record):
    t0 = time.perf_counter()
    counts = {}
    missed, false_pos = [], []
    for path in corpus_files():
        sc = load_scenario(path)
        r = run_scenario(sc)
        bucket = "double_free" if sc.expect.verdict == "double_free" else sc.cls
        total, hit = counts.get(bucket, (0, 0))
        if sc.is_bad:
            counts[bucket] = (total + 1, hit + (r["status"] == "pass"))
            if r["status"] != "pass":
                missed.append(sc.name)
        else:
            counts[bucket] = (total + 1, hit + (r["observed"]["verdict"] == "ok"))
            if r["observed"]["verdict"] != "ok" or r["status"] != "pass":
                false_pos.append(sc.name)
    dt = time.perf_counter() - t0
    pre = [p for p in corpus_files() if "uaf_before_realloc" in load_scenario(p).tags]
    ok = not missed and not false_pos and dt < 10.0 and pre and all(counts.get(k, (0, 0))[0] for k in ("cwe416", "cwe457", "double_free", "good"))
    summary = ", ".join(f"{k} {h}/{t}" for k, (t, h) in sorted(counts.items()))
    record(2, ok, f"{summary}; missed={missed} false_positives={false_pos}; {dt:.2f}s")


def test_3_baseline_contrast(record):
    subset = [load_scenario(p) for p in corpus_files() if "uaf_before_realloc" in load_scenario(p).tags]
    poison = [run_scenario(sc)["detected"] for sc in subset]
    base = [run_scenario(sc, BASELINE)["detected"] for sc in subset]
    ok = len(subset) > 0 and all(poison) and not any(base)
    record(3, ok, f"{len(subset)} UAF-before-reallocation scenarios: poison detects {sum(poison)}, baseline detects {sum(base)}")


def test_4_revoker_differential(record):
    t0 = time.perf_counter()
    unequal, revoked, sweeps = [], 0, 0
    shadow_ok = True
    for seed in range(1000):
        r = compare_revokers(seed, 150)
        if r["verdict"] != "equal":
            unequal.append(seed)
        revoked += r["revoked"]
        sweeps += r["sweeps"]
        shadow_ok &= r["shadow_bytes"] == {"poison": 0, "shadow": 0x10000 // 128}
    dt = time.perf_counter() - t0
    ok = not unequal and shadow_ok and revoked > 0 and dt < 60.0
    record(4, ok, f"1000 workloads, {sweeps} sweeps, {revoked} revocations, unequal={unequal[:5]}, "
                  f"shadow bytes poison=0 baseline=512: {shadow_ok}; {dt:.1f}s")


def test_5_nested_hierarchy(record):
    sc = load_scenario(CORPUS_DIR / "nested" / "memsys5_nested.json")
    r = run_scenario(sc, keep_machine=True)
    m = r["_machine"]
    arena_name = "A"
    s, arena, slab = m.handles["s"], m.handles[arena_name], m.handles["heap"]
    stored = m.mem.word((arena.base + 0x200) // 16)
    snapshot = {
        "sub_register_tagged": s.tag,
        "sub_copy_in_memory_tagged": isinstance(stored, Capability) and stored.tag,
        "arena_tagged": arena.tag,
        "slab_tagged": slab.tag,
    }
    deref = True
    try:
        m.mem.load(arena, s.base, 8)
        m.mem.load(slab, s.base, 8)
        m.mem.load(arena, arena.base + 0x200, 8)
    except Trap:
        deref = False
    ok = (r["status"] == "pass" and not snapshot["sub_register_tagged"] and not snapshot["sub_copy_in_memory_tagged"]
          and snapshot["arena_tagged"] and snapshot["slab_tagged"] and deref)
    record(5, ok, f"post-sweep snapshot {snapshot}, arena/slab dereferenceable={deref}")


def test_6_sweep_soundness_completeness(record):
    unsound, imprecise, total_revoked = [], [], 0
    for seed in range(100):
        mem, root, heap, regs = fuzz_state(seed)
        before = reachable_caps(mem, regs)
        must = {(k, loc) for k, loc, c in before if independent_should_revoke(mem, c)}
        sweep(mem, root, heap, regs)
        after = reachable_caps(mem, regs)
        if any(independent_should_revoke(mem, c) for _, _, c in after):
            unsound.append(seed)
        lost = {(k, loc) for k, loc, _ in before} - {(k, loc) for k, loc, _ in after}
        if lost != must:
            imprecise.append(seed)
        total_revoked += len(lost)
    ok = not unsound and not imprecise and total_revoked > 0
    record(6, ok, f"100 fuzzed states, {total_revoked} revocations, unsound={unsound} imprecise={imprecise}")


def _epoch_discipline(seed, reuses):
    """Allocator history where every reuse of an address must follow a sweep."""
    rng = random.Random(seed)
    mem, root, heap = make_heap(size=0x1000)
    last = {}  # granule -> (version, epoch at malloc)
    live = []
    for _ in range(60):
        r = rng.random()
        if r < 0.5 or not live:
            try:
                cap = heap.malloc(rng.choice((16, 48, 128)))
            except OutOfMemory:
                revoke_and_flush(mem, root, heap)
                continue
            for g in range(cap.base // 16, cap.bounds.top // 16):
                if g in last:
                    pv, pe = last[g]
                    if pv == cap.version or mem.epoch <= pe:
                        return False
                    reuses[0] += 1
                last[g] = (cap.version, mem.epoch)
            live.append(cap)
        elif r < 0.85:
            heap.free(live.pop(rng.randrange(len(live))))
        else:
            try:
                heap.quarantine_flush(None)
                return False
            except StaleSweep:
                pass
            revoke_and_flush(mem, root, heap)
    return True


def test_7_initialisation_safety(record):
    checks = {}
    mem, root, heap = make_heap()
    p = heap.malloc(32)
    mem.store(p, p.base, (0xCAFEF00D).to_bytes(4, "little"))
    checks["write_then_read"] = mem.load(p, p.base, 4) == (0xCAFEF00D).to_bytes(4, "little")
    checks["narrow_write_zero_rest"] = mem.load(p, p.base + 4, 4) == bytes(4) and mem.load(p, p.base + 8, 8) == bytes(8)
    try:
        mem.load(p, p.base + 16, 8)
        checks["strict_read_before_write_traps"] = False
    except Trap as t:
        checks["strict_read_before_write_traps"] = t.kind is TrapKind.UNINITIALISED_READ
    lmem, lroot, lheap = make_heap(cfg=LEGACY)
    q = lheap.malloc(32)
    checks["legacy_read_before_write_zero"] = lmem.load(q, q.base, 8) == bytes(8)
    reuses = [0]
    checks["sweep_before_every_version_reuse"] = all(_epoch_discipline(s, reuses) for s in range(200)) and reuses[0] > 0
    record(7, all(checks.values()), f"{checks}; {reuses[0]} granule reuses checked")


def test_8_cache_policy(record):
    t0 = time.perf_counter()
    geo = CacheGeometry.preset("desk")
    worse = []
    for seed in range(12):
        tr = churn_trace(seed, "poison", iterations=60)
        lru = CacheHierarchy(geo, 0x11000, "lru").run(tr).total_misses
        pa = CacheHierarchy(geo, 0x11000, "poison").run(tr).total_misses
        if pa > lru:
            worse.append((seed, lru, pa))
    adv = churn_trace(0, "poison", iterations=120, adversarial=True)
    a_lru = CacheHierarchy(geo, 0x11000, "lru").run(adv).total_misses
    a_pa = CacheHierarchy(geo, 0x11000, "poison").run(adv).total_misses
    reduction = 1 - a_pa / a_lru
    identical = True
    for seed in range(3):
        tr = churn_trace(seed, "zero", iterations=60)
        assert not (tr.effects == 1).any()
        h1, h2 = CacheHierarchy(geo, 0x11000, "lru"), CacheHierarchy(geo, 0x11000, "poison")
        identical &= h1.run(tr) == h2.run(tr)
        identical &= all(np.array_equal(u, v) for x, y in zip(h1._levels, h2._levels) for u, v in zip(x, y))
    dt = time.perf_counter() - t0
    ok = not worse and reduction >= 0.05 and identical and dt < 60.0
    record(8, ok, f"12 churn seeds never worse (violations={worse}); adversarial misses {a_lru} -> {a_pa} "
                  f"({100 * reduction:.1f}% fewer); no-poison runs bit-identical={identical}; {dt:.1f}s")


def test_9_quarantine_trigger(record):
    mem, root, heap = make_heap(size=0x10000)
    fired = []
    heap.on_revocation_request = lambda layer: fired.append(layer.quarantine.bytes)
    caps = [heap.malloc(1000) for _ in range(20)]  # 1008 bytes each after rounding
    first = None
    for i, c in enumerate(caps):
        heap.free(c)
        if fired and first is None:
            first = i
    expected = next(i for i in range(20) if 1008 * (i + 1) >= 16 * 1024)
    ok = first == expected and fired == [1008 * (expected + 1)] and heap.stats.sweeps_triggered == 1
    record(9, ok, f"request fired at free #{None if first is None else first + 1} with {fired[:1]} bytes quarantined; "
                  f"first free reaching 16 KiB is #{expected + 1}")
