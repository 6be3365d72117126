"""Scalar inner loops for the hot paths.

These are written in the numba-compatible subset (no helper calls, explicit
uint64 arithmetic) so :mod:`poisoncap._accel` can compile them with ``njit``.
Run un-jitted they serve as the interpreter reference for the cache replay.
"""

import numpy as np

U64_MAX = np.uint64(0xFFFFFFFFFFFFFFFF)


def scan_poison_loop(raw, tags, lo, hi, probe_lo, probe_hi):
    """Find capability words in ``[lo, hi)`` that point at matching poison.

    Returns ``(examined, probed, revoke)`` where ``revoke`` holds word indices.
    """
    nwords = raw.shape[0]
    out = np.empty(hi - lo, dtype=np.int64)
    n = 0
    examined = 0
    probed = 0
    for i in range(lo, hi):
        if not tags[i] or (raw[i, 15] & 1):
            continue
        examined += 1
        base = np.uint64(0)
        for j in range(8):
            base |= np.uint64(raw[i, j]) << np.uint64(8 * j)
        length = np.uint64(0)
        for j in range(6):
            length |= np.uint64(raw[i, 8 + j]) << np.uint64(8 * j)
        if length > U64_MAX - base:
            top = U64_MAX
        else:
            top = base + length
        if base < probe_lo or base >= probe_hi:
            continue
        w = np.int64(base >> np.uint64(4))
        if w >= nwords:
            continue
        probed += 1
        if not tags[w] or not (raw[w, 15] & 1):
            continue
        if raw[i, 14] & 0x10:
            continue
        if ((raw[i, 15] >> 1) & 1) != ((raw[w, 15] >> 1) & 1):
            continue
        pbase = np.uint64(0)
        for j in range(8):
            pbase |= np.uint64(raw[w, j]) << np.uint64(8 * j)
        plen = np.uint64(0)
        for j in range(6):
            plen |= np.uint64(raw[w, 8 + j]) << np.uint64(8 * j)
        if plen > U64_MAX - pbase:
            ptop = U64_MAX
        else:
            ptop = pbase + plen
        if pbase <= base and top <= ptop:
            out[n] = i
            n += 1
    return examined, probed, out[:n]


def scan_shadow_loop(raw, tags, lo, hi, bits, cov_base, cov_len):
    """Find capability words in ``[lo, hi)`` whose base granule is painted."""
    out = np.empty(hi - lo, dtype=np.int64)
    n = 0
    examined = 0
    probed = 0
    cov_top = cov_base + cov_len
    for i in range(lo, hi):
        if not tags[i] or (raw[i, 15] & 1):
            continue
        examined += 1
        base = np.uint64(0)
        for j in range(8):
            base |= np.uint64(raw[i, j]) << np.uint64(8 * j)
        if base < cov_base or base >= cov_top:
            continue
        probed += 1
        g = np.int64((base - cov_base) >> np.uint64(4))
        if (bits[g >> 3] >> (g & 7)) & 1:
            out[n] = i
            n += 1
    return examined, probed, out[:n]


def replay_loop(
    addrs, writes, effects, poison_map,
    l1_line, l1_dirty, l1_pois, l1_stamp,
    ll_line, ll_dirty, ll_pois, ll_stamp,
    line_bytes, policy, stats, clock, codes,
):
    """Replay a trace through an inclusive two-level writeback cache.

    ``effects[k]`` is -1 (no poison change), 0 (word no longer poison) or
    1 (word now poison).  ``policy`` 1 prefers evicting fully-poisoned lines.
    ``stats`` rows are levels, columns hits/misses/writebacks/fills.
    ``codes[k]`` receives 0 for an L1 hit, 1 for an LLC hit, 2 for a miss.
    """
    l1_sets, l1_ways = l1_line.shape
    ll_sets, ll_ways = ll_line.shape
    wpl = line_bytes // 16
    for k in range(addrs.shape[0]):
        addr = addrs[k]
        is_write = writes[k] != 0
        if is_write and effects[k] >= 0:
            poison_map[addr // 16] = effects[k] == 1
        line = addr // line_bytes
        first = line * wpl
        full = True
        for q in range(wpl):
            if not poison_map[first + q]:
                full = False
                break
        clock[0] += 1
        now = clock[0]

        s1 = line % l1_sets
        way1 = -1
        for w in range(l1_ways):
            if l1_line[s1, w] == line:
                way1 = w
                break
        s2 = line % ll_sets
        if way1 >= 0:
            stats[0, 0] += 1
            codes[k] = 0
        else:
            stats[0, 1] += 1
            way2 = -1
            for w in range(ll_ways):
                if ll_line[s2, w] == line:
                    way2 = w
                    break
            if way2 >= 0:
                stats[1, 0] += 1
                codes[k] = 1
            else:
                stats[1, 1] += 1
                stats[1, 3] += 1
                codes[k] = 2
                # LLC victim: empty way, else (poisoned-)LRU
                v = -1
                for w in range(ll_ways):
                    if ll_line[s2, w] < 0:
                        v = w
                        break
                if v < 0:
                    if policy == 1:
                        best = -1
                        for w in range(ll_ways):
                            if ll_pois[s2, w] and (best < 0 or ll_stamp[s2, w] < ll_stamp[s2, best]):
                                best = w
                        v = best
                    if v < 0:
                        v = 0
                        for w in range(1, ll_ways):
                            if ll_stamp[s2, w] < ll_stamp[s2, v]:
                                v = w
                    old = ll_line[s2, v]
                    dirty = ll_dirty[s2, v]
                    # back-invalidate the L1 copy to stay inclusive
                    os1 = old % l1_sets
                    for w in range(l1_ways):
                        if l1_line[os1, w] == old:
                            if l1_dirty[os1, w]:
                                dirty = True
                            l1_line[os1, w] = -1
                            l1_dirty[os1, w] = False
                            l1_pois[os1, w] = False
                            break
                    if dirty:
                        stats[1, 2] += 1
                way2 = v
                ll_line[s2, way2] = line
                ll_dirty[s2, way2] = False
                ll_pois[s2, way2] = full
            ll_stamp[s2, way2] = now

            # L1 fill
            stats[0, 3] += 1
            v = -1
            for w in range(l1_ways):
                if l1_line[s1, w] < 0:
                    v = w
                    break
            if v < 0:
                if policy == 1:
                    best = -1
                    for w in range(l1_ways):
                        if l1_pois[s1, w] and (best < 0 or l1_stamp[s1, w] < l1_stamp[s1, best]):
                            best = w
                    v = best
                if v < 0:
                    v = 0
                    for w in range(1, l1_ways):
                        if l1_stamp[s1, w] < l1_stamp[s1, v]:
                            v = w
                if l1_dirty[s1, v]:
                    stats[0, 2] += 1
                    old = l1_line[s1, v]
                    os2 = old % ll_sets
                    for w in range(ll_ways):
                        if ll_line[os2, w] == old:
                            ll_dirty[os2, w] = True
                            break
            way1 = v
            l1_line[s1, way1] = line
            l1_dirty[s1, way1] = False
            l1_pois[s1, way1] = full

        l1_stamp[s1, way1] = now
        if is_write:
            l1_dirty[s1, way1] = True
            l1_pois[s1, way1] = full
            for w in range(ll_ways):
                if ll_line[s2, w] == line:
                    ll_pois[s2, w] = full
                    break
