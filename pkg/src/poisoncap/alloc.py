"""Allocator stack: a quarantining heap and a nested buddy arena.

Both layers poison on free, flip the 1-bit memory version on reuse and hold
freed memory in quarantine until a revocation sweep has covered them.  All
allocator metadata lives in Python structures, never inside freed memory.

The heap can also run as a shadow-bitmap baseline (``scheme="shadow"``): no
poisoning, frees paint a :class:`~poisoncap.revoker.ShadowBitmap` instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cap_model import (
    DATA_PERMS,
    WORD_BYTES,
    Bounds,
    Capability,
    Perm,
    PoisonWord,
    bounds_contains,
    clear_perm,
    set_bounds,
    set_version,
)
from .errors import (
    ConfigError,
    DoubleFree,
    InvalidFree,
    MonotonicityViolation,
    NestedUnsupportedByBaseline,
    OutOfMemory,
    PermissionViolation,
    StaleSweep,
    TagViolation,
)
from .memory import StoreResult, TaggedMemory
from .revoker import ShadowBitmap, SweepReport

LAZY_DETOX = "lazy_detox"
EAGER_ZERO = "eager_zero"


def round_up(n: int, granule: int = WORD_BYTES) -> int:
    return -(-n // granule) * granule


@dataclass
class HeapConfig:
    heap_bounds: Bounds
    quarantine_threshold_pct: float = 25.0
    realloc_policy: str = LAZY_DETOX
    fresh_poison_version: int = 0
    # "poison" or the shadow-bitmap baseline "shadow"
    scheme: str = "poison"
    zero_on_free: bool = False

    def validate(self) -> None:
        if not 0 < self.quarantine_threshold_pct <= 100:
            raise ConfigError("quarantine threshold must be in (0, 100]")
        if self.heap_bounds.base % WORD_BYTES or self.heap_bounds.length % WORD_BYTES:
            raise ConfigError("heap bounds must be 16-byte aligned")
        if self.heap_bounds.length == 0:
            raise ConfigError("empty heap")
        if self.realloc_policy not in (LAZY_DETOX, EAGER_ZERO):
            raise ConfigError(f"unknown realloc policy {self.realloc_policy!r}")
        if self.fresh_poison_version not in (0, 1):
            raise ConfigError("fresh poison version is one bit")
        if self.scheme not in ("poison", "shadow"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")


class AllocState(enum.Enum):
    LIVE = "live"
    QUARANTINED = "quarantined"
    RECYCLED = "recycled"


@dataclass
class Allocation:
    cap: Capability
    state: AllocState = AllocState.LIVE

    @property
    def bounds(self) -> Bounds:
        return self.cap.bounds


@dataclass
class Quarantine:
    entries: list = field(default_factory=list)
    bytes: int = 0

    def add(self, a: Allocation) -> None:
        self.entries.append(a)
        self.bytes += a.bounds.length

    def drain(self) -> list:
        out, self.entries, self.bytes = self.entries, [], 0
        return out


@dataclass
class AllocStats:
    live_bytes: int = 0
    quarantine_bytes: int = 0
    sweeps_triggered: int = 0
    double_frees: int = 0
    version_flips: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class _Layer:
    """Shared poison-on-free / quarantine / flush logic for one allocation layer."""

    scheme = "poison"

    def __init__(self, mem: TaggedMemory, layer_cap: Capability, reversion, threshold_pct, realloc_policy, fresh_version):
        self.mem = mem
        self.layer_cap = layer_cap
        self._reversion = reversion
        self.threshold_pct = threshold_pct
        self.realloc_policy = realloc_policy
        self.fresh_version = fresh_version
        self.live: dict[int, Allocation] = {}
        self.quarantine = Quarantine()
        self.stats = AllocStats()
        self.revocation_requested = False
        self.on_revocation_request: Optional[Callable[["_Layer"], None]] = None
        self._last_free_epoch: Optional[int] = None
        granules = layer_cap.length // WORD_BYTES
        self._ever_used = np.zeros(granules, dtype=np.bool_)

    @property
    def bounds(self) -> Bounds:
        return self.layer_cap.bounds

    # placement policy hooks
    def _place(self, size: int) -> tuple[int, int, int]:
        raise NotImplementedError

    def _release(self, base: int, length: int, version: int) -> None:
        raise NotImplementedError

    def _round(self, size: int) -> int:
        return round_up(size)

    # -- malloc --------------------------------------------------------------

    def malloc(self, size: int) -> Capability:
        if size < 1:
            raise ValueError("allocation size must be at least 1")
        length = self._round(size)
        base, length, prev_version = self._place(length)
        bounds = Bounds(base, length)
        g0 = (base - self.bounds.base) // WORD_BYTES
        recycled = bool(self._ever_used[g0 : g0 + length // WORD_BYTES].any())
        if self.scheme == "poison":
            self._prepare(bounds, prev_version)
            if recycled:
                self.stats.version_flips += 1
        elif self.realloc_policy == EAGER_ZERO:
            self._zero(bounds)
        version = 1 - prev_version
        cap = self._reversion(set_bounds(self.layer_cap, bounds), version)
        cap = clear_perm(cap, Perm.POISON)
        self.live[base] = Allocation(cap)
        self._ever_used[g0 : g0 + length // WORD_BYTES] = True
        self.stats.live_bytes += length
        return cap

    def _zero(self, bounds: Bounds) -> None:
        for addr in range(bounds.base, bounds.top, WORD_BYTES):
            self.mem.store(self.layer_cap, addr, bytes(WORD_BYTES))

    def _prepare(self, bounds: Bounds, version: int) -> None:
        """Bring every word of a carved region to poison(bounds, version).

        Words already carrying exactly that poison are left alone; other
        poison is detoxed through the wider layer capability first.  Under
        eager zeroing the region is then scrubbed to zeros.
        """
        if self.realloc_policy == EAGER_ZERO:
            self._zero(bounds)
            return
        want = PoisonWord(bounds, version)
        temp = self._reversion(set_bounds(self.layer_cap, bounds), version)
        for addr in range(bounds.base, bounds.top, WORD_BYTES):
            index = addr // WORD_BYTES
            word = self.mem.word(index)
            if word == want:
                continue
            if isinstance(word, PoisonWord):
                self.mem.store(self.layer_cap, addr, bytes(WORD_BYTES))
            self.mem.cpoison(temp, addr, 1)

    # -- free ----------------------------------------------------------------

    def _poisoned_as(self, cap: Capability) -> bool:
        """Base-word probe: is ``cap``'s allocation already freed?"""
        if not self.mem.cgetpoison(self.layer_cap, cap.base):
            return False
        word = self.mem.word(cap.base // WORD_BYTES)
        return word.poison_bounds == cap.bounds and word.poison_version == cap.version

    def _check_double_free(self, cap: Capability) -> None:
        if self._poisoned_as(cap):
            self.stats.double_frees += 1
            raise DoubleFree(f"{cap.bounds} already freed")

    def free(self, cap: Capability) -> None:
        if not cap.tag:
            raise InvalidFree("free of an untagged capability")
        if not bounds_contains(self.bounds, cap.bounds) or cap.base % WORD_BYTES:
            raise InvalidFree(f"{cap.bounds} is not from this allocator")
        self._check_double_free(cap)
        alloc = self.live.get(cap.base)
        if alloc is None or alloc.cap.bounds != cap.bounds or alloc.cap.version != cap.version:
            raise InvalidFree(f"{cap.bounds} does not name a live allocation")
        self._retire(alloc)
        del self.live[cap.base]
        alloc.state = AllocState.QUARANTINED
        self.quarantine.add(alloc)
        self.stats.live_bytes -= alloc.bounds.length
        self.stats.quarantine_bytes = self.quarantine.bytes
        self._last_free_epoch = self.mem.epoch
        if not self.revocation_requested and self.quarantine.bytes * 100 >= self.threshold_pct * self.bounds.length:
            self.revocation_requested = True
            self.stats.sweeps_triggered += 1
            if self.on_revocation_request is not None:
                self.on_revocation_request(self)

    def _retire(self, alloc: Allocation) -> None:
        result = self.mem.cpoison(alloc.cap, alloc.bounds.base, alloc.bounds.length // WORD_BYTES)
        assert result is StoreResult.STORED

    # -- quarantine ------------------------------------------------------------

    def quarantine_flush(self, sweep: Optional[SweepReport]) -> int:
        if sweep is None or sweep.kind != self.scheme:
            raise StaleSweep("flush needs a sweep by the matching revoker")
        if self._last_free_epoch is not None and sweep.epoch <= self._last_free_epoch:
            raise StaleSweep(f"sweep epoch {sweep.epoch} predates the last free")
        if not sweep.covers(self.bounds):
            raise StaleSweep(f"sweep did not cover {self.bounds}")
        recycled = 0
        for alloc in self.quarantine.drain():
            alloc.state = AllocState.RECYCLED
            self._unquarantine(alloc)
            self._release(alloc.bounds.base, alloc.bounds.length, alloc.cap.version)
            recycled += alloc.bounds.length
        self.stats.quarantine_bytes = 0
        self.revocation_requested = False
        return recycled

    def _unquarantine(self, alloc: Allocation) -> None:
        pass

    # -- introspection -----------------------------------------------------------

    def region_state(self, addr: int) -> str:
        """``live``, ``quarantined``, ``recycled`` (free, used before) or ``fresh``."""
        for a in self.live.values():
            if a.bounds.covers(addr):
                return "live"
        for a in self.quarantine.entries:
            if a.bounds.covers(addr):
                return "quarantined"
        g = (addr - self.bounds.base) // WORD_BYTES
        return "recycled" if self._ever_used[g] else "fresh"

    def reversion(self, cap: Capability, version: int) -> Capability:
        return self._reversion(cap, version)


class Heap(_Layer):
    """First-fit libc-style heap over a slab of memory."""

    def __init__(self, mem: TaggedMemory, root: Capability, cfg: HeapConfig):
        cfg.validate()
        if not root.tag:
            raise TagViolation("heap root is untagged")
        need = DATA_PERMS | (Perm.POISON if cfg.scheme == "poison" else Perm.NONE)
        if need & ~root.perms:
            raise PermissionViolation("heap root lacks required permissions")
        if not bounds_contains(root.bounds, cfg.heap_bounds):
            raise MonotonicityViolation(f"heap {cfg.heap_bounds} outside root {root.bounds}")
        if cfg.heap_bounds.top > mem.size:
            raise ConfigError("heap extends past simulated memory")
        self.cfg = cfg
        self.root = root
        self.scheme = cfg.scheme
        slab = clear_perm(set_bounds(root, cfg.heap_bounds), Perm.POISON)
        super().__init__(mem, slab, self._service_reversion, cfg.quarantine_threshold_pct, cfg.realloc_policy, cfg.fresh_poison_version)
        # free extents: [base, length, last poison version]
        self._extents: list[list[int]] = [[cfg.heap_bounds.base, cfg.heap_bounds.length, cfg.fresh_poison_version]]
        self.shadow = ShadowBitmap(cfg.heap_bounds) if cfg.scheme == "shadow" else None

    def _service_reversion(self, cap: Capability, version: int) -> Capability:
        """Privileged re-derivation of ``cap`` with a new memory version."""
        if Perm.POISON not in self.root.perms:
            return cap
        fresh = set_version(set_bounds(self.root, cap.bounds), version)
        return clear_perm(fresh, ~cap.perms & Perm(0x1F))

    @property
    def slab_cap(self) -> Capability:
        return self.layer_cap

    def _place(self, length):
        if length >= self.bounds.length:
            raise OutOfMemory(f"{length} bytes would span the whole heap")
        for ext in self._extents:
            if ext[1] >= length:
                base, version = ext[0], ext[2]
                ext[0] += length
                ext[1] -= length
                if ext[1] == 0:
                    self._extents.remove(ext)
                return base, length, version
        raise OutOfMemory(f"no free extent of {length} bytes")

    def _release(self, base, length, version):
        self._extents.append([base, length, version])
        self._extents.sort()
        merged = [self._extents[0]]
        for ext in self._extents[1:]:
            last = merged[-1]
            # merging across versions would break per-address version alternation
            if last[0] + last[1] == ext[0] and last[2] == ext[2]:
                last[1] += ext[1]
            else:
                merged.append(ext)
        self._extents = merged

    # shadow baseline hooks

    def _check_double_free(self, cap):
        if self.scheme == "shadow":
            if self.shadow.is_painted(cap.base):
                self.stats.double_frees += 1
                raise DoubleFree(f"{cap.bounds} already painted")
            return
        super()._check_double_free(cap)

    def _retire(self, alloc):
        if self.scheme == "shadow":
            self.shadow.paint(alloc.bounds)
            if self.cfg.zero_on_free:
                self._zero(alloc.bounds)
            return
        super()._retire(alloc)

    def _unquarantine(self, alloc):
        if self.scheme == "shadow":
            self.shadow.unpaint(alloc.bounds)

    def arena_new(self, size: int) -> "ArenaAllocator":
        return ArenaAllocator(self, size)


def heap_new(mem: TaggedMemory, root: Capability, cfg: HeapConfig) -> Heap:
    return Heap(mem, root, cfg)


class ArenaAllocator(_Layer):
    """Buddy suballocator living inside one allocation of its parent heap.

    Poisoning and detox are authorised by the arena capability's wider
    bounds; the arena never holds ``POISON``.  Versions of suballocations are
    re-derived through the parent's privileged service.
    """

    MIN_BLOCK = WORD_BYTES

    def __init__(self, parent: Heap, size: int):
        if parent.scheme != "poison":
            raise NestedUnsupportedByBaseline("nested arenas need poison bounds")
        size = max(2 * self.MIN_BLOCK, 1 << (round_up(size) - 1).bit_length())
        arena_cap = parent.malloc(size)
        self.parent = parent
        self.order = size.bit_length() - 1
        self.min_order = self.MIN_BLOCK.bit_length() - 1
        super().__init__(
            parent.mem, arena_cap, parent.reversion, parent.threshold_pct, parent.realloc_policy, parent.fresh_version
        )
        # order -> list of (offset, last poison version); metadata kept outside the arena
        self._free: dict[int, list[tuple[int, int]]] = {o: [] for o in range(self.min_order, self.order + 1)}
        self._free[self.order].append((0, self.fresh_version))

    @property
    def arena_cap(self) -> Capability:
        return self.layer_cap

    def _round(self, size):
        return max(self.MIN_BLOCK, 1 << (size - 1).bit_length())

    def _place(self, length):
        want = length.bit_length() - 1
        # the whole arena is never handed out, keeping suballocations strictly inside
        for order in range(want, self.order):
            if self._free[order]:
                break
        else:
            if want < self.order and self._free[self.order]:
                order = self.order
            else:
                raise OutOfMemory(f"arena has no free {length}-byte block")
        self._free[order].sort()
        offset, version = self._free[order].pop(0)
        while order > want:
            order -= 1
            self._free[order].append((offset + (1 << order), version))
        return self.bounds.base + offset, length, version

    def _release(self, base, length, version):
        offset = base - self.bounds.base
        order = length.bit_length() - 1
        while order < self.order:
            buddy = offset ^ (1 << order)
            if (buddy, version) not in self._free[order]:
                break
            self._free[order].remove((buddy, version))
            offset = min(offset, buddy)
            order += 1
        self._free[order].append((offset, version))

    def arena_malloc(self, size: int) -> Capability:
        return self.malloc(size)

    def arena_free(self, cap: Capability) -> None:
        self.free(cap)


def arena_new(parent: Heap, size: int) -> ArenaAllocator:
    return ArenaAllocator(parent, size)
