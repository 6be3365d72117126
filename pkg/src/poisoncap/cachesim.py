"""Two-level inclusive cache model with poison-aware replacement.

Lines remember whether they hold *only* poison words.  Under the
``poison`` policy a set's victim is its least-recently-used poisoned line
when one exists, plain LRU otherwise.  Poison state is tracked per 16-byte
word in a side map fed by memory commits; the model only observes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .cap_model import WORD_BYTES
from .memory import Access

POLICIES = {"lru": 0, "poison": 1}


@dataclass(frozen=True)
class LevelGeometry:
    ways: int
    capacity: int

    def sets(self, line_bytes: int) -> int:
        if self.capacity % (self.ways * line_bytes):
            raise ValueError("capacity must be divisible by ways * line size")
        return self.capacity // (self.ways * line_bytes)


@dataclass(frozen=True)
class CacheGeometry:
    line_bytes: int = 64
    l1: LevelGeometry = LevelGeometry(4, 32 * 1024)
    llc: LevelGeometry = LevelGeometry(16, 1024 * 1024)

    @classmethod
    def preset(cls, name: str) -> "CacheGeometry":
        if name == "paper":
            return cls()
        if name == "desk":
            return cls(64, LevelGeometry(2, 1024), LevelGeometry(4, 8 * 1024))
        raise ValueError(f"unknown geometry {name!r}")


@dataclass
class LevelStats:
    hits: int = 0
    misses: int = 0
    writebacks: int = 0
    fills: int = 0
    dram_bytes: int = 0


@dataclass
class CacheStats:
    l1: LevelStats = field(default_factory=LevelStats)
    llc: LevelStats = field(default_factory=LevelStats)

    @property
    def total_misses(self) -> int:
        return self.l1.misses + self.llc.misses

    def rows(self, workload: str, policy: str) -> list[dict]:
        return [
            {"workload": workload, "policy": policy, "level": name, "hits": s.hits,
             "misses": s.misses, "writebacks": s.writebacks, "dram_bytes": s.dram_bytes}
            for name, s in (("l1", self.l1), ("llc", self.llc))
        ]

    def to_dict(self) -> dict:
        return {"l1": dict(self.l1.__dict__), "llc": dict(self.llc.__dict__)}


CSV_FIELDS = ["workload", "policy", "level", "hits", "misses", "writebacks", "dram_bytes"]


def stats_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


@dataclass
class Trace:
    addrs: np.ndarray
    writes: np.ndarray
    effects: np.ndarray

    @classmethod
    def empty(cls) -> "Trace":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.uint8), np.zeros(0, np.int8))

    @classmethod
    def from_records(cls, records) -> "Trace":
        """Build from ``(addr, kind, poison_after)``; ``poison_after`` None means no change."""
        recs = list(records)
        addrs = np.array([r[0] for r in recs], dtype=np.int64)
        writes = np.array([1 if r[1] in ("write", Access.WRITE) else 0 for r in recs], dtype=np.uint8)
        effects = np.array([-1 if r[2] is None else int(bool(r[2])) for r in recs], dtype=np.int8)
        return cls(addrs, writes, effects)

    def __len__(self):
        return len(self.addrs)


class TraceRecorder:
    """Memory observer turning committed accesses into a cache trace."""

    def __init__(self):
        self.addrs: list[int] = []
        self.writes: list[int] = []
        self.effects: list[int] = []
        self.enabled = True

    def __call__(self, index: int, access: Access, poison_after: bool) -> None:
        if not self.enabled:
            return
        self.addrs.append(index * WORD_BYTES)
        if access is Access.WRITE:
            self.writes.append(1)
            self.effects.append(int(poison_after))
        else:
            self.writes.append(0)
            self.effects.append(-1)

    def trace(self) -> Trace:
        return Trace(
            np.array(self.addrs, dtype=np.int64),
            np.array(self.writes, dtype=np.uint8),
            np.array(self.effects, dtype=np.int8),
        )


def victim_select(lines, poisoned, stamps, policy: str = "poison") -> int:
    """Victim way for one cache set.

    ``lines`` holds line numbers (negative = empty way).  An empty way wins;
    otherwise the oldest poisoned line under the poison policy, else the
    oldest line overall.
    """
    for w, line in enumerate(lines):
        if line < 0:
            return w
    if policy == "poison":
        cands = [w for w in range(len(lines)) if poisoned[w]]
        if cands:
            return min(cands, key=lambda w: stamps[w])
    return min(range(len(lines)), key=lambda w: stamps[w])


class CacheHierarchy:
    def __init__(self, geometry: CacheGeometry, memory_bytes: int, policy: str = "poison", backend=None):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        self.geometry = geometry
        self.policy = policy
        self.backend = backend
        lb = geometry.line_bytes
        if lb % WORD_BYTES:
            raise ValueError("line size must be a multiple of 16")
        nlines = -(-memory_bytes // lb)
        self.poison_map = np.zeros(nlines * (lb // WORD_BYTES), dtype=np.bool_)
        self.memory_bytes = memory_bytes
        self._levels = []
        for lvl in (geometry.l1, geometry.llc):
            shape = (lvl.sets(lb), lvl.ways)
            self._levels.append([
                np.full(shape, -1, dtype=np.int64),
                np.zeros(shape, dtype=np.bool_),
                np.zeros(shape, dtype=np.bool_),
                np.zeros(shape, dtype=np.int64),
            ])
        self._stats = np.zeros((2, 4), dtype=np.int64)
        self._clock = np.zeros(1, dtype=np.int64)

    def _replay(self, trace: Trace) -> np.ndarray:
        codes = np.zeros(len(trace), dtype=np.uint8)
        if len(trace):
            if trace.addrs.min() < 0 or trace.addrs.max() >= self.memory_bytes:
                raise ValueError("trace address outside simulated memory")
            (l1, l1d, l1p, l1s), (ll, lld, llp, lls) = self._levels
            _accel.replay(
                trace.addrs, trace.writes, trace.effects, self.poison_map,
                l1, l1d, l1p, l1s, ll, lld, llp, lls,
                self.geometry.line_bytes, POLICIES[self.policy], self._stats, self._clock, codes,
                backend=self.backend,
            )
        return codes

    def access(self, addr: int, kind: str | Access, word_is_poison_after: bool | None = None) -> dict:
        """One access; returns ``{"l1": "hit"|"miss", "llc": "hit"|"miss"|None}``."""
        trace = Trace.from_records([(addr, kind, word_is_poison_after if kind in ("write", Access.WRITE) else None)])
        code = int(self._replay(trace)[0])
        return {"l1": "hit" if code == 0 else "miss", "llc": None if code == 0 else ("hit" if code == 1 else "miss")}

    def run(self, trace: Trace) -> CacheStats:
        self._replay(trace)
        return self.stats

    @property
    def stats(self) -> CacheStats:
        lb = self.geometry.line_bytes
        s = self._stats
        l1 = LevelStats(int(s[0, 0]), int(s[0, 1]), int(s[0, 2]), int(s[0, 3]), 0)
        llc = LevelStats(int(s[1, 0]), int(s[1, 1]), int(s[1, 2]), int(s[1, 3]), lb * int(s[1, 3] + s[1, 2]))
        return CacheStats(l1, llc)

    def line_state(self, addr: int) -> dict:
        """Residency and flags of the line holding ``addr`` at each level."""
        line = addr // self.geometry.line_bytes
        out = {}
        for name, (lines, dirty, pois, _) in zip(("l1", "llc"), self._levels):
            s = line % lines.shape[0]
            hit = np.nonzero(lines[s] == line)[0]
            if len(hit):
                w = int(hit[0])
                out[name] = {"resident": True, "dirty": bool(dirty[s, w]), "poisoned": bool(pois[s, w])}
            else:
                out[name] = {"resident": False}
        return out

    def inclusive(self) -> bool:
        l1_lines = self._levels[0][0]
        llc = set(self._levels[1][0].ravel().tolist())
        return all(line in llc for line in l1_lines.ravel().tolist() if line >= 0)


def cache_access(hier: CacheHierarchy, addr: int, kind, word_is_poison_after=None) -> dict:
    return hier.access(addr, kind, word_is_poison_after)


def run_trace(hier: CacheHierarchy, trace: Trace) -> CacheStats:
    return hier.run(trace)
