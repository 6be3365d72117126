"""Stop-the-world revocation sweeps.

Two revokers share one root-set walk:

* :func:`sweep_poison` probes the word at each capability's base for poison
  and revokes when the poison bounds cover the capability and the versions
  match.  No side structure is needed.
* :func:`sweep_shadow` is the shadow-bitmap baseline: one bit per 16-byte
  granule, painted on free, consulted at each capability's base.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import MutableMapping, Optional

import numpy as np

from . import _accel
from .cap_model import WORD_BYTES, Bounds, Capability, Perm, PoisonWord, bounds_contains
from .errors import PermissionViolation, Trap, TrapKind
from .memory import Access, Action, TaggedMemory, check_access


@dataclass
class RootSet:
    """Register slots (mutated in place on revocation) and memory to scan."""

    registers: MutableMapping[str, object] = field(default_factory=dict)
    memory_regions: list[Bounds] = field(default_factory=list)


@dataclass
class SweepReport:
    kind: str
    epoch: int = 0
    caps_examined: int = 0
    caps_revoked: int = 0
    words_probed: int = 0
    shadow_bytes: int = 0
    regions: tuple = ()
    revoked: list = field(default_factory=list)

    def covers(self, bounds: Bounds) -> bool:
        return any(bounds_contains(r, bounds) for r in self.regions)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "epoch": self.epoch,
            "caps_examined": self.caps_examined,
            "caps_revoked": self.caps_revoked,
            "words_probed": self.words_probed,
            "shadow_bytes": self.shadow_bytes,
        }


def _word_range(mem: TaggedMemory, region: Bounds) -> tuple[int, int]:
    lo = region.base // WORD_BYTES
    hi = min(-(-region.top // WORD_BYTES), mem.nwords)
    return lo, max(lo, hi)


def probe_poison(mem: TaggedMemory, root: Capability, target: Capability) -> Optional[PoisonWord]:
    """Read the word at ``target``'s base (aligned down) through the privileged root."""
    if Perm.POISON not in root.perms:
        raise PermissionViolation("poison probe needs a POISON-bearing root")
    addr = target.base & ~(WORD_BYTES - 1)
    if not root.bounds.covers(addr, WORD_BYTES) or addr + WORD_BYTES > mem.size:
        raise Trap(TrapKind.BOUNDS_VIOLATION, f"probe {addr:#x} outside revoker root")
    index = addr // WORD_BYTES
    word = mem.word(index)
    decision = check_access(root, addr, WORD_BYTES, Access.READ, word, mem.cfg)
    assert decision.action is Action.ALLOW
    return word if isinstance(word, PoisonWord) else None


def should_revoke(target: Capability, poison: PoisonWord) -> bool:
    return (
        bounds_contains(poison.poison_bounds, target.bounds)
        and target.version == poison.poison_version
        and Perm.POISON not in target.perms
    )


def _live_register_caps(roots: RootSet):
    for name, cap in list(roots.registers.items()):
        if isinstance(cap, Capability) and cap.tag:
            yield name, cap


def sweep_poison(mem: TaggedMemory, roots: RootSet, privileged_root: Capability, backend=None) -> SweepReport:
    if Perm.POISON not in privileged_root.perms:
        raise PermissionViolation("revoker root lacks POISON")
    report = SweepReport("poison", regions=tuple(roots.memory_regions))
    probe_lo = privileged_root.base
    # roots are granule aligned, so a base below the top has its word inside
    probe_hi = min(privileged_root.bounds.top, mem.size)
    for name, cap in _live_register_caps(roots):
        report.caps_examined += 1
        if not probe_lo <= cap.base < probe_hi:
            continue
        report.words_probed += 1
        poison = probe_poison(mem, privileged_root, cap)
        if poison is not None and should_revoke(cap, poison):
            roots.registers[name] = cap.untagged()
            report.caps_revoked += 1
            report.revoked.append(("reg", name))
    for region in roots.memory_regions:
        lo, hi = _word_range(mem, region)
        examined, probed, idx = _accel.scan_poison(mem.raw, mem.tags, lo, hi, probe_lo, max(probe_lo, probe_hi), backend)
        report.caps_examined += examined
        report.words_probed += probed
        for i in idx.tolist():
            mem.clear_tag(i)
            report.revoked.append(("mem", i * WORD_BYTES))
        report.caps_revoked += len(idx)
    mem.epoch += 1
    report.epoch = mem.epoch
    return report


class ShadowBitmap:
    """One bit per 16-byte granule of ``covered``."""

    def __init__(self, covered: Bounds):
        if covered.base % WORD_BYTES or covered.length % (WORD_BYTES * 8):
            raise ValueError("shadow coverage must be a multiple of 128 bytes, 16-aligned")
        self.covered = covered
        self.bits = np.zeros(covered.length // (WORD_BYTES * 8), dtype=np.uint8)

    @property
    def shadow_bytes(self) -> int:
        return len(self.bits)

    def _granules(self, bounds: Bounds) -> np.ndarray:
        if not bounds_contains(self.covered, bounds):
            raise Trap(TrapKind.BOUNDS_VIOLATION, f"{bounds} outside shadow coverage")
        first = (bounds.base - self.covered.base) // WORD_BYTES
        last = -(-(bounds.top - self.covered.base) // WORD_BYTES)
        return np.arange(first, last, dtype=np.int64)

    def paint(self, bounds: Bounds) -> None:
        g = self._granules(bounds)
        np.bitwise_or.at(self.bits, g >> 3, (1 << (g & 7)).astype(np.uint8))

    def unpaint(self, bounds: Bounds) -> None:
        g = self._granules(bounds)
        np.bitwise_and.at(self.bits, g >> 3, (~(1 << (g & 7))).astype(np.uint8))

    def is_painted(self, addr: int) -> bool:
        if not self.covered.covers(addr):
            raise Trap(TrapKind.BOUNDS_VIOLATION, f"{addr:#x} outside shadow coverage")
        g = (addr - self.covered.base) // WORD_BYTES
        return bool((self.bits[g >> 3] >> (g & 7)) & 1)


def shadow_paint(bitmap: ShadowBitmap, bounds: Bounds) -> None:
    bitmap.paint(bounds)


def shadow_is_painted(bitmap: ShadowBitmap, addr: int) -> bool:
    return bitmap.is_painted(addr)


def sweep_shadow(mem: TaggedMemory, roots: RootSet, bitmap: ShadowBitmap, backend=None) -> SweepReport:
    report = SweepReport("shadow", regions=tuple(roots.memory_regions), shadow_bytes=bitmap.shadow_bytes)
    cov = bitmap.covered
    for name, cap in _live_register_caps(roots):
        report.caps_examined += 1
        if not cov.covers(cap.base):
            continue
        report.words_probed += 1
        if bitmap.is_painted(cap.base & ~(WORD_BYTES - 1)):
            roots.registers[name] = cap.untagged()
            report.caps_revoked += 1
            report.revoked.append(("reg", name))
    for region in roots.memory_regions:
        lo, hi = _word_range(mem, region)
        examined, probed, idx = _accel.scan_shadow(mem.raw, mem.tags, lo, hi, bitmap.bits, cov.base, cov.length, backend)
        report.caps_examined += examined
        report.words_probed += probed
        for i in idx.tolist():
            mem.clear_tag(i)
            report.revoked.append(("mem", i * WORD_BYTES))
        report.caps_revoked += len(idx)
    mem.epoch += 1
    report.epoch = mem.epoch
    return report
