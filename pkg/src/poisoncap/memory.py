"""Tagged word memory and the poison access-decision semantics.

Every 16-byte word carries an out-of-band tag.  A tagged word holds either a
capability or a poison capability; an untagged word is plain data.  The
decision matrix in :func:`check_access` is the single place where poison
semantics live; every memory instruction below routes through it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .cap_model import (
    FLAG_POISON,
    NULL_CAP,
    WORD_BYTES,
    Capability,
    Decoded,
    Perm,
    PoisonWord,
    WordImage,
    bounds_contains,
    decode,
    encode,
)
from .errors import Trap, TrapKind

VALID_WIDTHS = (1, 2, 4, 8, 16)


class Access(enum.Enum):
    READ = "read"
    WRITE = "write"


class LoadMode(enum.Enum):
    TRAP = "trap"
    SILENT_ZERO = "silent_zero"


class StoreMode(enum.Enum):
    TRAP = "trap"
    CANCEL = "cancel"


class UninitMode(enum.Enum):
    TRAP = "trap"
    ZERO = "zero"


@dataclass(frozen=True)
class SemanticsConfig:
    uaf_load_mode: LoadMode = LoadMode.TRAP
    uaf_store_mode: StoreMode = StoreMode.TRAP
    uninit_read_mode: UninitMode = UninitMode.TRAP

    @classmethod
    def preset(cls, mode: str) -> "SemanticsConfig":
        try:
            return PRESETS[mode]
        except KeyError:
            raise ValueError(f"unknown semantics mode {mode!r}") from None

    def to_dict(self) -> dict:
        return {
            "uaf_load_mode": self.uaf_load_mode.value,
            "uaf_store_mode": self.uaf_store_mode.value,
            "uninit_read_mode": self.uninit_read_mode.value,
        }


STRICT = SemanticsConfig()
HARDWARE = SemanticsConfig(LoadMode.TRAP, StoreMode.CANCEL, UninitMode.TRAP)
LEGACY = SemanticsConfig(LoadMode.SILENT_ZERO, StoreMode.CANCEL, UninitMode.ZERO)
PRESETS = {"strict": STRICT, "hardware": HARDWARE, "legacy": LEGACY}


class Action(enum.Enum):
    ALLOW = "allow"
    ALLOW_AUTO_ZERO = "allow_auto_zero"
    # read completes but returns zeros (silent UAF load, zero-on-uninit read)
    ZERO_READ = "zero_read"
    CANCEL = "cancel"
    TRAP = "trap"


@dataclass(frozen=True)
class AccessDecision:
    action: Action
    trap: Optional[TrapKind] = None

    def __str__(self):
        return f"Trap({self.trap.value})" if self.trap else self.action.value


ALLOW = AccessDecision(Action.ALLOW)
ALLOW_AUTO_ZERO = AccessDecision(Action.ALLOW_AUTO_ZERO)
ZERO_READ = AccessDecision(Action.ZERO_READ)
CANCEL = AccessDecision(Action.CANCEL)


def trap(kind: TrapKind) -> AccessDecision:
    return AccessDecision(Action.TRAP, kind)


class StoreResult(enum.Enum):
    STORED = "stored"
    CANCELLED = "cancelled"


class CapClass(enum.Enum):
    NOT_CAP = "NotCap"
    CAP = "Cap"
    POISON_CAP = "PoisonCap"


def bounds_relation(cap_bounds, poison_bounds) -> str:
    """Relation of an authorising capability's bounds to a poison word's."""
    if cap_bounds == poison_bounds:
        return "equal"
    if bounds_contains(cap_bounds, poison_bounds):
        return "strict_superset"
    if bounds_contains(poison_bounds, cap_bounds):
        return "subset"
    return "overlap"


def matrix_row(cap: Capability, poison: PoisonWord, kind: Access) -> tuple:
    """Truth-table row key: (perm_poison, bounds relation, version equal, kind)."""
    return (
        Perm.POISON in cap.perms,
        bounds_relation(cap.bounds, poison.poison_bounds),
        cap.version == poison.poison_version,
        kind.value,
    )


def check_access(
    cap: Capability,
    addr: int,
    width: int,
    kind: Access,
    word: Decoded,
    cfg: SemanticsConfig = STRICT,
    extra_perms: Perm = Perm.NONE,
) -> AccessDecision:
    if not cap.tag:
        return trap(TrapKind.TAG_VIOLATION)
    b = cap.bounds
    if addr < b.base or addr + width > b.base + b.length:
        return trap(TrapKind.BOUNDS_VIOLATION)
    perms = int(cap.perms)
    need = (_READ if kind is Access.READ else _WRITE) | int(extra_perms)
    if need & ~perms:
        return trap(TrapKind.PERMISSION_VIOLATION)
    if not isinstance(word, PoisonWord):
        return ALLOW
    if perms & _POISON:
        return ALLOW
    if bounds_contains(b, word.poison_bounds) and b != word.poison_bounds:
        return ALLOW
    if cap.version == word.poison_version:
        if kind is Access.READ:
            if cfg.uaf_load_mode is LoadMode.TRAP:
                return trap(TrapKind.USE_AFTER_FREE)
            return ZERO_READ
        if cfg.uaf_store_mode is StoreMode.TRAP:
            return trap(TrapKind.USE_AFTER_FREE)
        return CANCEL
    if kind is Access.READ:
        if cfg.uninit_read_mode is UninitMode.TRAP:
            return trap(TrapKind.UNINITIALISED_READ)
        return ZERO_READ
    return ALLOW_AUTO_ZERO


_READ, _WRITE, _POISON = int(Perm.READ), int(Perm.WRITE), int(Perm.POISON)

# observer(word_index, access, word_is_poison_after)
Observer = Callable[[int, Access, bool], None]


class TaggedMemory:
    """A flat array of 16-byte words with one tag bit each.

    ``raw`` is an ``(nwords, 16)`` uint8 array and ``tags`` a bool array, both
    exposed so the revocation kernels can scan them without decoding.
    """

    def __init__(self, size: int, cfg: SemanticsConfig = STRICT):
        if size <= 0 or size % WORD_BYTES:
            raise ValueError("memory size must be a positive multiple of 16")
        self.size = size
        self.cfg = cfg
        self.raw = np.zeros((size // WORD_BYTES, WORD_BYTES), dtype=np.uint8)
        self.tags = np.zeros(size // WORD_BYTES, dtype=np.bool_)
        self.epoch = 0
        self.cancelled_stores = 0
        self.observers: list[Observer] = []
        self.decision_log: Optional[list] = None

    @property
    def nwords(self) -> int:
        return len(self.tags)

    # -- raw word plumbing -------------------------------------------------

    def image(self, index: int) -> WordImage:
        return WordImage(self.raw[index].tobytes(), bool(self.tags[index]))

    def word(self, index: int) -> Decoded:
        if not self.tags[index]:
            return self.raw[index].tobytes()
        return decode(self.image(index))

    def is_poison(self, index: int) -> bool:
        return bool(self.tags[index]) and bool(self.raw[index, 15] & FLAG_POISON)

    def _commit(self, index: int, raw: bytes, tag: bool) -> None:
        self.raw[index] = np.frombuffer(raw, dtype=np.uint8)
        self.tags[index] = tag
        if self.observers:
            poison = self.is_poison(index)
            for obs in self.observers:
                obs(index, Access.WRITE, poison)

    def _observe_read(self, index: int) -> None:
        if self.observers:
            poison = self.is_poison(index)
            for obs in self.observers:
                obs(index, Access.READ, poison)

    def clear_tag(self, index: int) -> None:
        """Revocation: invalidate the capability held in a word in place."""
        self.tags[index] = False

    def _index(self, addr: int) -> int:
        if not 0 <= addr < self.size:
            raise Trap(TrapKind.BOUNDS_VIOLATION, f"address {addr:#x} outside memory")
        return addr // WORD_BYTES

    def _decide(self, cap, addr, width, kind, extra=Perm.NONE):
        index = self._index(addr)
        word = self.word(index)
        decision = check_access(cap, addr, width, kind, word, self.cfg, extra)
        if self.decision_log is not None and isinstance(word, PoisonWord) and cap.tag:
            if cap.bounds.covers(addr, width):
                self.decision_log.append((matrix_row(cap, word, kind), decision))
        return index, word, decision

    @staticmethod
    def _check_width(addr: int, width: int) -> None:
        if width not in VALID_WIDTHS:
            raise ValueError(f"width {width} not in {VALID_WIDTHS}")
        if addr % WORD_BYTES + width > WORD_BYTES:
            raise ValueError(f"access at {addr:#x} width {width} straddles a word")

    # -- data access -------------------------------------------------------

    def load(self, cap: Capability, addr: int, width: int) -> bytes:
        self._check_width(addr, width)
        index, _, decision = self._decide(cap, addr, width, Access.READ)
        if decision.action is Action.TRAP:
            raise Trap(decision.trap, f"load {addr:#x}")
        self._observe_read(index)
        if decision.action is Action.ZERO_READ:
            return bytes(width)
        off = addr % WORD_BYTES
        return self.raw[index, off : off + width].tobytes()

    def store(self, cap: Capability, addr: int, data: bytes) -> StoreResult:
        width = len(data)
        self._check_width(addr, width)
        index, _, decision = self._decide(cap, addr, width, Access.WRITE)
        if decision.action is Action.TRAP:
            raise Trap(decision.trap, f"store {addr:#x}")
        if decision.action is Action.CANCEL:
            self.cancelled_stores += 1
            return StoreResult.CANCELLED
        off = addr % WORD_BYTES
        if decision.action is Action.ALLOW_AUTO_ZERO:
            word = bytearray(WORD_BYTES)
        else:
            word = bytearray(self.raw[index].tobytes())
        word[off : off + width] = data
        self._commit(index, bytes(word), False)
        return StoreResult.STORED

    # -- capability access -------------------------------------------------

    def load_cap(self, cap: Capability, addr: int) -> Capability | PoisonWord:
        if addr % WORD_BYTES:
            raise Trap(TrapKind.BOUNDS_VIOLATION, f"misaligned capability load {addr:#x}")
        index, word, decision = self._decide(cap, addr, WORD_BYTES, Access.READ, Perm.LOAD_CAP)
        if decision.action is Action.TRAP:
            raise Trap(decision.trap, f"load_cap {addr:#x}")
        self._observe_read(index)
        if decision.action is Action.ZERO_READ or isinstance(word, bytes):
            return NULL_CAP
        return word

    def store_cap(self, cap: Capability, addr: int, value: Capability | PoisonWord) -> StoreResult:
        if addr % WORD_BYTES:
            raise Trap(TrapKind.BOUNDS_VIOLATION, f"misaligned capability store {addr:#x}")
        index, _, decision = self._decide(cap, addr, WORD_BYTES, Access.WRITE, Perm.STORE_CAP)
        if decision.action is Action.TRAP:
            raise Trap(decision.trap, f"store_cap {addr:#x}")
        if decision.action is Action.CANCEL:
            self.cancelled_stores += 1
            return StoreResult.CANCELLED
        tag = value.tag
        # copying poison around is a privileged operation
        if isinstance(value, PoisonWord) and Perm.POISON not in cap.perms:
            tag = False
        raw = encode(replace(value, tag=True)).raw
        self._commit(index, raw, tag)
        return StoreResult.STORED

    # -- poison instructions -----------------------------------------------

    def cpoison(self, cap: Capability, addr: int, nwords: int = 1) -> StoreResult:
        """Paint ``nwords`` words with poison carrying ``cap``'s bounds and version.

        All-or-nothing: every target word is checked before any is written.
        """
        if nwords < 1:
            raise ValueError("cpoison needs at least one word")
        if not cap.tag:
            raise Trap(TrapKind.TAG_VIOLATION, "cpoison")
        if addr % WORD_BYTES:
            raise Trap(TrapKind.BOUNDS_VIOLATION, f"misaligned cpoison {addr:#x}")
        if not cap.bounds.covers(addr, nwords * WORD_BYTES):
            raise Trap(TrapKind.BOUNDS_VIOLATION, f"cpoison {addr:#x}x{nwords} outside {cap.bounds}")
        indices = []
        for k in range(nwords):
            index, _, decision = self._decide(cap, addr + k * WORD_BYTES, WORD_BYTES, Access.WRITE)
            if decision.action is Action.TRAP:
                raise Trap(decision.trap, f"cpoison {addr + k * WORD_BYTES:#x}")
            if decision.action is Action.CANCEL:
                self.cancelled_stores += 1
                return StoreResult.CANCELLED
            indices.append(index)
        raw = encode(PoisonWord(cap.bounds, cap.version)).raw
        for index in indices:
            self._commit(index, raw, True)
        return StoreResult.STORED

    def _probe_checks(self, cap: Capability, addr: int) -> int:
        if not cap.tag:
            raise Trap(TrapKind.TAG_VIOLATION)
        if addr % WORD_BYTES or not cap.bounds.covers(addr):
            raise Trap(TrapKind.BOUNDS_VIOLATION, f"probe {addr:#x}")
        if Perm.READ not in cap.perms:
            raise Trap(TrapKind.PERMISSION_VIOLATION)
        return self._index(addr)

    def cgetpoison(self, cap: Capability, addr: int) -> bool:
        return self.is_poison(self._probe_checks(cap, addr))

    def cgetcappoison(self, cap: Capability, addr: int) -> CapClass:
        index = self._probe_checks(cap, addr)
        if not self.tags[index]:
            return CapClass.NOT_CAP
        return CapClass.POISON_CAP if self.is_poison(index) else CapClass.CAP

    # -- reporting ---------------------------------------------------------

    def dump(self, all_words: bool = False) -> list[str]:
        """One line per word: index, hex image, tag bit, decoded kind.

        Untagged all-zero words are skipped unless ``all_words`` is set.
        """
        lines = []
        nonzero = self.tags | self.raw.any(axis=1)
        for index in range(self.nwords):
            if not all_words and not nonzero[index]:
                continue
            word = self.word(index)
            kind = "poison" if isinstance(word, PoisonWord) else "cap" if isinstance(word, Capability) else "data"
            lines.append(f"{index:06x} {self.raw[index].tobytes().hex()} {int(self.tags[index])} {kind}")
        return lines
