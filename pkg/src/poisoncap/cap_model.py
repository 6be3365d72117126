"""Capability and poison-capability values and their 16-byte + tag encoding.

Word layout (little-endian, 128 bits plus an out-of-band tag bit)::

    bytes 0..7    base
    bytes 8..13   length (48 bits)
    byte  14      permission bitmask
    byte  15      flags: bit0 = poison, bit1 = version

The same layout carries an ordinary capability and a poison capability; the
poison flag tells them apart.  Bounds are stored exactly (no compression).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Union

from .errors import EncodingRange, MonotonicityViolation, PermissionViolation, TagViolation

WORD_BYTES = 16
ADDR_MASK = (1 << 64) - 1
MAX_LENGTH = 1 << 48

FLAG_POISON = 0x01
FLAG_VERSION = 0x02


class Perm(enum.IntFlag):
    NONE = 0
    READ = 0x01
    WRITE = 0x02
    LOAD_CAP = 0x04
    STORE_CAP = 0x08
    POISON = 0x10


ALL_PERMS = Perm.READ | Perm.WRITE | Perm.LOAD_CAP | Perm.STORE_CAP | Perm.POISON
DATA_PERMS = Perm.READ | Perm.WRITE | Perm.LOAD_CAP | Perm.STORE_CAP


@dataclass(frozen=True)
class Bounds:
    base: int
    length: int

    def __post_init__(self):
        if not 0 <= self.base <= ADDR_MASK:
            raise ValueError(f"base {self.base:#x} is not a 64-bit address")
        if self.length < 0:
            raise ValueError("negative length")
        if self.base + self.length > ADDR_MASK + 1:
            raise ValueError("bounds overflow the address space")

    @property
    def top(self) -> int:
        return self.base + self.length

    def covers(self, addr: int, width: int = 1) -> bool:
        return self.base <= addr and addr + width <= self.top

    def overlaps(self, other: "Bounds") -> bool:
        return self.base < other.top and other.base < self.top

    def __str__(self):
        return f"[{self.base:#x},+{self.length:#x})"


@dataclass(frozen=True)
class Capability:
    bounds: Bounds
    perms: Perm
    version: int = 0
    tag: bool = True

    def __post_init__(self):
        if self.version not in (0, 1):
            raise ValueError("version is a single bit")

    @property
    def base(self) -> int:
        return self.bounds.base

    @property
    def length(self) -> int:
        return self.bounds.length

    def untagged(self) -> "Capability":
        return replace(self, tag=False)

    def __str__(self):
        perms = "|".join(p.name for p in Perm if p and p in self.perms) or "-"
        return f"cap{self.bounds} {perms} v{self.version}{'' if self.tag else ' (untagged)'}"


@dataclass(frozen=True)
class PoisonWord:
    """A poison capability resident in memory.

    Never authorises access.  ``poison_bounds`` records the allocation that was
    freed; words written by the poison instruction are always granule aligned.
    """

    poison_bounds: Bounds
    poison_version: int = 0
    tag: bool = True

    def __post_init__(self):
        if self.poison_version not in (0, 1):
            raise ValueError("poison version is a single bit")

    def __str__(self):
        return f"poison{self.poison_bounds} v{self.poison_version}"


@dataclass(frozen=True)
class WordImage:
    raw: bytes
    tag: bool = False

    def __post_init__(self):
        if len(self.raw) != WORD_BYTES:
            raise ValueError("a word image is exactly 16 bytes")


NULL_CAP = Capability(Bounds(0, 0), Perm.NONE, 0, tag=False)

Decoded = Union[bytes, Capability, PoisonWord]


def encode(value: Capability | PoisonWord) -> WordImage:
    if not value.tag:
        raise TagViolation("only tagged values have a capability encoding")
    if isinstance(value, PoisonWord):
        bounds, perms, flags = value.poison_bounds, 0, FLAG_POISON
        if value.poison_version:
            flags |= FLAG_VERSION
    else:
        bounds, perms, flags = value.bounds, int(value.perms), 0
        if value.version:
            flags |= FLAG_VERSION
    if bounds.length >= MAX_LENGTH:
        raise EncodingRange(f"length {bounds.length:#x} does not fit 48 bits")
    raw = (
        bounds.base.to_bytes(8, "little")
        + bounds.length.to_bytes(6, "little")
        + bytes((perms, flags))
    )
    return WordImage(raw, True)


def unpack_fields(raw: bytes) -> tuple[int, int, int, int]:
    """Split a word image into (base, length, perms, flags).

    Reserved bits are dropped and a length that would run past the top of the
    address space is clamped, so every bit pattern yields valid bounds.
    """
    base = int.from_bytes(raw[0:8], "little")
    length = int.from_bytes(raw[8:14], "little")
    length = min(length, ADDR_MASK + 1 - base)
    return base, length, raw[14] & int(ALL_PERMS), raw[15] & (FLAG_POISON | FLAG_VERSION)


def decode(word: WordImage) -> Decoded:
    if not word.tag:
        return word.raw
    base, length, perms, flags = unpack_fields(word.raw)
    version = 1 if flags & FLAG_VERSION else 0
    if flags & FLAG_POISON:
        return PoisonWord(Bounds(base, length), version)
    return Capability(Bounds(base, length), Perm(perms), version)


def bounds_contains(outer: Bounds, inner: Bounds) -> bool:
    return outer.base <= inner.base and inner.top <= outer.top


def set_bounds(cap: Capability, new: Bounds) -> Capability:
    if not cap.tag:
        raise TagViolation("set_bounds on untagged capability")
    if not bounds_contains(cap.bounds, new):
        raise MonotonicityViolation(f"{new} is not within {cap.bounds}")
    return replace(cap, bounds=new)


def clear_perm(cap: Capability, perm: Perm) -> Capability:
    if not cap.tag:
        raise TagViolation("clear_perm on untagged capability")
    return replace(cap, perms=cap.perms & ~perm)


def set_version(cap: Capability, version: int) -> Capability:
    if not cap.tag:
        raise TagViolation("set_version on untagged capability")
    if Perm.POISON not in cap.perms:
        raise PermissionViolation("changing the memory version needs the POISON permission")
    return replace(cap, version=version & 1)


def root_capability(size: int, base: int = 0) -> Capability:
    """Omnipotent root over ``[base, base+size)``, as held by the kernel."""
    return Capability(Bounds(base, size), ALL_PERMS, 0)


def is_strict_superset(outer: Bounds, inner: Bounds) -> bool:
    return bounds_contains(outer, inner) and outer != inner
