"""Exception hierarchy shared by every layer of the simulator."""

from __future__ import annotations

import enum


class PoisonCapError(Exception):
    """Base class for all simulator errors."""


class EncodingRange(PoisonCapError):
    """A field does not fit the 128-bit word layout."""


class MonotonicityViolation(PoisonCapError):
    """Attempt to widen the bounds of a capability."""


class TagViolation(PoisonCapError):
    """Operation on an untagged (invalid) capability."""


class PermissionViolation(PoisonCapError):
    """Capability lacks a permission the operation needs."""


class ConfigError(PoisonCapError):
    pass


class OutOfMemory(PoisonCapError):
    pass


class InvalidFree(PoisonCapError):
    """The freed capability does not name a live allocation."""


class DoubleFree(PoisonCapError):
    """The allocation is already poisoned (or painted, for the baseline)."""


class StaleSweep(PoisonCapError):
    """Quarantine flush attempted without a covering sweep since the last free."""


class NestedUnsupportedByBaseline(PoisonCapError):
    """The shadow-bitmap baseline cannot express nested allocation layers."""


class ParseError(PoisonCapError):
    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class TrapKind(enum.Enum):
    USE_AFTER_FREE = "UseAfterFree"
    UNINITIALISED_READ = "UninitialisedRead"
    BOUNDS_VIOLATION = "BoundsViolation"
    PERMISSION_VIOLATION = "PermissionViolation"
    TAG_VIOLATION = "TagViolation"


class Trap(PoisonCapError):
    """A precise architectural exception raised by a memory instruction."""

    def __init__(self, kind: TrapKind, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}{': ' + detail if detail else ''}")
