"""Poison capabilities: a tagged-memory simulator with poison-on-free,
initialisation safety, probing revocation and a poison-aware cache model."""

from .alloc import ArenaAllocator, Heap, HeapConfig, arena_new, heap_new
from .cachesim import CacheGeometry, CacheHierarchy, Trace, TraceRecorder, victim_select
from .cap_model import (
    NULL_CAP,
    WORD_BYTES,
    Bounds,
    Capability,
    Perm,
    PoisonWord,
    WordImage,
    clear_perm,
    decode,
    encode,
    root_capability,
    set_bounds,
    set_version,
)
from .errors import (
    ConfigError,
    DoubleFree,
    EncodingRange,
    InvalidFree,
    MonotonicityViolation,
    NestedUnsupportedByBaseline,
    OutOfMemory,
    ParseError,
    PermissionViolation,
    PoisonCapError,
    StaleSweep,
    TagViolation,
    Trap,
    TrapKind,
)
from .harness import compare_revokers, gen_random_workload, load_scenario, parse_scenario, run_scenario
from .memory import HARDWARE, LEGACY, STRICT, Access, SemanticsConfig, TaggedMemory, check_access
from .revoker import RootSet, ShadowBitmap, SweepReport, probe_poison, should_revoke, sweep_poison, sweep_shadow

__version__ = "0.1.0"
