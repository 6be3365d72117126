"""Scenario files, the runner, random workloads and revoker comparison.

A scenario is a JSON document::

    {
      "name": "uaf_load",
      "class": "cwe416",
      "config": {"mode": "strict", "revoker": "poison", "cache": false,
                 "heap": {"size": 65536, "threshold_pct": 25,
                          "realloc_policy": "lazy_detox"}},
      "steps": [
        {"op": "malloc", "as": "p", "size": 32},
        {"op": "free", "cap": "p"},
        {"op": "load", "cap": "p", "offset": 0, "width": 8}
      ],
      "expect": {"verdict": "trap", "kind": "UseAfterFree", "at_step": 2}
    }

Handles ``root`` (privileged, carries POISON) and ``heap`` (the heap slab
capability) are predefined unless ``config.internal_handles`` is false.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .alloc import EAGER_ZERO, LAZY_DETOX, ArenaAllocator, Heap, HeapConfig
from .cachesim import CacheGeometry, CacheHierarchy, TraceRecorder
from .cap_model import WORD_BYTES, Bounds, Capability, Perm, clear_perm, root_capability, set_bounds, set_version
from .errors import (
    DoubleFree,
    NestedUnsupportedByBaseline,
    ParseError,
    PoisonCapError,
    Trap,
    TrapKind,
)
from .memory import VALID_WIDTHS, SemanticsConfig, StoreMode, StoreResult, TaggedMemory, UninitMode
from .revoker import RootSet, sweep_poison, sweep_shadow

SCHEMA_VERSION = 1
HEAP_BASE = 0x1000
CLASSES = ("cwe415", "cwe416", "cwe457", "nested", "good", "random")
VERDICTS = ("ok", "trap", "cancelled", "double_free", "mismatch", "error")
REVOKERS = ("poison", "shadow", "none")
PREDEFINED = ("root", "heap")

# op -> (handle operands, defined name operand, required int operands)
OPS = {
    "malloc": ((), "as", ("size",)),
    "free": (("cap",), None, ()),
    "arena_new": ((), "as", ("size",)),
    "arena_malloc": (("arena",), "as", ("size",)),
    "arena_free": (("arena", "cap"), None, ()),
    "load": (("cap",), None, ("offset", "width")),
    "store": (("cap",), None, ("offset", "width", "value")),
    "store_cap": (("cap", "value"), None, ("offset",)),
    "load_cap": (("cap",), "as", ("offset",)),
    "cpoison": (("cap",), None, ("offset", "nwords")),
    "cgetpoison": (("cap",), None, ("offset",)),
    "derive": (("from",), "as", ("offset", "length")),
    "set_version": (("from",), "as", ("version",)),
    "clear_perm": (("from",), "as", ()),
    "sweep": ((), None, ()),
    "flush": ((), None, ()),
    "cache_note": ((), None, ()),
}


@dataclass
class Step:
    op: str
    args: dict

    def __getitem__(self, key):
        return self.args[key]

    def get(self, key, default=None):
        return self.args.get(key, default)

    def to_dict(self) -> dict:
        return {"op": self.op, **self.args}


@dataclass
class Expectation:
    verdict: str = "ok"
    kind: Optional[str] = None
    at_step: Optional[int] = None

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "kind": self.kind, "at_step": self.at_step}


@dataclass
class Scenario:
    name: str
    steps: list
    expect: Expectation = field(default_factory=Expectation)
    cls: str = "good"
    config: dict = field(default_factory=dict)
    tags: list = field(default_factory=list)
    description: str = ""

    @property
    def is_bad(self) -> bool:
        return self.expect.verdict != "ok"

    def to_dict(self) -> dict:
        out = {"name": self.name, "class": self.cls, "config": self.config,
               "steps": [s.to_dict() for s in self.steps], "expect": self.expect.to_dict()}
        if self.tags:
            out["tags"] = self.tags
        if self.description:
            out["description"] = self.description
        return out


def _int(value, where):
    if isinstance(value, bool):
        raise ParseError("expected an integer", where)
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            pass
    raise ParseError(f"expected an integer, got {value!r}", where)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", f"{source}:{e.lineno}:{e.colno}") from None
    return scenario_from_dict(doc, source)


def scenario_from_dict(doc: Any, source: str = "<scenario>") -> Scenario:
    if not isinstance(doc, dict):
        raise ParseError("scenario must be a JSON object", source)
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise ParseError("missing scenario name", f"{source}: name")
    cls = doc.get("class", "good")
    if cls not in CLASSES:
        raise ParseError(f"unknown class {cls!r}", f"{source}: class")
    config = doc.get("config", {})
    if not isinstance(config, dict):
        raise ParseError("config must be an object", f"{source}: config")
    _validate_config(config, source)
    internal = config.get("internal_handles", True)
    defined = set(PREDEFINED) if internal else set()
    raw_steps = doc.get("steps")
    if not isinstance(raw_steps, list):
        raise ParseError("steps must be a list", f"{source}: steps")
    steps = []
    for i, raw in enumerate(raw_steps):
        where = f"{source}: steps[{i}]"
        if not isinstance(raw, dict) or "op" not in raw:
            raise ParseError("step needs an 'op'", where)
        op = raw["op"]
        if op not in OPS:
            raise ParseError(f"unknown op {op!r}", f"{where}.op")
        handles, out, ints = OPS[op]
        args = {k: v for k, v in raw.items() if k != "op"}
        for h in handles:
            ref = args.get(h)
            if not isinstance(ref, str):
                raise ParseError(f"missing handle operand {h!r}", f"{where}.{h}")
            if ref not in defined:
                raise ParseError(f"undefined handle {ref!r}", f"{where}.{h}")
        for key in ints:
            if key not in args:
                raise ParseError(f"missing operand {key!r}", f"{where}.{key}")
            args[key] = _int(args[key], f"{where}.{key}")
        if "width" in args and args["width"] not in VALID_WIDTHS:
            raise ParseError(f"malformed width {args['width']}", f"{where}.width")
        if op in ("load", "store"):
            if args["offset"] % WORD_BYTES + args["width"] > WORD_BYTES:
                raise ParseError("access straddles a 16-byte word", f"{where}.offset")
        if op in ("load_cap", "store_cap", "cpoison", "cgetpoison") and args["offset"] % WORD_BYTES:
            raise ParseError("offset must be 16-byte aligned", f"{where}.offset")
        if op == "clear_perm":
            perm = args.get("perm")
            if perm not in Perm.__members__ or perm == "NONE":
                raise ParseError(f"unknown permission {perm!r}", f"{where}.perm")
        if "expect" in args and op == "load":
            args["expect"] = _int(args["expect"], f"{where}.expect")
        if out is not None:
            target = args.get(out)
            if not isinstance(target, str) or not target:
                raise ParseError(f"missing {out!r} name", f"{where}.{out}")
            defined.add(target)
        steps.append(Step(op, args))
    exp = doc.get("expect", {"verdict": "ok"})
    if not isinstance(exp, dict) or exp.get("verdict", "ok") not in VERDICTS:
        raise ParseError("expect.verdict must be one of " + ", ".join(VERDICTS), f"{source}: expect")
    kind = exp.get("kind")
    if kind is not None and kind not in {k.value for k in TrapKind}:
        raise ParseError(f"unknown trap kind {kind!r}", f"{source}: expect.kind")
    at = exp.get("at_step")
    if at is not None:
        at = _int(at, f"{source}: expect.at_step")
        if not 0 <= at < len(steps):
            raise ParseError(f"at_step {at} out of range", f"{source}: expect.at_step")
    expect = Expectation(exp.get("verdict", "ok"), kind, at)
    return Scenario(name, steps, expect, cls, config, list(doc.get("tags", [])), doc.get("description", ""))


def _validate_config(config: dict, source: str) -> None:
    mode = config.get("mode", "strict")
    if mode not in ("strict", "hardware", "legacy"):
        raise ParseError(f"unknown mode {mode!r}", f"{source}: config.mode")
    if config.get("revoker", "poison") not in REVOKERS:
        raise ParseError("unknown revoker", f"{source}: config.revoker")
    heap = config.get("heap", {})
    if not isinstance(heap, dict):
        raise ParseError("config.heap must be an object", f"{source}: config.heap")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# running


@dataclass
class Machine:
    """One simulator instance: memory, heap, arenas and the handle table."""

    mem: TaggedMemory
    root: Capability
    heap: Heap
    revoker: str
    handles: dict = field(default_factory=dict)
    arenas: dict = field(default_factory=dict)
    sweeps: list = field(default_factory=list)
    last_sweep: Any = None
    recorder: Optional[TraceRecorder] = None

    def layers(self):
        return [self.heap, *self.arenas.values()]

    def sweep(self):
        if self.revoker == "none":
            return None
        roots = RootSet(self.handles, [Bounds(0, self.mem.size)])
        if self.revoker == "poison":
            report = sweep_poison(self.mem, roots, self.root)
        else:
            report = sweep_shadow(self.mem, roots, self.heap.shadow)
        self.sweeps.append(report)
        self.last_sweep = report
        return report

    def flush(self) -> int:
        if self.revoker == "none":
            return 0
        return sum(layer.quarantine_flush(self.last_sweep) for layer in self.layers() if layer.quarantine.entries)

    def handle_revocation(self):
        """Serve outstanding revocation requests: sweep once, flush the requesters."""
        pending = [layer for layer in self.layers() if layer.revocation_requested]
        if not pending or self.revoker == "none":
            return
        report = self.sweep()
        for layer in pending:
            layer.quarantine_flush(report)


def effective_config(sc: Scenario, overrides: Optional[dict] = None) -> dict:
    config = dict(sc.config)
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "heap":
                config["heap"] = {**config.get("heap", {}), **value}
            else:
                config[key] = value
    return config


def semantics_from_config(config: dict) -> SemanticsConfig:
    cfg = SemanticsConfig.preset(config.get("mode", "strict"))
    if "store" in config:
        cfg = replace(cfg, uaf_store_mode=StoreMode(config["store"]))
    if "uninit" in config:
        cfg = replace(cfg, uninit_read_mode=UninitMode(config["uninit"]))
    return cfg


def build_machine(config: dict) -> Machine:
    heap_opts = config.get("heap", {})
    size = int(heap_opts.get("size", 0x10000))
    revoker = config.get("revoker", "poison")
    mode = config.get("mode", "strict")
    mem = TaggedMemory(HEAP_BASE + size, semantics_from_config(config))
    root = root_capability(mem.size)
    baseline = revoker == "shadow"
    # the baseline emulates an allocator that zeroes on free and reallocation
    zeroing = baseline and heap_opts.get("zeroing", mode == "legacy")
    hcfg = HeapConfig(
        Bounds(HEAP_BASE, size),
        quarantine_threshold_pct=float(heap_opts.get("threshold_pct", 25)),
        realloc_policy=heap_opts.get("realloc_policy", EAGER_ZERO if zeroing else LAZY_DETOX),
        fresh_poison_version=int(heap_opts.get("fresh_poison_version", 0)),
        scheme="shadow" if baseline else "poison",
        zero_on_free=bool(zeroing),
    )
    heap = Heap(mem, root, hcfg)
    machine = Machine(mem, root, heap, revoker)
    if config.get("internal_handles", True):
        machine.handles["root"] = root
        machine.handles["heap"] = heap.slab_cap
    if config.get("cache"):
        machine.recorder = TraceRecorder()
        mem.observers.append(machine.recorder)
    mem.decision_log = []
    return machine


def _cap(machine: Machine, name: str) -> Capability:
    value = machine.handles[name]
    if not isinstance(value, Capability):
        raise PoisonCapError(f"handle {name!r} does not hold a capability")
    return value


def _execute(machine: Machine, step: Step):
    """Run one step; returns an outcome string or None."""
    op = step.op
    h = machine.handles
    if op == "malloc":
        h[step["as"]] = machine.heap.malloc(step["size"])
    elif op == "free":
        machine.heap.free(_cap(machine, step["cap"]))
    elif op == "arena_new":
        arena = machine.heap.arena_new(step["size"])
        machine.arenas[step["as"]] = arena
        h[step["as"]] = arena.arena_cap
    elif op == "arena_malloc":
        h[step["as"]] = _arena(machine, step["arena"]).arena_malloc(step["size"])
    elif op == "arena_free":
        _arena(machine, step["arena"]).arena_free(_cap(machine, step["cap"]))
    elif op == "load":
        cap = _cap(machine, step["cap"])
        data = machine.mem.load(cap, cap.base + step["offset"], step["width"])
        if "expect" in step.args and int.from_bytes(data, "little") != step["expect"]:
            return "mismatch"
    elif op == "store":
        cap = _cap(machine, step["cap"])
        value = step["value"] & ((1 << (8 * step["width"])) - 1)
        if machine.mem.store(cap, cap.base + step["offset"], value.to_bytes(step["width"], "little")) is StoreResult.CANCELLED:
            return "cancelled"
    elif op == "store_cap":
        cap = _cap(machine, step["cap"])
        if machine.mem.store_cap(cap, cap.base + step["offset"], h[step["value"]]) is StoreResult.CANCELLED:
            return "cancelled"
    elif op == "load_cap":
        cap = _cap(machine, step["cap"])
        h[step["as"]] = machine.mem.load_cap(cap, cap.base + step["offset"])
    elif op == "cpoison":
        cap = _cap(machine, step["cap"])
        if machine.mem.cpoison(cap, cap.base + step["offset"], step["nwords"]) is StoreResult.CANCELLED:
            return "cancelled"
    elif op == "cgetpoison":
        cap = _cap(machine, step["cap"])
        got = machine.mem.cgetpoison(cap, cap.base + step["offset"])
        if "expect" in step.args and got != bool(step["expect"]):
            return "mismatch"
    elif op == "derive":
        src = _cap(machine, step["from"])
        h[step["as"]] = set_bounds(src, Bounds(src.base + step["offset"], step["length"]))
    elif op == "set_version":
        h[step["as"]] = set_version(_cap(machine, step["from"]), step["version"])
    elif op == "clear_perm":
        h[step["as"]] = clear_perm(_cap(machine, step["from"]), Perm[step["perm"]])
    elif op == "sweep":
        machine.sweep()
    elif op == "flush":
        machine.flush()
    elif op == "cache_note":
        pass
    machine.handle_revocation()
    return None


def _arena(machine: Machine, name: str) -> ArenaAllocator:
    try:
        return machine.arenas[name]
    except KeyError:
        raise PoisonCapError(f"handle {name!r} is not an arena") from None


def run_scenario(sc: Scenario, overrides: Optional[dict] = None, keep_machine: bool = False) -> dict:
    config = effective_config(sc, overrides)
    observed = {"verdict": "ok", "kind": None, "at_step": None}
    try:
        machine = build_machine(config)
    except PoisonCapError as e:
        return _report(sc, config, {"verdict": "error", "kind": None, "at_step": None, "error": f"{type(e).__name__}: {e}"}, None)
    for i, step in enumerate(sc.steps):
        try:
            outcome = _execute(machine, step)
        except Trap as t:
            observed = {"verdict": "trap", "kind": t.kind.value, "at_step": i}
            break
        except DoubleFree:
            observed = {"verdict": "double_free", "kind": None, "at_step": i}
            break
        except (PoisonCapError, ValueError) as e:
            observed = {"verdict": "error", "kind": None, "at_step": i, "error": f"{type(e).__name__}: {e}"}
            break
        if outcome == "mismatch":
            observed = {"verdict": "mismatch", "kind": None, "at_step": i}
            break
        if outcome == "cancelled" and observed["verdict"] == "ok":
            observed = {"verdict": "cancelled", "kind": None, "at_step": i}
    report = _report(sc, config, observed, machine)
    if keep_machine:
        report["_machine"] = machine
    return report


def _matches(expect: Expectation, observed: dict) -> bool:
    if expect.verdict != observed["verdict"]:
        return False
    if expect.kind is not None and expect.kind != observed["kind"]:
        return False
    if expect.at_step is not None and expect.at_step != observed["at_step"]:
        return False
    return True


def _report(sc: Scenario, config: dict, observed: dict, machine: Optional[Machine]) -> dict:
    passed = _matches(sc.expect, observed)
    report = {
        "schema": SCHEMA_VERSION,
        "scenario": sc.name,
        "class": sc.cls,
        "config": config,
        "expected": sc.expect.to_dict(),
        "observed": observed,
        "status": "pass" if passed else "fail",
        "detected": (passed if sc.is_bad else None),
        "timestamp": time.time(),
    }
    if machine is None:
        return report
    report["alloc_stats"] = {"heap": machine.heap.stats.to_dict()}
    report["alloc_stats"].update({name: a.stats.to_dict() for name, a in sorted(machine.arenas.items())})
    report["sweeps"] = [s.to_dict() for s in machine.sweeps]
    report["counters"] = {
        "cancelled_stores": machine.mem.cancelled_stores,
        "revoked": sum(s.caps_revoked for s in machine.sweeps),
        "shadow_bytes": machine.heap.shadow.shadow_bytes if machine.heap.shadow is not None else 0,
    }
    rows = sorted({row for row, _ in machine.mem.decision_log})
    report["matrix_rows"] = [list(r) for r in rows]
    if machine.recorder is not None:
        hier = CacheHierarchy(CacheGeometry.preset("desk"), machine.mem.size, "poison")
        report["cache"] = hier.run(machine.recorder.trace()).to_dict()
    else:
        report["cache"] = None
    return report


def report_json(report: dict) -> str:
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    return json.dumps(clean, sort_keys=True)


# ---------------------------------------------------------------------------
# corpus


CORPUS_DIR = Path(__file__).parent / "corpus"


def corpus_files(root: str | Path | None = None) -> list[Path]:
    root = Path(root) if root else CORPUS_DIR
    return sorted(root.glob("*/*.json"))


def run_corpus(root=None, overrides=None) -> list[dict]:
    return [run_scenario(load_scenario(p), overrides) for p in corpus_files(root)]


def summarize(reports: list[dict]) -> dict:
    out: dict = {}
    for r in reports:
        c = out.setdefault(r["class"], {"total": 0, "pass": 0, "fail": 0})
        c["total"] += 1
        c[r["status"]] += 1
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# random workloads and revoker comparison


def gen_random_workload(seed: int, n_ops: int, nested: bool = False) -> Scenario:
    """Single-layer random program that never traps under correct semantics.

    Loads only touch words the program wrote into the current allocation,
    stale handles are kept (and swept) but never dereferenced.
    """
    rng = random.Random(seed)
    steps: list[Step] = []
    live: dict[str, tuple[int, set]] = {}
    caps: list[str] = []  # every handle ever defined, dangling or not
    counter = 0

    def fresh(prefix):
        nonlocal counter
        counter += 1
        return f"{prefix}{counter}"

    if nested:
        steps.append(Step("arena_new", {"as": "A", "size": 4096}))
    for _ in range(n_ops):
        r = rng.random()
        if r < 0.25 or not live:
            name = fresh("p")
            size = rng.choice((16, 24, 32, 48, 64, 100, 128, 256))
            if nested and rng.random() < 0.5:
                steps.append(Step("arena_malloc", {"as": name, "arena": "A", "size": size}))
                size = max(16, 1 << (size - 1).bit_length())
            else:
                steps.append(Step("malloc", {"as": name, "size": size}))
            live[name] = (-(-size // 16) * 16, set())
            caps.append(name)
        elif r < 0.45:
            name = rng.choice(sorted(live))
            length, written = live[name]
            word = rng.randrange(length // 16)
            steps.append(Step("store", {"cap": name, "offset": word * 16, "width": 8, "value": rng.getrandbits(64)}))
            written.add(word)
        elif r < 0.55:
            name = rng.choice(sorted(live))
            length, written = live[name]
            if written:
                word = rng.choice(sorted(written))
                steps.append(Step("load", {"cap": name, "offset": word * 16, "width": 8}))
        elif r < 0.68:
            dst = rng.choice(sorted(live))
            length, written = live[dst]
            word = rng.randrange(length // 16)
            steps.append(Step("store_cap", {"cap": dst, "offset": word * 16, "value": rng.choice(caps)}))
            written.add(word)
        elif r < 0.75:
            src = rng.choice(sorted(live))
            length, _ = live[src]
            off = rng.randrange(0, length, 16)
            name = fresh("d")
            steps.append(Step("derive", {"as": name, "from": src, "offset": off, "length": rng.randrange(1, length - off + 1)}))
            caps.append(name)
        elif r < 0.95:
            name = rng.choice(sorted(live))
            del live[name]
            if nested and name in {s["as"] for s in steps if s.op == "arena_malloc"}:
                steps.append(Step("arena_free", {"arena": "A", "cap": name}))
            else:
                steps.append(Step("free", {"cap": name}))
        else:
            steps.append(Step("sweep", {}))
            steps.append(Step("flush", {}))
    return Scenario(
        f"random_{seed}_{n_ops}{'_nested' if nested else ''}",
        steps,
        Expectation("ok"),
        "random",
        {"internal_handles": False, "heap": {"size": 0x10000, "zeroing": True}},
    )


def _revoked_sets(machine: Machine) -> list:
    return [sorted(s.revoked) for s in machine.sweeps]


def compare_revokers(seed: int, n_ops: int, scenario: Optional[Scenario] = None) -> dict:
    sc = scenario or gen_random_workload(seed, n_ops)
    if any(s.op.startswith("arena") for s in sc.steps):
        raise NestedUnsupportedByBaseline("the shadow bitmap has no notion of allocation layers")
    poison = run_scenario(sc, {"revoker": "poison", "mode": "strict"}, keep_machine=True)
    shadow = run_scenario(sc, {"revoker": "shadow", "mode": "strict"}, keep_machine=True)
    a, b = _revoked_sets(poison["_machine"]), _revoked_sets(shadow["_machine"])
    divergence = None
    for i in range(max(len(a), len(b))):
        sa = a[i] if i < len(a) else None
        sb = b[i] if i < len(b) else None
        if sa != sb:
            divergence = {"sweep": i, "poison": sa, "shadow": sb}
            break
    outcomes_ok = poison["observed"]["verdict"] == "ok" and shadow["observed"]["verdict"] == "ok"
    equal = divergence is None and outcomes_ok
    return {
        "verdict": "equal" if equal else "unequal",
        "seed": seed,
        "n_ops": n_ops,
        "sweeps": len(a),
        "revoked": sum(len(s) for s in a),
        "shadow_bytes": {"poison": sum(s.shadow_bytes for s in poison["_machine"].sweeps),
                         "shadow": shadow["_machine"].heap.shadow.shadow_bytes},
        "observed": {"poison": poison["observed"], "shadow": shadow["observed"]},
        "first_divergence": divergence,
    }
