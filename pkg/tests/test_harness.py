import itertools
import json

import pytest

from poisoncap.errors import ParseError
from poisoncap.harness import (
    CORPUS_DIR,
    corpus_files,
    gen_random_workload,
    load_scenario,
    parse_scenario,
    report_json,
    run_corpus,
    run_scenario,
    summarize,
)

MINIMAL = json.dumps({
    "name": "mini",
    "steps": [
        {"op": "malloc", "as": "p", "size": 32},
        {"op": "store", "cap": "p", "offset": 0, "width": 8, "value": 5},
        {"op": "free", "cap": "p"},
    ],
})

BASELINE = {"revoker": "shadow", "mode": "legacy"}


def _doc(steps, **extra):
    return json.dumps({"name": "t", "steps": steps, **extra})


def test_parse_minimal():
    sc = parse_scenario(MINIMAL)
    assert len(sc.steps) == 3 and sc.expect.verdict == "ok"


def test_parse_undefined_handle_names_it():
    with pytest.raises(ParseError) as e:
        parse_scenario(_doc([{"op": "load", "cap": "q", "offset": 0, "width": 8}]), "x.json")
    assert "'q'" in str(e.value) and e.value.location == "x.json: steps[0].cap"


@pytest.mark.parametrize(
    "steps,where",
    [
        ([{"op": "frobnicate"}], "steps[0].op"),
        ([{"op": "malloc", "as": "p", "size": 32}, {"op": "load", "cap": "p", "offset": 0, "width": 3}], "steps[1].width"),
        ([{"op": "malloc", "as": "p", "size": 32}, {"op": "load", "cap": "p", "offset": 12, "width": 8}], "steps[1].offset"),
        ([{"op": "malloc", "as": "p"}], "steps[0].size"),
        ([{"op": "malloc", "as": "p", "size": 16}, {"op": "clear_perm", "from": "p", "as": "q", "perm": "EXEC"}], "steps[1].perm"),
    ],
)
def test_parse_errors_carry_location(steps, where):
    with pytest.raises(ParseError) as e:
        parse_scenario(_doc(steps), "s")
    assert e.value.location == f"s: {where}"


def test_parse_bad_json_and_expectation():
    with pytest.raises(ParseError) as e:
        parse_scenario("{\n  nope", "f.json")
    assert e.value.location.startswith("f.json:2:")
    with pytest.raises(ParseError):
        parse_scenario(_doc([], expect={"verdict": "maybe"}))
    with pytest.raises(ParseError):
        parse_scenario(_doc([{"op": "sweep"}], expect={"verdict": "trap", "at_step": 4}))


def test_internal_handles_can_be_disabled():
    with pytest.raises(ParseError):
        parse_scenario(_doc([{"op": "load", "cap": "heap", "offset": 0, "width": 8}], config={"internal_handles": False}))


def test_golden_uaf_before_realloc():
    sc = load_scenario(CORPUS_DIR / "cwe416" / "uaf_before_realloc.json")
    assert (sc.expect.verdict, sc.expect.kind, sc.expect.at_step) == ("trap", "UseAfterFree", 3)
    r = run_scenario(sc)
    assert r["status"] == "pass" and r["detected"] is True


def test_good_and_uninit_cases():
    r = run_scenario(load_scenario(CORPUS_DIR / "good" / "write_then_read.json"))
    assert r["status"] == "pass" and r["observed"]["verdict"] == "ok"
    r = run_scenario(load_scenario(CORPUS_DIR / "cwe457" / "uninit_read.json"))
    assert r["observed"] == {"verdict": "trap", "kind": "UninitialisedRead", "at_step": 1}


def test_baseline_misses_uaf_before_realloc():
    sc = load_scenario(CORPUS_DIR / "cwe416" / "uaf_before_realloc.json")
    r = run_scenario(sc, BASELINE)
    assert r["detected"] is False and r["observed"]["verdict"] == "ok"
    assert r["counters"]["shadow_bytes"] == 512


def test_infrastructure_error_is_not_a_trap():
    sc = parse_scenario(_doc([{"op": "malloc", "as": "p", "size": 1 << 20}]))
    r = run_scenario(sc)
    assert r["observed"]["verdict"] == "error" and "OutOfMemory" in r["observed"]["error"]


def test_report_shape_and_determinism():
    sc = load_scenario(CORPUS_DIR / "good" / "quarantine_auto_revocation.json")
    a, b = run_scenario(sc), run_scenario(sc)
    for key in ("schema", "scenario", "observed", "alloc_stats", "sweeps", "counters", "cache", "matrix_rows"):
        assert key in a
    assert a["schema"] == 1 and a["alloc_stats"]["heap"]["sweeps_triggered"] >= 1
    a.pop("timestamp"), b.pop("timestamp")
    assert report_json(a) == report_json(b)


def test_cache_option_attaches_stats():
    doc = json.loads(MINIMAL)
    doc["config"] = {"cache": True}
    r = run_scenario(parse_scenario(json.dumps(doc)))
    assert r["cache"]["l1"]["misses"] >= 1


def test_corpus_layout_and_results():
    files = corpus_files()
    assert len(files) >= 40
    assert {p.parent.name for p in files} == {"cwe415", "cwe416", "cwe457", "nested", "good"}
    reports = run_corpus()
    assert all(r["status"] == "pass" for r in reports), [r["scenario"] for r in reports if r["status"] != "pass"]
    assert sum(c["total"] for c in summarize(reports).values()) == len(files)


def test_corpus_covers_every_matrix_row():
    rows = set()
    for r in run_corpus():
        rows |= {tuple(x) for x in r["matrix_rows"]}
    wanted = set(itertools.product([False, True], ["equal", "strict_superset", "subset", "overlap"], [False, True], ["read", "write"]))
    assert wanted <= rows


def test_random_workload_deterministic_and_single_layer():
    a, b = gen_random_workload(9, 300), gen_random_workload(9, 300)
    assert a.to_dict() == b.to_dict()
    assert not any(s.op.startswith("arena") for s in a.steps)
    assert run_scenario(a)["observed"]["verdict"] == "ok"
