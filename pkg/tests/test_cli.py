import json
import subprocess
import sys

import pytest

from poisoncap.cli import main
from poisoncap.harness import CORPUS_DIR

UAF = str(CORPUS_DIR / "cwe416" / "uaf_load.json")


def lines(capsys):
    return capsys.readouterr().out.strip().splitlines()


def test_run_corpus_file(capsys):
    assert main(["run", UAF]) == 0
    (line,) = lines(capsys)
    report = json.loads(line)
    assert report["schema"] == 1
    assert report["observed"] == {"verdict": "trap", "kind": "UseAfterFree", "at_step": 3}


def test_run_mismatch_exit_1(capsys):
    assert main(["run", UAF, "--mode", "legacy", "--revoker", "shadow"]) == 1
    assert json.loads(lines(capsys)[0])["status"] == "fail"


def test_compare_revokers(capsys):
    assert main(["compare-revokers", "--seed", "7", "--ops", "500"]) == 0
    out = json.loads(lines(capsys)[0])
    assert out["verdict"] == "equal" and out["schema"] == 1


def test_seed_from_environment(capsys, monkeypatch):
    monkeypatch.setenv("POISONCAP_SEED", "5")
    assert main(["compare-revokers", "--ops", "50"]) == 0
    assert json.loads(lines(capsys)[0])["seed"] == 5
    monkeypatch.setenv("POISONCAP_SEED", "x")
    assert main(["compare-revokers", "--ops", "50"]) == 2


def test_help_exits_zero(capsys):
    assert main(["run", "--help"]) == 0
    assert "usage" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [[], ["bogus"], ["run"], ["run", UAF, "--mode", "fast"], ["cache-bench", "--ops", "0"],
     ["compare-revokers", "--format", "csv"], ["run", "/nonexistent.json"]],
)
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err


def test_parse_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "b", "steps": [{"op": "load", "cap": "q", "offset": 0, "width": 8}]}))
    assert main(["run", str(bad)]) == 2
    assert "steps[0].cap" in capsys.readouterr().err


def test_corpus_json_and_csv(capsys, tmp_path):
    assert main(["corpus"]) == 0
    out = lines(capsys)
    summary = json.loads(out[-1])
    assert summary["failed"] == 0 and all(json.loads(x)["schema"] == 1 for x in out)
    target = tmp_path / "c.csv"
    assert main(["corpus", "--format", "csv", "--out", str(target)]) == 0
    rows = target.read_text().strip().splitlines()
    assert rows[0] == "scenario,class,status,verdict,kind,at_step" and len(rows) == len(out)


def test_corpus_baseline_has_failures(capsys):
    assert main(["corpus", "--revoker", "shadow", "--mode", "legacy"]) == 1


def test_cache_bench_csv(capsys):
    assert main(["cache-bench", "--ops", "10", "--seed", "1"]) == 0
    out = lines(capsys)
    assert out[0] == "workload,policy,level,hits,misses,writebacks,dram_bytes"
    assert len(out) == 1 + 3 * 2 * 2


def test_dump(capsys):
    assert main(["dump", UAF]) == 0
    out = lines(capsys)
    assert json.loads(out[0])["status"] == "pass"
    assert any(line.endswith(" poison") for line in out[1:])


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "poisoncap", "run", UAF], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["status"] == "pass"
