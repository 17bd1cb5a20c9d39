import io
import json
import subprocess
import sys

import pytest

from golden import EX1_CLOCK, EX2_LOCK, EX2_SUMMARIZE, EXAMPLE_1, EXAMPLE_2, RULE_FIXTURES
from memop.cli import EXIT_FAIL, EXIT_INFRA, EXIT_OK, iter_documents, main


def cli(*argv, stdin=""):
    out = io.StringIO()
    rc = main(list(argv), stdin=io.StringIO(stdin), stdout=out)
    return rc, out.getvalue()


def jsonl(steps):
    return "\n".join(json.dumps(json.loads(s)) for s in steps) + "\n"


@pytest.fixture
def db(tmp_path):
    path = str(tmp_path / "mem.db")
    assert cli("init", path)[0] == EXIT_OK
    return path


def test_validate_ok_and_fail(tmp_path):
    f = tmp_path / "lock.json"
    f.write_text(EX2_LOCK)
    assert cli("validate", str(f))[0] == EXIT_OK
    rc, out = cli("validate", stdin=RULE_FIXTURES["R4"])
    assert rc == EXIT_FAIL
    assert json.loads(out)["diagnostics"][0]["rule"] == "R4"


def test_validate_unreadable(capsys):
    assert cli("validate", "/no/such/file")[0] == EXIT_INFRA
    assert "E_IO" in capsys.readouterr().err


def test_validate_jsonl_and_table():
    rc, out = cli("validate", "--format", "table", stdin=jsonl([EX2_LOCK, RULE_FIXTURES["R6"], "{\"op\":1}"]))
    assert rc == EXIT_FAIL
    assert "#1 ok" in out and "#2 FAIL" in out and "R6" in out and "#3 FAIL" in out


def test_exec_example1(db):
    rc, out = cli("exec", "--db", db, "--clock", EX1_CLOCK, stdin=jsonl(EXAMPLE_1))
    results = [json.loads(line) for line in out.splitlines()]
    assert rc == EXIT_OK and [r["status"] for r in results] == ["ok"] * 3
    rc, out = cli("exec", "--db", db, "--clock", EX1_CLOCK,
                  stdin='{"op":"Retrieve","target":{"all":true},"args":{"fields":["id","weight"]},"meta":{"confirmation":true}}')
    assert json.loads(out)["payload"]["items"] == [{"id": "1", "weight": 0.9}, {"id": "2", "weight": 0.9}]


def test_exec_single_multiline_document(db):
    rc, out = cli("exec", "--db", db, stdin=EXAMPLE_1[0])
    assert rc == EXIT_OK and json.loads(out)["payload"] == {"id": "1"}


def test_exec_dry_run_keeps_digest(db):
    _, before = cli("inspect", "--db", db)
    rc, out = cli("exec", "--db", db, "--dry-run", stdin=jsonl(EXAMPLE_1))
    assert rc == EXIT_OK and all(json.loads(l)["dry_run"] for l in out.splitlines())
    assert cli("inspect", "--db", db)[1] == before


def test_exec_missing_db(tmp_path, capsys):
    rc, _ = cli("exec", "--db", str(tmp_path / "absent.db"), stdin=EXAMPLE_1[0])
    assert rc == EXIT_INFRA
    assert "InitRequired" in capsys.readouterr().err


def test_exec_failure_exit_code(db):
    rc, out = cli("exec", "--db", db, stdin='{"op":"Delete","target":{"ids":["5"]}}')
    assert rc == EXIT_FAIL and json.loads(out)["diagnostics"][0]["code"] == "E_UNKNOWN_ID"


def test_exec_deterministic(tmp_path):
    outs = []
    for n in range(2):
        path = str(tmp_path / f"d{n}.db")
        cli("init", path)
        outs.append(cli("exec", "--db", path, "--clock", EX1_CLOCK, stdin=jsonl(EXAMPLE_1 + EXAMPLE_2))[1])
    assert outs[0] == outs[1]


def test_env_overrides(db, monkeypatch):
    monkeypatch.setenv("MEMOP_DB", db)
    monkeypatch.setenv("MEMOP_FORMAT", "table")
    rc, out = cli("exec", stdin=EXAMPLE_1[0])
    assert rc == EXIT_OK and out.startswith("Encode")


def test_bench_gold_and_report(tmp_path):
    report = tmp_path / "r.json"
    rc, out = cli("bench", "--report", str(report))
    assert rc == EXIT_OK
    body = json.loads(out)
    assert (body["sma"], body["esr"], body["emr"]) == (1.0, 1.0, 1.0)
    assert report.read_text().strip() == out.strip()


def test_bench_candidates(tmp_path):
    from memop.bench import fixture_path
    cases = [json.loads(l) for l in fixture_path().read_text().splitlines()]
    rows = [{"case_id": c["case_id"], "schema_list": c["schema_list"]} for c in cases[1:]]
    cand = tmp_path / "cand.jsonl"
    cand.write_text("".join(json.dumps(r) + "\n" for r in rows))
    rc, out = cli("bench", "--candidates", str(cand))
    body = json.loads(out)
    assert rc == EXIT_FAIL
    missing = next(c for c in body["cases"] if c["case_id"] == cases[0]["case_id"])
    assert (missing["sma"], missing["esr"], missing["satisfied"]) == (0, 0, 0)
    assert body["counts"]["sma_hits"] == len(cases) - 1


def test_bench_needs_clock(tmp_path):
    from memop.bench import fixture_path
    rows = [json.loads(l) for l in fixture_path().read_text().splitlines()]
    rows[0]["clock"] = None
    f = tmp_path / "c.jsonl"
    f.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert cli("bench", str(f))[0] == EXIT_INFRA
    assert cli("bench", str(f), "--clock", "2025-06-01T00:00:00Z")[0] == EXIT_OK


def test_bench_no_valid_cases(tmp_path):
    f = tmp_path / "empty.jsonl"
    f.write_text("\n")
    assert cli("bench", str(f))[0] == EXIT_INFRA


def test_repl_session(db):
    script = "\n".join([
        json.dumps(json.loads(EXAMPLE_2[0])),
        json.dumps(json.loads(EX2_LOCK)),
        json.dumps(json.loads(EX2_SUMMARIZE)),
        ".digest", ".digest", "{broken", ".inspect 1", ".inspect", ".bogus", ".quit",
        '{"op":"Encode","args":{"payload":{"text":"never read"}}}',
    ]) + "\n"
    rc, out = cli("repl", "--db", db, "--clock", "2025-09-29T00:05:00+08:00", stdin=script)
    assert rc == EXIT_OK
    assert '"summary_id": "2"' in out
    digests = [l for l in out.splitlines() if len(l) == 64 and all(c in "0123456789abcdef" for c in l)]
    assert len(digests) == 2 and digests[0] == digests[1]
    assert "MalformedJson" in out
    assert '"mode": "read_only"' in out
    assert "usage: .inspect <id>" in out and "unknown command .bogus" in out
    assert "never read" not in out


def test_inspect_unknown(db):
    assert cli("inspect", "--db", db, "9")[0] == EXIT_FAIL


def test_iter_documents():
    assert list(iter_documents("")) == []
    assert len(list(iter_documents('{"a":\n 1}'))) == 1
    assert len(list(iter_documents('{"a":1}\n\n{"b":2}\n'))) == 2


def test_console_entrypoint(tmp_path):
    out = subprocess.run([sys.executable, "-m", "memop.cli", "validate"], input=EX2_LOCK,
                         capture_output=True, text=True, check=False)
    assert out.returncode == 0 and json.loads(out.stdout)["ok"] is True
