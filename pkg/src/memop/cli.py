"""Command line: init, validate, exec, bench, repl.

Exit codes: 0 success, 1 semantic failure (validation, execution or metric
miss), 2 infrastructure (I/O, missing database, bad configuration).

Every flag can also come from the environment: ``MEMOP_DB``, ``MEMOP_CLOCK``,
``MEMOP_FORMAT``, ``MEMOP_TAU``, ``MEMOP_SERVICES_URL``,
``MEMOP_SCORE_WEIGHTS``, ``MEMOP_EMBEDDING_DIM``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, TextIO

from . import __version__
from .adapter import execute_instance
from .bench import BenchConfig, BenchError, load_candidates, load_cases, run_bench
from .schema import SchemaError, canonical_json, decode_instance
from .services import RemoteServices, ServiceError, StubServices
from .store import MemoryStore, StoreConfig, open_store
from .timeutil import fixed_clock, is_timestamp, wall_clock
from .validator import Diagnostic, validate

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_INFRA = 2

log = logging.getLogger("memop")


class CliError(Exception):
    """Infrastructure problem; maps to exit code 2."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class CliConfig:
    db_path: str | None = None
    clock_override: str | None = None
    service_endpoint: str | None = None
    output: str = "json"
    tau: float | None = None
    score_weights: tuple[float, float, float] | None = None
    embedding_dim: int = 64

    def services(self):
        if self.service_endpoint:
            return RemoteServices(self.service_endpoint)
        return StubServices(self.embedding_dim)

    def store_config(self) -> StoreConfig:
        cfg = StoreConfig()
        if self.score_weights is not None:
            cfg.embedding_weight, cfg.lexical_weight, cfg.salience_weight = self.score_weights
        if self.tau is not None:
            cfg.tau = self.tau
        return cfg

    def clock(self):
        return fixed_clock(self.clock_override) if self.clock_override else wall_clock


def _env(name: str, default=None):
    return os.environ.get(f"MEMOP_{name}", default)


def _parse_weights(raw: str) -> tuple[float, float, float]:
    parts = [float(x) for x in raw.split(",")]
    if len(parts) != 3 or any(p < 0 for p in parts):
        raise argparse.ArgumentTypeError("expected three non-negative numbers: embedding,lexical,salience")
    return parts[0], parts[1], parts[2]


def _clock_arg(raw: str) -> str:
    if not is_timestamp(raw):
        raise argparse.ArgumentTypeError(f"not an RFC3339 timestamp with offset: {raw!r}")
    return raw


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--db", default=_env("DB"), help="sqlite database path")
    common.add_argument("--clock", type=_clock_arg, default=_env("CLOCK"),
                        help="fixed reference time (RFC3339 with offset)")
    common.add_argument("--format", choices=("json", "table"), default=_env("FORMAT", "json"))
    common.add_argument("--tau", type=float, default=float(_env("TAU")) if _env("TAU") else None,
                        help="summary similarity threshold")
    common.add_argument("--services-url", default=_env("SERVICES_URL"),
                        help="base URL of remote model services (default: built-in stub)")
    common.add_argument("--score-weights", type=_parse_weights,
                        default=_parse_weights(_env("SCORE_WEIGHTS")) if _env("SCORE_WEIGHTS") else None,
                        help="hybrid score weights embedding,lexical,salience")
    common.add_argument("--embedding-dim", type=int, default=int(_env("EMBEDDING_DIM", "64")))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="memop", description="Structured memory operations: validate, execute, benchmark.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="create an empty store")
    s.add_argument("db_path", nargs="?")

    s = sub.add_parser("validate", parents=[common], help="check instances without executing them")
    s.add_argument("input", nargs="?", default="-", help="JSON or JSONL file, '-' for stdin")

    s = sub.add_parser("exec", parents=[common], help="run instances against a store")
    s.add_argument("input", nargs="?", default="-")
    s.add_argument("--dry-run", action="store_true", help="force meta.dry_run on every instance")

    s = sub.add_parser("bench", parents=[common], help="score candidate schema lists")
    s.add_argument("cases", nargs="?", help="bench JSONL (default: shipped fixtures)")
    s.add_argument("--candidates", help="JSONL of {case_id, schema_list}; absent = gold self-test")
    s.add_argument("--report", help="write the JSON report here")

    s = sub.add_parser("repl", parents=[common], help="interactive session against a store")

    s = sub.add_parser("inspect", parents=[common], help="print one item, or the store digest")
    s.add_argument("item_id", nargs="?")
    return p


def config_from_args(ns: argparse.Namespace) -> CliConfig:
    return CliConfig(
        db_path=ns.db, clock_override=ns.clock, service_endpoint=ns.services_url,
        output=ns.format, tau=ns.tau, score_weights=ns.score_weights, embedding_dim=ns.embedding_dim,
    )


# ---------------------------------------------------------------------------
# input helpers
# ---------------------------------------------------------------------------

def _read_input(path: str, stdin: TextIO) -> str:
    if path == "-":
        return stdin.read()
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError("E_IO", f"cannot read {path}: {exc}") from exc


def iter_documents(text: str) -> Iterator[str]:
    """One JSON document, or JSONL (one per non-blank line)."""
    stripped = text.strip()
    if not stripped:
        return
    try:
        json.loads(stripped)
    except ValueError:
        for line in text.splitlines():
            if line.strip():
                yield line
        return
    yield stripped


def _open(cfg: CliConfig) -> MemoryStore:
    if not cfg.db_path:
        raise CliError("E_CONFIG", "no database given (--db or MEMOP_DB)")
    try:
        return open_store(cfg.db_path, cfg.services(), cfg.store_config())
    except FileNotFoundError as exc:
        raise CliError("E_INIT_REQUIRED", f"InitRequired: {cfg.db_path} does not exist; run `memop init` first") from exc
    except ServiceError as exc:
        raise CliError("E_SERVICE", str(exc)) from exc


def _emit(obj: dict, out: TextIO) -> None:
    out.write(canonical_json(obj) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_init(cfg: CliConfig, path: str | None, out: TextIO) -> int:
    path = path or cfg.db_path
    if not path:
        raise CliError("E_CONFIG", "no database path given")
    try:
        store = open_store(path, cfg.services(), cfg.store_config(), create=True)
    except (OSError, ServiceError) as exc:
        raise CliError("E_IO", str(exc)) from exc
    _emit({"db": path, "digest": store.content_digest()}, out)
    store.close()
    return EXIT_OK


def cmd_validate(cfg: CliConfig, source: str, out: TextIO, stdin: TextIO = sys.stdin) -> int:
    text = _read_input(source, stdin)
    rc = EXIT_OK
    for n, doc in enumerate(iter_documents(text), start=1):
        try:
            report = validate(decode_instance(doc))
            body = report.to_dict()
        except SchemaError as exc:
            diag = Diagnostic(exc.code, exc.path, type(exc).__name__, str(exc))
            body = {"ok": False, "diagnostics": [diag.to_dict()]}
        if not body["ok"]:
            rc = EXIT_FAIL
        if cfg.output == "table":
            status = "ok" if body["ok"] else "FAIL"
            out.write(f"#{n} {status}\n")
            for d in body["diagnostics"]:
                out.write(f"   {d['rule']:<5} {d['code']:<28} {d['path']:<20} {d['message']}\n")
        else:
            _emit({"index": n, **body}, out)
    return rc


def cmd_exec(cfg: CliConfig, source: str, out: TextIO, *, dry_run: bool = False,
             stdin: TextIO = sys.stdin) -> int:
    store = _open(cfg)
    text = _read_input(source, stdin)
    clock = cfg.clock()
    rc = EXIT_OK
    try:
        for doc in iter_documents(text):
            res = execute_instance(doc, store, clock, force_dry_run=dry_run)
            if not res.ok:
                rc = EXIT_FAIL
            if cfg.output == "table":
                out.write(_result_line(res.to_dict()) + "\n")
            else:
                out.write(res.to_json() + "\n")
    finally:
        store.close()
    return rc


def _result_line(r: dict) -> str:
    head = f"{r['op'] or '?':<10} {r['status']:<6}"
    if r["status"] == "ok":
        return f"{head} ids={','.join(r['affected_ids']) or '-'} delta={r['count_delta']}" + (" (dry run)" if r["dry_run"] else "")
    return head + " " + "; ".join(f"{d['rule']}: {d['message']}" for d in r["diagnostics"])


def cmd_bench(cfg: CliConfig, cases_path: str | None, candidate_path: str | None,
              report_path: str | None, out: TextIO) -> int:
    from .bench import fixture_path

    path = cases_path or str(fixture_path())
    try:
        cases, diags = load_cases(path)
    except OSError as exc:
        raise CliError("E_IO", f"cannot read {path}: {exc}") from exc
    except BenchError as exc:
        raise CliError("E_NO_VALID_CASES", str(exc)) from exc
    if cfg.clock_override is None and any(c.clock is None for c in cases):
        raise CliError("E_CONFIG", "bench needs --clock unless every case carries its own clock")
    candidates = None
    if candidate_path:
        try:
            candidates = load_candidates(candidate_path)
        except OSError as exc:
            raise CliError("E_IO", f"cannot read {candidate_path}: {exc}") from exc

    config = BenchConfig(
        services_factory=(lambda: cfg.services()),
        store_config=cfg.store_config(),
        default_clock=cfg.clock_override,
    )
    report = run_bench(cases, candidates, config, diags)
    machine = report.to_json()
    if report_path:
        Path(report_path).write_text(machine + "\n", encoding="utf-8")
    if cfg.output == "table":
        out.write(report.table() + "\n")
        for d in diags:
            out.write(f"skipped line {d.line}: {d.message}\n")
    else:
        out.write(machine + "\n")
    perfect = all(c.voided or (c.sma and c.esr and c.satisfied == c.total) for c in report.cases)
    return EXIT_OK if perfect else EXIT_FAIL


def cmd_inspect(cfg: CliConfig, item_id: str | None, out: TextIO) -> int:
    store = _open(cfg)
    try:
        if item_id is None:
            _emit({"digest": store.content_digest(), "active": store.count(),
                   "total": store.count(active_only=False)}, out)
            return EXIT_OK
        item = store.get(item_id)
        if item is None:
            _emit({"error": "E_UNKNOWN_ID", "id": item_id}, out)
            return EXIT_FAIL
        _emit(_inspect_item(store, item_id), out)
        return EXIT_OK
    finally:
        store.close()


def _inspect_item(store: MemoryStore, item_id: str) -> dict:
    item = store.get(item_id)
    body = item.to_dict(["id", "text", "type", "tags", "facets", "weight", "time", "source", "actor",
                         "location", "parent_id", "merged_into", "deleted", "lock", "expiry"])
    body["triggers"] = store.triggers(item_id)
    return body


REPL_HELP = """enter one JSON instance per line
  .inspect <id>   show an item
  .digest         show the store content digest
  .help           this text
  .quit           leave"""


def cmd_repl(cfg: CliConfig, inp: TextIO = sys.stdin, out: TextIO = sys.stdout) -> int:
    store = _open(cfg)
    clock = cfg.clock()
    interactive = inp.isatty()
    try:
        while True:
            if interactive:
                out.write("memop> ")
                out.flush()
            line = inp.readline()
            if not line:
                break
            line = line.strip()
            if not line:
                continue
            if line in (".quit", ".exit"):
                break
            if line == ".help":
                out.write(REPL_HELP + "\n")
            elif line == ".digest":
                out.write(store.content_digest() + "\n")
            elif line.startswith(".inspect"):
                parts = line.split()
                if len(parts) != 2:
                    out.write("usage: .inspect <id>\n")
                elif store.get(parts[1]) is None:
                    out.write(f"unknown id {parts[1]}\n")
                else:
                    out.write(json.dumps(_inspect_item(store, parts[1]), indent=2, ensure_ascii=False) + "\n")
            elif line.startswith("."):
                out.write(f"unknown command {line}; try .help\n")
            else:
                res = execute_instance(line, store, clock)
                out.write(json.dumps(res.to_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n")
            out.flush()
    finally:
        store.close()
    return EXIT_OK


# ---------------------------------------------------------------------------

def main(argv: list[str] | None = None, *, stdin: TextIO | None = None, stdout: TextIO | None = None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = config_from_args(ns)
    try:
        if ns.command == "init":
            return cmd_init(cfg, ns.db_path, stdout)
        if ns.command == "validate":
            return cmd_validate(cfg, ns.input, stdout, stdin)
        if ns.command == "exec":
            return cmd_exec(cfg, ns.input, stdout, dry_run=ns.dry_run, stdin=stdin)
        if ns.command == "bench":
            return cmd_bench(cfg, ns.cases, ns.candidates, ns.report, stdout)
        if ns.command == "repl":
            return cmd_repl(cfg, stdin, stdout)
        if ns.command == "inspect":
            return cmd_inspect(cfg, ns.item_id, stdout)
    except CliError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except ServiceError as exc:
        print(f"E_SERVICE: {exc}", file=sys.stderr)
        return EXIT_INFRA
    parser.error(f"unknown command {ns.command}")
    return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
