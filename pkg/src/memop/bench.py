"""Benchmark harness: scenario setup, expectation templates and SMA/ESR/EMR.

A case runs on a blank store: prerequisites build the context, then the
candidate ``schema_list`` executes step by step with a store snapshot taken
before and after every step.  Expectations are bound to a step index and
checked with SQL against those snapshots.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable

from scipy.stats import kendalltau

from .adapter import execute_instance
from .schema import OpKind, SchemaError, canonical_json, encode_instance, instance_from_obj
from .services import ModelServices, StubServices, cosine
from .store import ExecutionResult, MemoryStore, StoreConfig
from .timeutil import fixed_clock, is_timestamp, parse_timestamp, to_utc
from .typed import TypedOp, clamp01, dedupe, parse
from .validator import validate

log = logging.getLogger(__name__)

TEMPLATE_KINDS = frozenset(op.value.lower() for op in OpKind) | {"sql"}


class BenchError(Exception):
    pass


class NoValidCases(BenchError):
    pass


class SetupFailed(BenchError):
    pass


class UnboundAssertion(BenchError):
    pass


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

@dataclass
class Assertion:
    kind: str
    op_index: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "op_index": self.op_index, "params": self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "Assertion":
        if d.get("kind") not in TEMPLATE_KINDS:
            raise ValueError(f"unknown assertion kind {d.get('kind')!r}")
        if not isinstance(d.get("op_index"), int) or isinstance(d.get("op_index"), bool):
            raise ValueError("assertion op_index must be an integer")
        return cls(kind=d["kind"], op_index=d["op_index"], params=dict(d.get("params") or {}))


@dataclass
class BenchCase:
    case_id: str
    nl: dict[str, str]
    instruction_type: str
    structure: str
    prerequisites: list[dict]
    schema_list: list[dict]
    expectations: list[Assertion] = field(default_factory=list)
    clock: str | None = None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id, "nl": self.nl, "instruction_type": self.instruction_type,
            "structure": self.structure, "prerequisites": self.prerequisites,
            "schema_list": self.schema_list,
            "expectations": [a.to_dict() for a in self.expectations], "clock": self.clock,
        }


@dataclass(frozen=True)
class LoadDiagnostic:
    line: int
    case_id: str | None
    message: str

    def to_dict(self) -> dict:
        return {"line": self.line, "case_id": self.case_id, "message": self.message}


@dataclass
class CaseResult:
    case_id: str
    voided: bool = False
    void_reason: str | None = None
    sma: int = 0
    esr: int = 0
    satisfied: int = 0
    total: int = 0
    sma_per_op: Fraction = Fraction(0)
    assertions: list[dict] = field(default_factory=list)
    results: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id, "voided": self.voided, "void_reason": self.void_reason,
            "sma": self.sma, "esr": self.esr, "satisfied": self.satisfied, "total": self.total,
            "sma_per_op": _ratio(self.sma_per_op), "assertions": self.assertions,
            "results": self.results,
        }


@dataclass
class MetricsReport:
    cases: list[CaseResult]
    load_diagnostics: list[LoadDiagnostic] = field(default_factory=list)

    @property
    def scored(self) -> list[CaseResult]:
        return [c for c in self.cases if not c.voided]

    @property
    def sma_fraction(self) -> Fraction | None:
        s = self.scored
        return Fraction(sum(c.sma for c in s), len(s)) if s else None

    @property
    def esr_fraction(self) -> Fraction | None:
        s = self.scored
        return Fraction(sum(c.esr for c in s), len(s)) if s else None

    @property
    def emr_fraction(self) -> Fraction | None:
        total = sum(c.total for c in self.scored)
        return Fraction(sum(c.satisfied for c in self.scored), total) if total else None

    @property
    def sma(self) -> float | None:
        return _ratio(self.sma_fraction)

    @property
    def esr(self) -> float | None:
        return _ratio(self.esr_fraction)

    @property
    def emr(self) -> float | None:
        return _ratio(self.emr_fraction)

    def counts(self) -> dict:
        s = self.scored
        return {
            "cases": len(self.cases),
            "scored": len(s),
            "voided": len(self.cases) - len(s),
            "sma_hits": sum(c.sma for c in s),
            "esr_hits": sum(c.esr for c in s),
            "assertions_total": sum(c.total for c in s),
            "assertions_satisfied": sum(c.satisfied for c in s),
        }

    def to_dict(self) -> dict:
        s = self.scored
        per_op = Fraction(sum(c.sma_per_op for c in s), len(s)) if s else None
        return {
            "sma": self.sma, "esr": self.esr, "emr": self.emr,
            "counts": self.counts(),
            # partial-credit string match over positions; not one of the headline metrics
            "supplementary": {"sma_per_op": _ratio(per_op)},
            "cases": [c.to_dict() for c in self.cases],
            "load_diagnostics": [d.to_dict() for d in self.load_diagnostics],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def table(self) -> str:
        lines = [f"{'case':<32} {'SMA':>4} {'ESR':>4} {'EMR':>9}"]
        for c in self.cases:
            if c.voided:
                lines.append(f"{c.case_id:<32} {'void':>4} {'':>4} {c.void_reason or '':>9}")
            else:
                lines.append(f"{c.case_id:<32} {c.sma:>4} {c.esr:>4} {f'{c.satisfied}/{c.total}':>9}")
        k = self.counts()
        lines.append("-" * 52)
        lines.append(f"SMA={_fmt(self.sma)}  ESR={_fmt(self.esr)}  EMR={_fmt(self.emr)}  "
                     f"({k['assertions_satisfied']}/{k['assertions_total']} assertions, "
                     f"{k['scored']} scored, {k['voided']} voided)")
        return "\n".join(lines)


def _ratio(f: Fraction | None) -> float | None:
    return None if f is None else float(f)


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.4f}"


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _check_instances(items: Any, what: str) -> list[dict]:
    if not isinstance(items, list):
        raise ValueError(f"{what} must be a list")
    for i, obj in enumerate(items):
        try:
            inst = instance_from_obj(obj)
        except SchemaError as exc:
            raise ValueError(f"{what}[{i}]: {exc}") from exc
        report = validate(inst)
        if not report.ok:
            raise ValueError(f"{what}[{i}] fails validation: {report.rules}")
    return items


def case_from_dict(d: Any) -> BenchCase:
    if not isinstance(d, dict):
        raise ValueError("case must be a JSON object")
    known = {"case_id", "nl", "instruction_type", "structure", "prerequisites",
             "schema_list", "expectations", "clock"}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown case fields {sorted(extra)}")
    if not isinstance(d.get("case_id"), str) or not d["case_id"]:
        raise ValueError("case_id must be a non-empty string")
    nl = d.get("nl")
    if not isinstance(nl, dict) or not any(isinstance(nl.get(k), str) and nl[k] for k in ("en", "zh")):
        raise ValueError("nl needs at least one of en/zh")
    if d.get("instruction_type") not in ("direct", "indirect"):
        raise ValueError("instruction_type must be direct or indirect")
    if d.get("structure") not in ("single", "workflow"):
        raise ValueError("structure must be single or workflow")
    prereq = _check_instances(d.get("prerequisites", []), "prerequisites")
    gold = _check_instances(d.get("schema_list"), "schema_list")
    if not gold:
        raise ValueError("schema_list must be non-empty")
    if d["structure"] == "workflow" and len(gold) < 2:
        raise ValueError("workflow cases need at least two steps")
    clock = d.get("clock")
    if clock is not None and not is_timestamp(clock):
        raise ValueError("clock must be an RFC3339 timestamp")
    expectations = [Assertion.from_dict(a) for a in d.get("expectations", [])]
    for a in expectations:
        if not 0 <= a.op_index < len(gold):
            raise UnboundAssertion(f"assertion {a.kind} bound to step {a.op_index}, schema_list has {len(gold)}")
    return BenchCase(
        case_id=d["case_id"], nl=nl, instruction_type=d["instruction_type"],
        structure=d["structure"], prerequisites=prereq, schema_list=gold,
        expectations=expectations, clock=clock,
    )


def load_cases(path: str | Path) -> tuple[list[BenchCase], list[LoadDiagnostic]]:
    """Read a JSONL case file; malformed lines are reported and skipped."""
    cases: list[BenchCase] = []
    diags: list[LoadDiagnostic] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            case_id = None
            try:
                raw = json.loads(line)
                case_id = raw.get("case_id") if isinstance(raw, dict) else None
                case = case_from_dict(raw)
                if case.case_id in seen:
                    raise ValueError(f"duplicate case_id {case.case_id!r}")
            except (ValueError, BenchError) as exc:
                diags.append(LoadDiagnostic(lineno, case_id, str(exc)))
                continue
            seen.add(case.case_id)
            cases.append(case)
    if not cases:
        raise NoValidCases(f"no valid cases in {path}" + (f" ({len(diags)} malformed)" if diags else ""))
    return cases, diags


def load_candidates(path: str | Path) -> dict[str, list]:
    """JSONL rows ``{"case_id": ..., "schema_list": [...]}``."""
    out: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[row["case_id"]] = row["schema_list"]
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("candidate line %d skipped: %s", lineno, exc)
    return out


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass
class BenchConfig:
    services_factory: Callable[[], ModelServices] = StubServices
    store_config: StoreConfig = field(default_factory=StoreConfig)
    default_clock: str | None = None

    def new_store(self) -> MemoryStore:
        return MemoryStore(":memory:", self.services_factory(), self.store_config)

    def clock_for(self, case: BenchCase):
        stamp = case.clock or self.default_clock
        if stamp is None:
            raise BenchError(f"case {case.case_id} has no clock and no default clock was given")
        return fixed_clock(stamp)


def setup_scenario(case: BenchCase, backend: MemoryStore, clock) -> None:
    for i, step in enumerate(case.prerequisites):
        res = execute_instance(step, backend, clock)
        if not res.ok:
            msgs = "; ".join(d.message for d in res.diagnostics)
            raise SetupFailed(f"prerequisite {i} failed: {msgs}")


# ---------------------------------------------------------------------------
# planning metrics
# ---------------------------------------------------------------------------

def _canon(obj: Any) -> str | None:
    try:
        if isinstance(obj, (str, bytes)):
            from .schema import decode_instance
            return encode_instance(decode_instance(obj))
        return encode_instance(instance_from_obj(obj))
    except SchemaError:
        return None


def eval_sma(generated: list | None, gold: list) -> int:
    """1 iff both lists have equal length and match position by position canonically."""
    if generated is None or len(generated) != len(gold):
        return 0
    for g, s in zip(generated, gold):
        cg = _canon(g)
        if cg is None or cg != _canon(s):
            return 0
    return 1


def sma_per_op(generated: list | None, gold: list) -> Fraction:
    if not generated:
        return Fraction(0)
    hits = sum(1 for g, s in zip(generated, gold) if (c := _canon(g)) is not None and c == _canon(s))
    return Fraction(hits, max(len(generated), len(gold)))


@dataclass
class Execution:
    results: list[ExecutionResult]
    snapshots: list[MemoryStore]  # snapshots[i] before step i, snapshots[i+1] after it

    @property
    def success(self) -> int:
        return int(bool(self.results) and all(r.ok for r in self.results))


def execute_with_snapshots(steps: list, backend: MemoryStore, clock) -> Execution:
    results: list[ExecutionResult] = []
    snaps = [backend.clone()]
    for step in steps:
        res = execute_instance(step, backend, clock)
        results.append(res)
        snaps.append(backend.clone())
        if not res.ok:
            break
    return Execution(results, snaps)


def eval_esr(generated: list | None, backend: MemoryStore, clock) -> tuple[int, Execution]:
    if not generated:
        return 0, Execution([], [backend.clone()])
    ex = execute_with_snapshots(generated, backend, clock)
    ok = ex.success and len(ex.results) == len(generated)
    return int(ok), ex


# ---------------------------------------------------------------------------
# expectation templates
# ---------------------------------------------------------------------------

def bind_assertions(op: TypedOp, target_ids: list[str], op_index: int = 0,
                    *, active_ids: Iterable[str] | None = None, tau: float = 0.5) -> list[Assertion]:
    """Instantiate the verb's expectation template with concrete ids/values."""
    ids = list(target_ids)
    kind = op.op.value.lower()
    if op.op is OpKind.ENCODE:
        params: dict = {"delta": 1}
    elif op.op is OpKind.UPDATE:
        values = {}
        for k, v in op.args.set:
            if k == "tags":
                v = list(dedupe(list(v)))
            elif k == "facets":
                v = dict(v)
            elif k == "weight":
                v = clamp01(v)
            values[k] = v
        params = {"ids": ids, "values": values}
    elif op.op is OpKind.MERGE:
        params = {"sources": ids}
    elif op.op is OpKind.SPLIT:
        params = {"sources": ids}
    elif op.op is OpKind.DELETE:
        active = set(active_ids) if active_ids is not None else set(ids)
        params = {"ids": ids, "n": sum(1 for i in ids if i in active)}
    elif op.op is OpKind.RETRIEVE:
        params = {"ids": ids}
    elif op.op is OpKind.SUMMARIZE:
        params = {"tau": tau}
    else:  # Label, Promote, Demote, Lock, Expire
        params = {"ids": ids}
    return [Assertion(kind=kind, op_index=op_index, params=params)]


def _q1(store: MemoryStore, sql: str, args: tuple = ()) -> Any:
    row = store.conn.execute(sql, args).fetchone()
    return None if row is None else row[0]


def _row(store: MemoryStore, item_id: str):
    return store.conn.execute("SELECT * FROM memory_items WHERE id=?", (item_id,)).fetchone()


def check_assertion(a: Assertion, before: MemoryStore, after: MemoryStore,
                    result: ExecutionResult | None) -> bool:
    """Evaluate one expectation against the step's before/after snapshots."""
    p = a.params
    k = a.kind
    if k == "encode":
        n0 = _q1(before, "SELECT COUNT(*) FROM memory_items")
        n1 = _q1(after, "SELECT COUNT(*) FROM memory_items")
        return n1 - n0 == p.get("delta", 1)

    if k == "delete":
        n0 = _q1(before, "SELECT COUNT(*) FROM memory_items WHERE deleted=0")
        n1 = _q1(after, "SELECT COUNT(*) FROM memory_items WHERE deleted=0")
        return n1 - n0 == -p["n"]

    if k == "retrieve":
        if result is None or not result.ok:
            return False
        got = [row["id"] for row in result.payload.get("items", [])]
        return got == list(p["ids"])

    if k == "summarize":
        new = after.conn.execute("SELECT id, text FROM memory_items WHERE type='summary'").fetchall()
        old = {r[0] for r in before.conn.execute("SELECT id FROM memory_items WHERE type='summary'")}
        fresh = [r for r in new if r["id"] not in old]
        if not fresh:
            return False
        services = after.services
        for r in fresh:
            refs = [x[0] for x in after.conn.execute(
                "SELECT child_id FROM lineage WHERE parent_id=? AND relation='summary'", (r["id"],))]
            texts = [_q1(after, "SELECT text FROM memory_items WHERE id=?", (ref,)) for ref in refs]
            texts = [t for t in texts if t is not None]
            if not texts:
                return False
            sim = cosine(services.embed(r["text"]), services.embed("\n".join(texts)))
            if sim < p.get("tau", after.config.tau):
                return False
        return True

    if k == "sql":
        db = before if p.get("on") == "before" else after
        value = _q1(db, p["query"])
        return value == p["expected"]

    if k in ("merge", "split"):
        sources = list(p["sources"])
        if not sources:
            return False
        if k == "merge":
            primaries = set()
            for sid in sources:
                r = _row(after, sid)
                if r is None or r["merged_into"] is None:
                    return False
                primaries.add(r["merged_into"])
            if len(primaries) != 1:
                return False
            (primary,) = primaries
            return _row(after, primary) is not None and _row(before, primary) is None
        for sid in sources:
            kids = [x[0] for x in after.conn.execute(
                "SELECT child_id FROM lineage WHERE parent_id=? AND relation='split'", (sid,))]
            if len(kids) <= 1:
                return False
            for cid in kids:
                r = _row(after, cid)
                if r is None or r["parent_id"] != sid:
                    return False
        return True

    ids = list(p.get("ids", []))
    if not ids:
        return False
    for iid in ids:
        b, r = _row(before, iid), _row(after, iid)
        if r is None:
            return False
        if k == "update":
            item_b, item_a = before.get(iid), after.get(iid)
            if item_b is None or item_a.lineage_digest() != item_b.lineage_digest():
                return False
            current = item_a.to_dict(list(p["values"]))
            for field_, expected in p["values"].items():
                got = current.get(field_)
                if field_ == "time" and got is not None and expected is not None:
                    if to_utc(parse_timestamp(got)) != to_utc(parse_timestamp(expected)):
                        return False
                elif got != expected:
                    return False
        elif k == "label":
            tags = json.loads(r["tags"])
            if len(tags) != len(set(tags)):
                return False
            if b is not None and (tags, json.loads(r["facets"])) == (json.loads(b["tags"]), json.loads(b["facets"])):
                return False
        elif k == "promote":
            raised = b is not None and r["weight"] > b["weight"]
            trig = _q1(after, "SELECT COUNT(*) FROM triggers WHERE item_id=? AND kind='reminder'", (iid,))
            if not (raised or trig):
                return False
        elif k == "demote":
            if b is None or not r["weight"] < b["weight"] or r["deleted"]:
                return False
        elif k == "lock":
            mode = _q1(after, "SELECT mode FROM locks WHERE item_id=?", (iid,))
            if mode not in ("read_only", "append_only"):
                return False
        elif k == "expire":
            trig = _q1(after, "SELECT COUNT(*) FROM triggers WHERE item_id=? AND kind='expire'", (iid,))
            if r["expiry_until"] is None or not trig:
                return False
        else:
            raise ValueError(f"unknown assertion kind {k!r}")
    return True


def eval_emr(results: list[ExecutionResult], expectations: list[Assertion],
             snapshots: list[MemoryStore], n_steps: int | None = None) -> tuple[int, int, list[dict]]:
    """Return (satisfied, total, per-assertion detail).

    An assertion whose step did not run successfully counts as unsatisfied.
    """
    limit = n_steps if n_steps is not None else len(results)
    satisfied = 0
    detail = []
    for a in expectations:
        if not 0 <= a.op_index < limit:
            raise UnboundAssertion(f"assertion {a.kind} bound to step {a.op_index} of {limit}")
        ok = False
        if a.op_index < len(results) and results[a.op_index].ok:
            ok = check_assertion(a, snapshots[a.op_index], snapshots[a.op_index + 1], results[a.op_index])
        satisfied += ok
        row = {"kind": a.kind, "op_index": a.op_index, "satisfied": ok}
        if a.kind == "retrieve" and a.op_index < len(results):
            row["ranking"] = _ranking_info(a.params["ids"], results[a.op_index])
        detail.append(row)
    return satisfied, len(expectations), detail


def _ranking_info(expected: list[str], result: ExecutionResult) -> dict:
    got = [row["id"] for row in result.payload.get("items", [])] if result.ok else []
    common = [i for i in expected if i in got]
    tau = None
    if len(common) >= 2:
        t = kendalltau([expected.index(i) for i in common], [got.index(i) for i in common]).statistic
        tau = None if t != t else round(float(t), 12)
    return {"exact_set": set(got) == set(expected), "rank_match": got == list(expected), "kendall_tau": tau}


# ---------------------------------------------------------------------------
# case runner
# ---------------------------------------------------------------------------

def bind_gold(case: BenchCase, config: BenchConfig) -> list[Assertion]:
    """Run the gold list on a fresh scenario and bind the per-verb templates."""
    store = config.new_store()
    clock = config.clock_for(case)
    setup_scenario(case, store, clock)
    out: list[Assertion] = []
    now = clock()
    for i, step in enumerate(case.schema_list):
        inst = instance_from_obj(step)
        op = parse(inst, clock)
        ids: list[str] = []
        active = None
        if op.target is not None:
            store.sweep_expired(now)  # same view the step will see
            read = op.op in (OpKind.RETRIEVE, OpKind.SUMMARIZE)
            ids = store.resolve_target(op.target, now, op.op, for_read=read)
            active = [iid for iid in ids if (it := store.get(iid)) is not None and not it.deleted]
        res = execute_instance(step, store, clock)
        if not res.ok:
            raise SetupFailed(f"gold step {i} failed: {[d.message for d in res.diagnostics]}")
        if op.op is OpKind.RETRIEVE:
            ids = [row["id"] for row in res.payload.get("items", [])]
        out += bind_assertions(op, ids, i, active_ids=active, tau=store.config.tau)
    return out


def run_case(case: BenchCase, candidate: list | None, config: BenchConfig) -> CaseResult:
    cr = CaseResult(case_id=case.case_id)
    try:
        expectations = case.expectations or bind_gold(case, config)
        store = config.new_store()
        clock = config.clock_for(case)
        setup_scenario(case, store, clock)
    except (SetupFailed, BenchError, SchemaError, ValueError) as exc:
        cr.voided, cr.void_reason = True, f"{type(exc).__name__}: {exc}"
        return cr

    cr.sma = eval_sma(candidate, case.schema_list)
    cr.sma_per_op = sma_per_op(candidate, case.schema_list)
    cr.esr, ex = eval_esr(candidate, store, clock)
    cr.satisfied, cr.total, cr.assertions = eval_emr(ex.results, expectations, ex.snapshots,
                                                     n_steps=len(case.schema_list))
    cr.results = [r.to_dict() for r in ex.results]
    return cr


def run_bench(cases: list[BenchCase], candidates: dict[str, list] | None = None,
              config: BenchConfig | None = None,
              load_diagnostics: list[LoadDiagnostic] | None = None) -> MetricsReport:
    """Score candidates against gold; ``candidates=None`` runs the gold self-test."""
    config = config or BenchConfig()
    out = []
    for case in cases:
        cand = case.schema_list if candidates is None else candidates.get(case.case_id)
        out.append(run_case(case, cand, config))
    return MetricsReport(out, list(load_diagnostics or []))


def fixture_path() -> Path:
    return Path(__file__).with_name("fixtures") / "cases.jsonl"
