"""Structural and cross-field legality checks on decoded schema instances.

Every violated rule yields exactly one :class:`Diagnostic`; validation never
stops at the first failure and never touches a store.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

from .schema import LOCK_MODES, RESERVED_FIELDS, OpKind, SchemaInstance, Stage, infer_stage
from .timeutil import parse_timestamp

# rule -> (stable code, short name)
RULES: dict[str, tuple[str, str]] = {
    "R1": ("E_MISSING_PAYLOAD", "encode-payload"),
    "R2": ("E_LABEL_EMPTY", "label-tags-or-facets"),
    "R3": ("E_EMPTY_SET", "update-set"),
    "R4": ("E_WEIGHT_EXCLUSIVE", "weight-xor-delta"),
    "R5": ("E_EXPIRE_HORIZON", "expire-horizon"),
    "R6": ("E_LOCK_MODE", "lock-mode"),
    "R7": ("E_MISSING_LIMIT", "storage-limit"),
    "R8": ("E_ALL_UNCONFIRMED", "all-needs-confirmation"),
    "R9": ("E_RETRIEVE_ALL_UNCONFIRMED", "retrieve-all-confirm"),
    "R10": ("E_STAGE_MISMATCH", "stage-agrees"),
    "R11": ("E_TARGET_ARITY", "target-arity"),
    "R12": ("E_RANGE", "numeric-ranges"),
    "R13": ("E_HARD_DELETE_UNCONFIRMED", "hard-delete-confirmation"),
    "R14": ("E_RESERVED_FIELD", "reserved-fields"),
}


@dataclass(frozen=True)
class Diagnostic:
    code: str
    path: str
    rule: str
    message: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ValidationReport:
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.diagnostics

    @property
    def rules(self) -> list[str]:
        return [d.rule for d in self.diagnostics]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "diagnostics": [d.to_dict() for d in self.diagnostics]}


def _diag(rule: str, path: str, message: str) -> Diagnostic:
    return Diagnostic(code=RULES[rule][0], path=path, rule=rule, message=message)


def _present(args: dict, key: str) -> bool:
    return args.get(key) is not None


def validate(inst: SchemaInstance) -> ValidationReport:
    out: list[Diagnostic] = []
    op, args, meta, target = inst.op, inst.args, inst.meta, inst.target
    stage = infer_stage(op)

    # R1
    if op is OpKind.ENCODE:
        text = (args.get("payload") or {}).get("text")
        if not isinstance(text, str) or not text.strip():
            out.append(_diag("R1", "/args/payload/text", "Encode requires a non-empty payload.text"))

    # R2
    if op is OpKind.LABEL and not args.get("tags") and not args.get("facets"):
        out.append(_diag("R2", "/args", "Label requires tags or facets"))

    # R3
    if op is OpKind.UPDATE and not args.get("set"):
        out.append(_diag("R3", "/args/set", "Update requires a non-empty set object"))

    # R4
    if op in (OpKind.PROMOTE, OpKind.DEMOTE):
        n = _present(args, "weight") + _present(args, "weight_delta")
        if n != 1:
            out.append(_diag("R4", "/args", "exactly one of weight or weight_delta is required"))

    # R5
    if op is OpKind.EXPIRE:
        n = _present(args, "ttl") + _present(args, "until")
        if n != 1 or not _present(args, "on_expire"):
            out.append(_diag("R5", "/args", "Expire needs exactly one of ttl/until and an on_expire action"))

    # R6
    if op is OpKind.LOCK and args.get("mode") not in LOCK_MODES:
        out.append(_diag("R6", "/args/mode", f"Lock mode must be one of {list(LOCK_MODES)}"))

    # R7
    if stage is Stage.STO and target is not None:
        if target.filter is not None and target.filter.limit is None:
            out.append(_diag("R7", "/target/filter/limit", "storage filters must include a numeric limit"))
        if target.search is not None and target.search.limit is None:
            out.append(_diag("R7", "/target/search/limit", "storage searches must include a numeric limit"))

    # R8 / R9
    if target is not None and target.all:
        if stage is Stage.RET:
            if not meta.confirmation:
                out.append(_diag("R9", "/meta/confirmation", "retrieval with all must confirm explicitly"))
        elif not (meta.confirmation or meta.dry_run):
            out.append(_diag("R8", "/meta", "all=true requires confirmation or dry_run"))

    # R10
    if inst.stage is not None and inst.stage is not stage:
        out.append(_diag("R10", "/stage", f"stage {inst.stage.value} disagrees with {op.value} ({stage.value})"))

    # R11
    if op is OpKind.ENCODE and target is not None:
        out.append(_diag("R11", "/target", "Encode carries no target"))
    elif op is not OpKind.ENCODE and target is None:
        out.append(_diag("R11", "/target", f"{op.value} requires exactly one target"))

    # R12
    problems = _range_problems(inst)
    if problems:
        path, _ = problems[0]
        out.append(_diag("R12", path, "; ".join(msg for _, msg in problems)))

    # R13
    if op is OpKind.DELETE and args.get("mode") == "hard" and not (meta.confirmation or meta.dry_run):
        out.append(_diag("R13", "/meta", "hard delete requires confirmation or dry_run"))

    # R14
    if op is OpKind.UPDATE and isinstance(args.get("set"), dict):
        touched = sorted(k for k in args["set"] if k in RESERVED_FIELDS)
        if touched:
            out.append(_diag("R14", f"/args/set/{touched[0]}", f"reserved fields cannot be updated: {touched}"))

    return ValidationReport(out)


def _range_problems(inst: SchemaInstance) -> list[tuple[str, str]]:
    found: list[tuple[str, str]] = []
    args, target = inst.args, inst.target

    def weight(value: Any, path: str) -> None:
        if value is not None and not 0.0 <= value <= 1.0:
            found.append((path, f"weight {value} outside [0,1]"))

    def positive(value: Any, path: str) -> None:
        if value is not None and value < 1:
            found.append((path, f"{path.rsplit('/', 1)[-1]} must be >= 1"))

    if inst.op in (OpKind.PROMOTE, OpKind.DEMOTE):
        weight(args.get("weight"), "/args/weight")
    if inst.op is OpKind.UPDATE and isinstance(args.get("set"), dict):
        weight(args["set"].get("weight"), "/args/set/weight")
    if inst.op is OpKind.SPLIT:
        positive(args.get("chunk_size"), "/args/chunk_size")
    if inst.op is OpKind.SUMMARIZE:
        positive(args.get("max_tokens"), "/args/max_tokens")

    if target is not None and target.filter is not None:
        f = target.filter
        positive(f.limit, "/target/filter/limit")
        tr = f.time_range
        if tr is not None and tr.start is not None and tr.end is not None:
            if parse_timestamp(tr.start) > parse_timestamp(tr.end):
                found.append(("/target/filter/time_range", "time_range start is after end"))
        wr = f.weight_range
        if wr is not None and wr.min is not None and wr.max is not None:
            lo, hi = min(max(wr.min, 0.0), 1.0), min(max(wr.max, 0.0), 1.0)
            if lo > hi:
                found.append(("/target/filter/weight_range", "weight_range min exceeds max"))
    if target is not None and target.search is not None:
        s = target.search
        positive(s.limit, "/target/search/limit")
        if s.overrides is not None:
            positive(s.overrides.k, "/target/search/overrides/k")
            positive(s.overrides.limit, "/target/search/overrides/limit")
    return found
