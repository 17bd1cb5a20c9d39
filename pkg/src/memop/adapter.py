"""Backend execution contract and the decode -> validate -> parse -> dispatch pipeline."""

from __future__ import annotations

import dataclasses
import json
from datetime import datetime
from typing import Any, Callable, Iterable, Protocol, Union

from .schema import OpKind, SchemaError, SchemaInstance, Stage, decode_instance, instance_from_obj
from .store import AuditRecord, ExecutionResult
from .timeutil import wall_clock
from .typed import ParseError, TypedOp, parse
from .validator import Diagnostic, validate

Clock = Callable[[], datetime]


class Backend(Protocol):
    """What an adapter needs from a backend.

    ``execute`` must be atomic: an error result implies no state change.
    """

    @property
    def capabilities(self) -> frozenset[OpKind]: ...

    def execute(self, op: TypedOp, now: datetime) -> ExecutionResult: ...

    def snapshot_digest(self) -> bytes: ...

    def content_digest(self) -> str: ...

    def clone(self) -> "Backend": ...

    def append_audit(self, actor: str | None, op: OpKind, affected_ids: list[str],
                     before: str, after: str, timestamp: datetime) -> AuditRecord: ...


def _error(op: OpKind | None, code: str, rule: str, message: str, path: str = "", dry_run: bool = False) -> ExecutionResult:
    return ExecutionResult(
        status="error", op=op, dry_run=dry_run,
        diagnostics=[Diagnostic(code=code, path=path, rule=rule, message=message)],
    )


def confirmation_gate(op: TypedOp) -> Diagnostic | None:
    """Runtime re-check of the wide-write and hard-delete switches."""
    meta = op.meta
    if op.target is not None and op.target.kind == "all":
        if op.stage is Stage.RET and not meta.confirmation:
            return Diagnostic("E_CONFIRMATION_REQUIRED", "/meta/confirmation", "ConfirmationRequired",
                              "retrieval over all items must be confirmed")
        if op.stage is not Stage.RET and not (meta.confirmation or meta.dry_run):
            return Diagnostic("E_CONFIRMATION_REQUIRED", "/meta", "ConfirmationRequired",
                              "global writes need confirmation or dry_run")
    if op.op is OpKind.DELETE and op.args.mode == "hard" and not (meta.confirmation or meta.dry_run):
        return Diagnostic("E_CONFIRMATION_REQUIRED", "/meta", "ConfirmationRequired",
                          "hard delete needs confirmation or dry_run")
    return None


def dispatch(op: TypedOp, backend: Backend, clock: Clock | None = None) -> ExecutionResult:
    now = (clock or wall_clock)()
    if op.op not in backend.capabilities:
        return _error(op.op, "E_UNSUPPORTED_OP", "UnsupportedOp", f"backend does not support {op.op.value}")
    gate = confirmation_gate(op)
    if gate is not None:
        return ExecutionResult(status="error", op=op.op, diagnostics=[gate], dry_run=op.dry_run)

    if op.dry_run:
        sandbox = backend.clone()
        result = sandbox.execute(op, now)
        result.dry_run = True
        return result

    before = backend.content_digest()
    result = backend.execute(op, now)
    if result.ok:
        backend.append_audit(op.meta.actor, op.op, result.affected_ids, before, backend.content_digest(), now)
    return result


Step = Union[TypedOp, SchemaInstance, str, bytes, dict]


def execute_instance(step: Step, backend: Backend, clock: Clock | None = None,
                     *, force_dry_run: bool = False) -> ExecutionResult:
    """Run one step through the full pipeline; failures come back as error results."""
    clock = clock or wall_clock
    if isinstance(step, TypedOp):
        op = step
        if force_dry_run and not op.meta.dry_run:
            op = dataclasses.replace(op, meta=dataclasses.replace(op.meta, dry_run=True))
        return dispatch(op, backend, clock)

    try:
        if isinstance(step, SchemaInstance):
            inst = step
        elif isinstance(step, dict):
            inst = instance_from_obj(step)
        else:
            inst = decode_instance(step)
    except SchemaError as exc:
        op_guess = _guess_op(step)
        return ExecutionResult(status="error", op=op_guess, diagnostics=[
            Diagnostic(exc.code, exc.path, type(exc).__name__, str(exc))])

    if force_dry_run and not inst.meta.dry_run:
        inst = dataclasses.replace(inst, meta=dataclasses.replace(inst.meta, dry_run=True))

    report = validate(inst)
    if not report.ok:
        return ExecutionResult(status="error", op=inst.op, diagnostics=list(report.diagnostics),
                               dry_run=inst.meta.dry_run)
    try:
        op = parse(inst, clock)
    except (ParseError, ValueError) as exc:
        code = getattr(exc, "code", "E_PARSE")
        return _error(inst.op, code, type(exc).__name__, str(exc), dry_run=inst.meta.dry_run)
    return dispatch(op, backend, clock)


def _guess_op(step: Any) -> OpKind | None:
    if isinstance(step, dict):
        raw = step.get("op")
    else:
        try:
            raw = json.loads(step).get("op")
        except Exception:
            return None
    try:
        return OpKind(raw)
    except ValueError:
        return None


def run_sequence(steps: Iterable[Step], backend: Backend, clock: Clock | None = None,
                 *, force_dry_run: bool = False) -> list[ExecutionResult]:
    """Fail-stop execution: after the first error the remaining steps are skipped."""
    results: list[ExecutionResult] = []
    failed = False
    for step in steps:
        if failed:
            op = step.op if isinstance(step, (TypedOp, SchemaInstance)) else _guess_op(step)
            results.append(ExecutionResult(status="skipped", op=op))
            continue
        res = execute_instance(step, backend, clock, force_dry_run=force_dry_run)
        results.append(res)
        failed = not res.ok
    return results
