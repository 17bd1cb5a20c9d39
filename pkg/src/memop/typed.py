"""Typed operation objects: the normalized internal form dispatched to backends."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Callable, Union

from .schema import (
    Filter,
    Intent,
    Meta,
    OpKind,
    Overrides,
    SchemaInstance,
    SearchSpec,
    Stage,
    Target,
    TimeRange,
    WeightRange,
    infer_stage,
)
from .timeutil import NEG_INF, POS_INF, format_timestamp, parse_duration, parse_timestamp, to_utc
from .validator import validate

log = logging.getLogger(__name__)

DEFAULT_RETRIEVE_K = 10
DEFAULT_MAX_TOKENS = 256
DEFAULT_CHUNK_SIZE = 200


class ParseError(ValueError):
    code = "E_PARSE"


class InconsistentInstance(ParseError):
    code = "E_INCONSISTENT_INSTANCE"


class UnresolvableTime(ParseError):
    code = "E_UNRESOLVABLE_TIME"


class InvertedRange(ParseError):
    code = "E_INVERTED_RANGE"


class BothOrNeither(ParseError):
    code = "E_BOTH_OR_NEITHER"


def clamp01(x: float) -> float:
    return min(max(float(x), 0.0), 1.0)


def normalize_weight(current: float, set_weight: float | None = None, delta: float | None = None) -> float:
    if (set_weight is None) == (delta is None):
        raise BothOrNeither("exactly one of set_weight/delta must be given")
    if set_weight is not None:
        return clamp01(set_weight)
    return clamp01(current + delta)


def normalize_time_range(start: str | datetime | None, end: str | datetime | None) -> tuple[datetime, datetime]:
    """Absolute UTC interval; a missing bound becomes an infinity sentinel."""
    if start is None and end is None:
        raise InconsistentInstance("time range needs at least one bound")
    lo = to_utc(parse_timestamp(start) if isinstance(start, str) else start) if start is not None else NEG_INF
    hi = to_utc(parse_timestamp(end) if isinstance(end, str) else end) if end is not None else POS_INF
    if lo > hi:
        raise InvertedRange(f"start {start} is after end {end}")
    return lo, hi


def dedupe(items: list[str] | tuple[str, ...]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(items))


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResolvedFilter:
    has_tags: tuple[str, ...] = ()
    type: str | None = None
    time_range: tuple[datetime, datetime] | None = None
    weight_range: tuple[float, float] | None = None
    limit: int | None = None


@dataclass(frozen=True)
class ResolvedSearch:
    query: str
    context: str | None = None
    order_by: str = "relevance"
    limit: int = DEFAULT_RETRIEVE_K


@dataclass(frozen=True)
class ResolvedTarget:
    kind: str  # ids | filter | search | all
    ids: tuple[str, ...] = ()
    filter: ResolvedFilter | None = None
    search: ResolvedSearch | None = None


def _resolve_target(t: Target) -> ResolvedTarget:
    if t.ids is not None:
        return ResolvedTarget("ids", ids=dedupe(t.ids))
    if t.filter is not None:
        f = t.filter
        tr = normalize_time_range(f.time_range.start, f.time_range.end) if f.time_range else None
        wr = None
        if f.weight_range is not None:
            lo = clamp01(f.weight_range.min) if f.weight_range.min is not None else 0.0
            hi = clamp01(f.weight_range.max) if f.weight_range.max is not None else 1.0
            wr = (lo, hi)
        return ResolvedTarget("filter", filter=ResolvedFilter(
            has_tags=dedupe(f.has_tags or ()), type=f.type, time_range=tr, weight_range=wr, limit=f.limit,
        ))
    if t.search is not None:
        s = t.search
        ov = s.overrides or Overrides()
        limits = [x for x in (s.limit, ov.limit, ov.k) if x is not None]
        return ResolvedTarget("search", search=ResolvedSearch(
            query=s.intent.query,
            context=s.intent.context,
            order_by=ov.order_by or "relevance",
            limit=min(limits) if limits else DEFAULT_RETRIEVE_K,
        ))
    return ResolvedTarget("all")


# ---------------------------------------------------------------------------
# per-verb argument records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncodeArgs:
    text: str
    tags: tuple[str, ...] = ()
    type: str = "note"
    time: datetime | None = None
    source: str | None = None
    location: str | None = None
    facets: tuple[tuple[str, str], ...] = ()
    use_embedding: bool = True


@dataclass(frozen=True)
class UpdateArgs:
    set: tuple[tuple[str, Any], ...]


@dataclass(frozen=True)
class LabelArgs:
    tags: tuple[str, ...] = ()
    facets: tuple[tuple[str, str], ...] = ()
    mode: str = "add"


@dataclass(frozen=True)
class Reminder:
    at: datetime | None = None
    cadence: str | None = None


@dataclass(frozen=True)
class PromoteArgs:
    weight: float | None = None
    weight_delta: float | None = None
    reminder: Reminder | None = None
    reason: str | None = None


@dataclass(frozen=True)
class DemoteArgs:
    weight: float | None = None
    weight_delta: float | None = None
    archive: bool = False
    reason: str | None = None


@dataclass(frozen=True)
class MergeArgs:
    strategy: str = "concat_dedupe"
    delete_children: bool = False


@dataclass(frozen=True)
class DeleteArgs:
    mode: str = "soft"
    reason: str | None = None


@dataclass(frozen=True)
class SplitArgs:
    strategy: str = "sentences"
    chunk_size: int = DEFAULT_CHUNK_SIZE


@dataclass(frozen=True)
class LockPolicy:
    allow: tuple[str, ...] = ()
    deny: tuple[str, ...] = ()
    reviewers: tuple[str, ...] = ()
    expires: datetime | None = None


@dataclass(frozen=True)
class LockArgs:
    mode: str
    reason: str | None = None
    policy: LockPolicy = LockPolicy()


@dataclass(frozen=True)
class ExpireArgs:
    until: datetime
    on_expire: str


@dataclass(frozen=True)
class RetrieveArgs:
    fields: tuple[str, ...] | None = None


@dataclass(frozen=True)
class SummarizeArgs:
    focus: str | None = None
    max_tokens: int = DEFAULT_MAX_TOKENS


OpArgs = Union[
    EncodeArgs, UpdateArgs, LabelArgs, PromoteArgs, DemoteArgs, MergeArgs,
    DeleteArgs, SplitArgs, LockArgs, ExpireArgs, RetrieveArgs, SummarizeArgs,
]


@dataclass(frozen=True)
class TypedOp:
    op: OpKind
    stage: Stage
    target: ResolvedTarget | None
    args: OpArgs
    meta: Meta = field(default_factory=Meta)

    @property
    def dry_run(self) -> bool:
        return self.meta.dry_run

    def to_instance(self) -> SchemaInstance:
        """Re-express the normalized operation as a schema instance."""
        return SchemaInstance(
            op=self.op,
            stage=self.stage,
            target=_target_to_schema(self.target),
            args=_args_to_json(self.op, self.args),
            meta=self.meta,
        )

    def debug_json(self) -> str:
        """Non-canonical dump for logs."""
        return json.dumps(asdict(self), default=_debug_default, sort_keys=True)


def _debug_default(o: Any) -> Any:
    if isinstance(o, datetime):
        return format_timestamp(o)
    if isinstance(o, (OpKind, Stage)):
        return o.value
    return str(o)


# ---------------------------------------------------------------------------
# parse
# ---------------------------------------------------------------------------

def parse(
    inst: SchemaInstance,
    now: datetime | Callable[[], datetime] | None = None,
    *,
    strict: bool = False,
) -> TypedOp:
    """Normalize a validated instance.

    ``now`` anchors a ttl when ``meta.timestamp`` is absent.  In strict mode a
    missing anchor raises :class:`UnresolvableTime` instead of reading the
    wall clock.
    """
    report = validate(inst)
    if not report.ok:
        raise InconsistentInstance(f"instance failed validation: {report.rules}")

    op, a = inst.op, inst.args
    target = _resolve_target(inst.target) if inst.target is not None else None

    if op is OpKind.ENCODE:
        args: OpArgs = EncodeArgs(
            text=a["payload"]["text"],
            tags=dedupe(a.get("tags", ())),
            type=a.get("type", "note"),
            time=to_utc(parse_timestamp(a["time"])) if "time" in a else None,
            source=a.get("source"),
            location=a.get("location"),
            facets=tuple(sorted(a.get("facets", {}).items())),
            use_embedding=a.get("use_embedding", True),
        )
    elif op is OpKind.UPDATE:
        changes = dict(a["set"])
        if "tags" in changes:
            changes["tags"] = list(dedupe(changes["tags"]))
        if "time" in changes:
            changes["time"] = format_timestamp(parse_timestamp(changes["time"]))
        args = UpdateArgs(set=tuple(sorted((k, _freeze(v)) for k, v in changes.items())))
    elif op is OpKind.LABEL:
        args = LabelArgs(
            tags=dedupe(a.get("tags", ())),
            facets=tuple(sorted(a.get("facets", {}).items())),
            mode=a.get("mode", "add"),
        )
    elif op is OpKind.PROMOTE:
        if a.get("weight_delta") is not None and a["weight_delta"] < 0:
            log.warning("Promote with negative weight_delta %s", a["weight_delta"])
        reminder = None
        if a.get("reminder"):
            r = a["reminder"]
            reminder = Reminder(
                at=to_utc(parse_timestamp(r["at"])) if "at" in r else None,
                cadence=r.get("cadence"),
            )
        args = PromoteArgs(
            weight=a.get("weight"), weight_delta=a.get("weight_delta"),
            reminder=reminder, reason=a.get("reason"),
        )
    elif op is OpKind.DEMOTE:
        if a.get("weight_delta") is not None and a["weight_delta"] > 0:
            log.warning("Demote with positive weight_delta %s", a["weight_delta"])
        args = DemoteArgs(
            weight=a.get("weight"), weight_delta=a.get("weight_delta"),
            archive=a.get("archive", False), reason=a.get("reason"),
        )
    elif op is OpKind.MERGE:
        strategy = a.get("strategy", "concat_dedupe")
        if isinstance(strategy, dict):
            strategy = json.dumps(strategy, sort_keys=True, separators=(",", ":"))
        args = MergeArgs(strategy=strategy, delete_children=a.get("delete_children", False))
    elif op is OpKind.DELETE:
        args = DeleteArgs(mode=a.get("mode", "soft"), reason=a.get("reason"))
    elif op is OpKind.SPLIT:
        args = SplitArgs(strategy=a.get("strategy", "sentences"), chunk_size=a.get("chunk_size", DEFAULT_CHUNK_SIZE))
    elif op is OpKind.LOCK:
        p = a.get("policy", {})
        args = LockArgs(
            mode=a["mode"],
            reason=a.get("reason"),
            policy=LockPolicy(
                allow=dedupe(p.get("allow", ())),
                deny=dedupe(p.get("deny", ())),
                reviewers=dedupe(p.get("reviewers", ())),
                expires=to_utc(parse_timestamp(p["expires"])) if "expires" in p else None,
            ),
        )
    elif op is OpKind.EXPIRE:
        if a.get("until") is not None:
            until = to_utc(parse_timestamp(a["until"]))
        else:
            until = to_utc(_reference_time(inst, now, strict) + parse_duration(a["ttl"]))
        args = ExpireArgs(until=until, on_expire=a["on_expire"])
    elif op is OpKind.RETRIEVE:
        args = RetrieveArgs(fields=dedupe(a["fields"]) if a.get("fields") is not None else None)
    elif op is OpKind.SUMMARIZE:
        args = SummarizeArgs(focus=a.get("focus"), max_tokens=a.get("max_tokens", DEFAULT_MAX_TOKENS))
    else:  # pragma: no cover - OpKind is closed
        raise InconsistentInstance(f"unhandled op {op}")

    return TypedOp(op=op, stage=infer_stage(op), target=target, args=args, meta=inst.meta)


def _reference_time(inst: SchemaInstance, now, strict: bool) -> datetime:
    if inst.meta.timestamp is not None:
        return parse_timestamp(inst.meta.timestamp)
    if callable(now):
        now = now()
    if now is not None:
        return now
    if strict:
        raise UnresolvableTime("ttl needs meta.timestamp or an injected clock")
    from .timeutil import wall_clock
    return wall_clock()


def _freeze(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    if isinstance(v, dict):
        return tuple(sorted((k, _freeze(x)) for k, x in v.items()))
    return v


def _thaw_set(key: str, v: Any) -> Any:
    if key == "tags":
        return list(v)
    if key == "facets":
        return dict(v)
    return v


# ---------------------------------------------------------------------------
# back to schema form
# ---------------------------------------------------------------------------

def _ts(dt: datetime | None) -> str | None:
    return format_timestamp(dt) if dt is not None else None


def _target_to_schema(t: ResolvedTarget | None) -> Target | None:
    if t is None:
        return None
    if t.kind == "ids":
        return Target(ids=list(t.ids))
    if t.kind == "filter":
        f = t.filter
        tr = None
        if f.time_range is not None:
            lo, hi = f.time_range
            tr = TimeRange(start=None if lo == NEG_INF else _ts(lo), end=None if hi == POS_INF else _ts(hi))
        wr = WeightRange(min=f.weight_range[0], max=f.weight_range[1]) if f.weight_range else None
        # an empty has_tags survives when it is the only predicate
        only = f.type is None and tr is None and wr is None
        return Target(filter=Filter(
            has_tags=list(f.has_tags) if f.has_tags or only else None,
            type=f.type, time_range=tr, weight_range=wr, limit=f.limit,
        ))
    if t.kind == "search":
        s = t.search
        return Target(search=SearchSpec(
            intent=Intent(query=s.query, context=s.context),
            overrides=Overrides(order_by=s.order_by),
            limit=s.limit,
        ))
    return Target(all=True)


def _args_to_json(op: OpKind, a: OpArgs) -> dict:
    out: dict[str, Any]
    if isinstance(a, EncodeArgs):
        out = {"payload": {"text": a.text}, "tags": list(a.tags), "type": a.type,
               "facets": dict(a.facets), "use_embedding": a.use_embedding}
        if a.time is not None:
            out["time"] = _ts(a.time)
        for k in ("source", "location"):
            if getattr(a, k) is not None:
                out[k] = getattr(a, k)
    elif isinstance(a, UpdateArgs):
        out = {"set": {k: _thaw_set(k, v) for k, v in a.set}}
    elif isinstance(a, LabelArgs):
        out = {"tags": list(a.tags), "facets": dict(a.facets), "mode": a.mode}
    elif isinstance(a, (PromoteArgs, DemoteArgs)):
        out = {}
        if a.weight is not None:
            out["weight"] = a.weight
        if a.weight_delta is not None:
            out["weight_delta"] = a.weight_delta
        if a.reason is not None:
            out["reason"] = a.reason
        if isinstance(a, PromoteArgs) and a.reminder is not None:
            r = {}
            if a.reminder.at is not None:
                r["at"] = _ts(a.reminder.at)
            if a.reminder.cadence is not None:
                r["cadence"] = a.reminder.cadence
            out["reminder"] = r
        if isinstance(a, DemoteArgs):
            out["archive"] = a.archive
    elif isinstance(a, MergeArgs):
        strategy: Any = a.strategy
        if strategy.startswith("{"):
            strategy = json.loads(strategy)
        out = {"strategy": strategy, "delete_children": a.delete_children}
    elif isinstance(a, DeleteArgs):
        out = {"mode": a.mode}
        if a.reason is not None:
            out["reason"] = a.reason
    elif isinstance(a, SplitArgs):
        out = {"strategy": a.strategy, "chunk_size": a.chunk_size}
    elif isinstance(a, LockArgs):
        policy: dict[str, Any] = {"allow": list(a.policy.allow), "deny": list(a.policy.deny),
                                  "reviewers": list(a.policy.reviewers)}
        if a.policy.expires is not None:
            policy["expires"] = _ts(a.policy.expires)
        out = {"mode": a.mode, "policy": policy}
        if a.reason is not None:
            out["reason"] = a.reason
    elif isinstance(a, ExpireArgs):
        out = {"until": _ts(a.until), "on_expire": a.on_expire}
    elif isinstance(a, RetrieveArgs):
        out = {"fields": list(a.fields)} if a.fields is not None else {}
    elif isinstance(a, SummarizeArgs):
        out = {"max_tokens": a.max_tokens}
        if a.focus is not None:
            out["focus"] = a.focus
    else:  # pragma: no cover
        raise InconsistentInstance(f"unhandled args {a!r}")
    return out
