"""Five-field schema instances and their canonical JSON wire format.

A schema instance is ``{stage, op, target, args, meta}``.  Decoding checks
shape and JSON types (unknown keys are hard errors); semantic legality is the
validator's job.  Encoding is canonical: sorted keys, compact separators, no
default-valued meta flags, so byte equality is a meaningful comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from .timeutil import is_duration, is_timestamp


class OpKind(str, Enum):
    ENCODE = "Encode"
    UPDATE = "Update"
    LABEL = "Label"
    PROMOTE = "Promote"
    DEMOTE = "Demote"
    MERGE = "Merge"
    DELETE = "Delete"
    SPLIT = "Split"
    LOCK = "Lock"
    EXPIRE = "Expire"
    RETRIEVE = "Retrieve"
    SUMMARIZE = "Summarize"


class Stage(str, Enum):
    ENC = "ENC"
    STO = "STO"
    RET = "RET"


_STAGE_OF = {
    OpKind.ENCODE: Stage.ENC,
    OpKind.UPDATE: Stage.STO,
    OpKind.LABEL: Stage.STO,
    OpKind.PROMOTE: Stage.STO,
    OpKind.DEMOTE: Stage.STO,
    OpKind.MERGE: Stage.STO,
    OpKind.DELETE: Stage.STO,
    OpKind.SPLIT: Stage.STO,
    OpKind.LOCK: Stage.STO,
    OpKind.EXPIRE: Stage.STO,
    OpKind.RETRIEVE: Stage.RET,
    OpKind.SUMMARIZE: Stage.RET,
}

OP_NAMES = frozenset(op.value for op in OpKind)


def infer_stage(op: OpKind) -> Stage:
    return _STAGE_OF[OpKind(op)]


class SchemaError(ValueError):
    """Base class for decode failures.  ``path`` is a JSON pointer."""

    code = "E_SCHEMA"

    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path

    def to_dict(self) -> dict:
        return {"code": self.code, "path": self.path, "rule": type(self).__name__, "message": str(self)}


class MalformedJson(SchemaError):
    code = "E_MALFORMED_JSON"


class UnknownField(SchemaError):
    code = "E_UNKNOWN_FIELD"


class UnknownOp(SchemaError):
    code = "E_UNKNOWN_OP"


class InvalidValue(SchemaError):
    code = "E_INVALID_VALUE"


# ---------------------------------------------------------------------------
# sub-structures
# ---------------------------------------------------------------------------

@dataclass
class TimeRange:
    start: str | None = None
    end: str | None = None

    def to_json(self) -> dict:
        return _drop_none({"start": self.start, "end": self.end})


@dataclass
class WeightRange:
    min: float | None = None
    max: float | None = None

    def to_json(self) -> dict:
        return _drop_none({"min": self.min, "max": self.max})


@dataclass
class Filter:
    has_tags: list[str] | None = None
    type: str | None = None
    time_range: TimeRange | None = None
    weight_range: WeightRange | None = None
    limit: int | None = None

    def to_json(self) -> dict:
        return _drop_none({
            "has_tags": self.has_tags,
            "type": self.type,
            "time_range": self.time_range.to_json() if self.time_range else None,
            "weight_range": self.weight_range.to_json() if self.weight_range else None,
            "limit": self.limit,
        })


@dataclass
class Intent:
    query: str
    context: str | None = None

    def to_json(self) -> dict:
        return _drop_none({"query": self.query, "context": self.context})


@dataclass
class Overrides:
    k: int | None = None
    order_by: str | None = None
    limit: int | None = None

    def to_json(self) -> dict:
        return _drop_none({"k": self.k, "order_by": self.order_by, "limit": self.limit})


@dataclass
class SearchSpec:
    intent: Intent
    overrides: Overrides | None = None
    limit: int | None = None

    def to_json(self) -> dict:
        return _drop_none({
            "intent": self.intent.to_json(),
            "overrides": self.overrides.to_json() if self.overrides else None,
            "limit": self.limit,
        })


@dataclass
class Target:
    ids: list[str] | None = None
    filter: Filter | None = None
    search: SearchSpec | None = None
    all: bool = False

    @property
    def kind(self) -> str:
        for name in ("ids", "filter", "search"):
            if getattr(self, name) is not None:
                return name
        return "all"

    def to_json(self) -> dict:
        if self.ids is not None:
            return {"ids": list(self.ids)}
        if self.filter is not None:
            return {"filter": self.filter.to_json()}
        if self.search is not None:
            return {"search": self.search.to_json()}
        return {"all": True}


@dataclass
class Meta:
    actor: str | None = None
    timestamp: str | None = None
    lang: str | None = None
    confirmation: bool = False
    dry_run: bool = False

    def to_json(self) -> dict:
        out = _drop_none({"actor": self.actor, "timestamp": self.timestamp, "lang": self.lang})
        if self.confirmation:
            out["confirmation"] = True
        if self.dry_run:
            out["dry_run"] = True
        return out


@dataclass
class SchemaInstance:
    op: OpKind
    stage: Stage | None = None
    target: Target | None = None
    args: dict[str, Any] = field(default_factory=dict)
    meta: Meta = field(default_factory=Meta)

    def to_json(self) -> dict:
        out: dict[str, Any] = {"op": self.op.value, "args": self.args}
        if self.stage is not None:
            out["stage"] = self.stage.value
        if self.target is not None:
            out["target"] = self.target.to_json()
        meta = self.meta.to_json()
        if meta:
            out["meta"] = meta
        return out


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


# ---------------------------------------------------------------------------
# value checkers
# ---------------------------------------------------------------------------

Checker = Callable[[Any, str], None]


def _fail(path: str, what: str, value: Any) -> None:
    raise InvalidValue(f"{path or '/'}: expected {what}, got {value!r}", path)


def _str(value: Any, path: str) -> None:
    if not isinstance(value, str):
        _fail(path, "string", value)


def _bool(value: Any, path: str) -> None:
    if not isinstance(value, bool):
        _fail(path, "boolean", value)


def _number(value: Any, path: str) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, "number", value)


def _integer(value: Any, path: str) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, "integer", value)


def _str_list(value: Any, path: str) -> None:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        _fail(path, "list of strings", value)


def _str_map(value: Any, path: str) -> None:
    if not isinstance(value, dict) or not all(isinstance(v, str) for v in value.values()):
        _fail(path, "object of string values", value)


def _timestamp(value: Any, path: str) -> None:
    if not is_timestamp(value):
        _fail(path, "RFC3339 timestamp with offset", value)


def _duration(value: Any, path: str) -> None:
    if not is_duration(value):
        _fail(path, "ISO-8601 duration", value)


def _enum(*allowed: str) -> Checker:
    def check(value: Any, path: str) -> None:
        if value not in allowed:
            _fail(path, f"one of {list(allowed)}", value)
    return check


def _op_list(value: Any, path: str) -> None:
    _str_list(value, path)
    for i, v in enumerate(value):
        if v not in OP_NAMES:
            raise UnknownOp(f"unknown op {v!r}", f"{path}/{i}")


def _anything(value: Any, path: str) -> None:
    return None


def _object(shape: dict[str, Checker]) -> Checker:
    def check(value: Any, path: str) -> None:
        if not isinstance(value, dict):
            _fail(path, "object", value)
        for key, sub in value.items():
            if key not in shape:
                raise UnknownField(f"unknown field {key!r}", f"{path}/{key}")
            shape[key](sub, f"{path}/{key}")
    return check


def _strategy(value: Any, path: str) -> None:
    if not isinstance(value, (str, dict)):
        _fail(path, "string or object", value)


# Item fields an Update may write, and fields it may never touch.
UPDATABLE_FIELDS: dict[str, Checker] = {
    "text": _str,
    "type": _str,
    "tags": _str_list,
    "facets": _str_map,
    "weight": _number,
    "time": _timestamp,
    "source": _str,
    "actor": _str,
    "location": _str,
}
RESERVED_FIELDS = frozenset({
    "id", "lineage", "parent_id", "merged_into", "child_ids", "lock", "deleted",
    "expiry", "created_at", "updated_at", "embedding",
})

RETRIEVABLE_FIELDS = frozenset(UPDATABLE_FIELDS) | RESERVED_FIELDS | {"score", "reminder"}


def _update_set(value: Any, path: str) -> None:
    if not isinstance(value, dict):
        _fail(path, "object", value)
    for key, sub in value.items():
        if key in RESERVED_FIELDS:
            continue  # rejected by the validator with a dedicated rule
        if key not in UPDATABLE_FIELDS:
            raise UnknownField(f"unknown item field {key!r}", f"{path}/{key}")
        UPDATABLE_FIELDS[key](sub, f"{path}/{key}")


def _field_list(value: Any, path: str) -> None:
    _str_list(value, path)
    for i, v in enumerate(value):
        if v not in RETRIEVABLE_FIELDS:
            raise UnknownField(f"unknown item field {v!r}", f"{path}/{i}")


LABEL_MODES = ("add", "replace", "remove")
DELETE_MODES = ("soft", "hard")
SPLIT_STRATEGIES = ("sentences", "chunks")
LOCK_MODES = ("read_only", "append_only")
ON_EXPIRE = ("delete_soft", "demote", "archive", "anonymize")
ORDER_BY = ("relevance", "time_desc", "time_asc")

ARG_SHAPES: dict[OpKind, dict[str, Checker]] = {
    OpKind.ENCODE: {
        "payload": _object({"text": _str}),
        "tags": _str_list,
        "type": _str,
        "time": _timestamp,
        "source": _str,
        "location": _str,
        "facets": _str_map,
        "use_embedding": _bool,
    },
    OpKind.UPDATE: {"set": _update_set},
    OpKind.LABEL: {"tags": _str_list, "facets": _str_map, "mode": _enum(*LABEL_MODES)},
    OpKind.PROMOTE: {
        "weight": _number,
        "weight_delta": _number,
        "reminder": _object({"cadence": _str, "at": _timestamp}),
        "reason": _str,
    },
    OpKind.DEMOTE: {"weight": _number, "weight_delta": _number, "archive": _bool, "reason": _str},
    OpKind.MERGE: {"strategy": _strategy, "delete_children": _bool},
    OpKind.DELETE: {"mode": _enum(*DELETE_MODES), "reason": _str},
    OpKind.SPLIT: {"strategy": _enum(*SPLIT_STRATEGIES), "chunk_size": _integer},
    OpKind.LOCK: {
        "mode": _anything,  # membership is a validator rule
        "reason": _str,
        "policy": _object({
            "allow": _op_list,
            "deny": _op_list,
            "reviewers": _str_list,
            "expires": _timestamp,
        }),
    },
    OpKind.EXPIRE: {"ttl": _duration, "until": _timestamp, "on_expire": _enum(*ON_EXPIRE)},
    OpKind.RETRIEVE: {"fields": _field_list},
    OpKind.SUMMARIZE: {"focus": _str, "max_tokens": _integer},
}


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

_TOP_KEYS = {"stage", "op", "target", "args", "meta"}


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict:
    out: dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise MalformedJson(f"duplicate key {k!r}")
        out[k] = v
    return out


def _reject_constant(name: str) -> Any:
    raise MalformedJson(f"non-finite number {name} is not valid JSON")


def loads(text: str | bytes) -> Any:
    """Strict JSON: no duplicate keys, no NaN/Infinity."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedJson(f"not UTF-8: {exc}") from exc
    try:
        return json.loads(text, object_pairs_hook=_reject_duplicates, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"malformed JSON: {exc}") from exc


def decode_instance(json_text: str | bytes) -> SchemaInstance:
    return instance_from_obj(loads(json_text))


def instance_from_obj(obj: Any) -> SchemaInstance:
    """Build a SchemaInstance from already-parsed JSON."""
    if not isinstance(obj, dict):
        raise InvalidValue("schema instance must be a JSON object", "")
    for key in obj:
        if key not in _TOP_KEYS:
            raise UnknownField(f"unknown top-level field {key!r}", f"/{key}")

    if "op" not in obj:
        raise UnknownOp("missing op", "/op")
    op_raw = obj["op"]
    if op_raw not in OP_NAMES:
        raise UnknownOp(f"unknown op {op_raw!r}", "/op")
    op = OpKind(op_raw)

    stage = None
    if "stage" in obj and obj["stage"] is not None:
        if obj["stage"] not in {s.value for s in Stage}:
            raise InvalidValue(f"unknown stage {obj['stage']!r}", "/stage")
        stage = Stage(obj["stage"])

    target = None
    if obj.get("target") is not None:
        target = _decode_target(obj["target"])

    args = obj.get("args")
    if args is None:
        args = {}
    _object(ARG_SHAPES[op])(args, "/args")

    meta = _decode_meta(obj.get("meta"))
    return SchemaInstance(op=op, stage=stage, target=target, args=args, meta=meta)


def _decode_target(raw: Any) -> Target:
    path = "/target"
    if not isinstance(raw, dict):
        _fail(path, "object", raw)
    for key in raw:
        if key not in ("ids", "filter", "search", "all"):
            raise UnknownField(f"unknown target variant {key!r}", f"{path}/{key}")
    populated = [k for k in ("ids", "filter", "search") if raw.get(k) is not None]
    if raw.get("all") is True:
        populated.append("all")
    elif "all" in raw and raw["all"] not in (None, False):
        _fail(f"{path}/all", "boolean", raw["all"])
    if len(populated) != 1:
        raise InvalidValue(f"target must populate exactly one variant, got {populated}", path)

    kind = populated[0]
    if kind == "ids":
        ids = raw["ids"]
        _str_list(ids, f"{path}/ids")
        if not ids:
            raise InvalidValue("ids must be non-empty", f"{path}/ids")
        if len(set(ids)) != len(ids):
            raise InvalidValue("ids must be duplicate-free", f"{path}/ids")
        return Target(ids=list(ids))
    if kind == "filter":
        return Target(filter=_decode_filter(raw["filter"], f"{path}/filter"))
    if kind == "search":
        return Target(search=_decode_search(raw["search"], f"{path}/search"))
    return Target(all=True)


def _decode_filter(raw: Any, path: str) -> Filter:
    _object({
        "has_tags": _str_list,
        "type": _str,
        "time_range": _object({"start": _timestamp, "end": _timestamp}),
        "weight_range": _object({"min": _number, "max": _number}),
        "limit": _integer,
    })(raw, path)
    f = Filter(
        has_tags=raw.get("has_tags"),
        type=raw.get("type"),
        time_range=TimeRange(**raw["time_range"]) if "time_range" in raw else None,
        weight_range=WeightRange(**raw["weight_range"]) if "weight_range" in raw else None,
        limit=raw.get("limit"),
    )
    if f.time_range is not None and f.time_range.start is None and f.time_range.end is None:
        raise InvalidValue("time_range needs start or end", f"{path}/time_range")
    if f.weight_range is not None and f.weight_range.min is None and f.weight_range.max is None:
        raise InvalidValue("weight_range needs min or max", f"{path}/weight_range")
    if f.has_tags is None and f.type is None and f.time_range is None and f.weight_range is None:
        raise InvalidValue("filter needs at least one predicate besides limit", path)
    return f


def _decode_search(raw: Any, path: str) -> SearchSpec:
    _object({
        "intent": _object({"query": _str, "context": _str}),
        "overrides": _object({"k": _integer, "order_by": _enum(*ORDER_BY), "limit": _integer}),
        "limit": _integer,
    })(raw, path)
    if "intent" not in raw or "query" not in raw["intent"]:
        raise InvalidValue("search needs intent.query", f"{path}/intent")
    intent = Intent(**raw["intent"])
    if not intent.query.strip():
        raise InvalidValue("intent.query must be non-empty", f"{path}/intent/query")
    overrides = Overrides(**raw["overrides"]) if "overrides" in raw else None
    return SearchSpec(intent=intent, overrides=overrides, limit=raw.get("limit"))


def _decode_meta(raw: Any) -> Meta:
    if raw is None:
        return Meta()
    _object({
        "actor": _str,
        "timestamp": _timestamp,
        "lang": _str,
        "confirmation": _bool,
        "dry_run": _bool,
    })(raw, "/meta")
    return Meta(**raw)


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_instance(inst: SchemaInstance) -> str:
    return canonical_json(inst.to_json())


def canonicalize(text_or_obj: str | bytes | dict) -> str:
    """Decode (text or parsed object) and re-encode canonically."""
    if isinstance(text_or_obj, dict):
        return encode_instance(instance_from_obj(text_or_obj))
    return encode_instance(decode_instance(text_or_obj))
