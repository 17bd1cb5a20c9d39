"""Reference relational backend on sqlite.

Tables: ``memory_items``, ``lineage``, ``locks``, ``triggers``, ``audit_log``
and ``store_meta`` (id counter, embedding dimension).  Every operation runs
inside one SAVEPOINT together with the lazy expiry sweep, so an error leaves
the store untouched.

Content digest byte layout (``content_digest``): for each table in
``DIGEST_TABLES`` order, the line ``#<table>\\n`` followed by one line per row,
ordered by primary key, where each line is the compact JSON array of the
row's column values in declaration order.  The digest is SHA-256 over the
UTF-8 bytes.  ``audit_log`` is excluded.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sqlite3
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable

from .schema import RESERVED_FIELDS, OpKind, canonical_json
from .services import ModelServices, ServiceError, StubServices, cosine, split_clauses, split_sentences, tokenize
from .timeutil import format_timestamp, parse_timestamp
from .typed import (
    DemoteArgs,
    EncodeArgs,
    ResolvedTarget,
    TypedOp,
    clamp01,
    dedupe,
    normalize_weight,
)
from .validator import Diagnostic

log = logging.getLogger(__name__)

DEFAULT_WEIGHT = 0.5
EXPIRE_DEMOTE_WEIGHT = 0.1
ENTITY_FACET_KEYS = frozenset({"entities", "entity", "people", "person", "owner", "owners"})
MUTATING_OPS = frozenset({
    OpKind.UPDATE, OpKind.LABEL, OpKind.PROMOTE, OpKind.DEMOTE, OpKind.MERGE,
    OpKind.DELETE, OpKind.SPLIT, OpKind.LOCK, OpKind.EXPIRE,
})

_SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS memory_items (
    id             TEXT PRIMARY KEY,
    text           TEXT NOT NULL,
    type           TEXT NOT NULL,
    tags           TEXT NOT NULL DEFAULT '[]',
    facets         TEXT NOT NULL DEFAULT '{}',
    weight         REAL NOT NULL,
    embedding      TEXT,
    time           TEXT,
    source         TEXT,
    actor          TEXT,
    location       TEXT,
    parent_id      TEXT,
    merged_into    TEXT,
    deleted        INTEGER NOT NULL DEFAULT 0,
    expiry_until   TEXT,
    on_expire      TEXT,
    expiry_applied INTEGER NOT NULL DEFAULT 0,
    created_at     TEXT NOT NULL,
    updated_at     TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS lineage (
    parent_id  TEXT NOT NULL,
    child_id   TEXT NOT NULL,
    relation   TEXT NOT NULL CHECK(relation IN ('split','merge','summary')),
    created_at TEXT NOT NULL,
    PRIMARY KEY (parent_id, child_id, relation)
);
CREATE TABLE IF NOT EXISTS locks (
    item_id    TEXT PRIMARY KEY,
    mode       TEXT NOT NULL CHECK(mode IN ('read_only','append_only')),
    reason     TEXT,
    policy     TEXT NOT NULL DEFAULT '{}',
    expires    TEXT,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS triggers (
    id         INTEGER PRIMARY KEY,
    item_id    TEXT NOT NULL,
    kind       TEXT NOT NULL CHECK(kind IN ('reminder','expire')),
    fire_at    TEXT,
    cadence    TEXT,
    action     TEXT,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS audit_log (
    seq           INTEGER PRIMARY KEY,
    actor         TEXT,
    op            TEXT NOT NULL,
    affected_ids  TEXT NOT NULL,
    before_digest TEXT NOT NULL,
    after_digest  TEXT NOT NULL,
    timestamp     TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS store_meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
"""

DIGEST_TABLES = (
    ("memory_items", "id"),
    ("lineage", "parent_id, child_id, relation"),
    ("locks", "item_id"),
    ("triggers", "id"),
    ("store_meta", "key"),
)


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

class ExecError(Exception):
    code = "E_EXEC"

    def __init__(self, message: str, path: str = "/target"):
        super().__init__(message)
        self.path = path

    def diagnostic(self) -> Diagnostic:
        return Diagnostic(code=self.code, path=self.path, rule=type(self).__name__, message=str(self))


class UnknownId(ExecError):
    code = "E_UNKNOWN_ID"


class LockedItem(ExecError):
    code = "E_LOCKED_ITEM"


class ExpiredItem(ExecError):
    code = "E_EXPIRED_ITEM"


class ReservedField(ExecError):
    code = "E_RESERVED_FIELD"


class TooFewSources(ExecError):
    code = "E_TOO_FEW_SOURCES"


class NotSplittable(ExecError):
    code = "E_NOT_SPLITTABLE"


class AlreadyLocked(ExecError):
    code = "E_ALREADY_LOCKED"


class EmptyTarget(ExecError):
    code = "E_EMPTY_TARGET"


class HasDependents(ExecError):
    code = "E_HAS_DEPENDENTS"


class StoreMismatch(ExecError):
    code = "E_STORE_MISMATCH"


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass
class MemoryItem:
    id: str
    text: str
    type: str
    tags: list[str]
    facets: dict[str, str]
    weight: float
    embedding: list[float] | None
    time: str | None
    source: str | None
    actor: str | None
    location: str | None
    parent_id: str | None
    merged_into: str | None
    child_ids: list[str]
    lock: dict | None
    expiry: dict | None
    reminder: dict | None
    deleted: bool
    created_at: str
    updated_at: str

    @property
    def archived(self) -> bool:
        return self.facets.get("archived") == "true"

    @property
    def swept(self) -> bool:
        return bool(self.expiry and self.expiry.get("applied"))

    def lineage_digest(self) -> str:
        blob = canonical_json([self.parent_id, self.merged_into, sorted(self.child_ids)])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_dict(self, fields: Iterable[str] | None = None) -> dict:
        full = {
            "id": self.id, "text": self.text, "type": self.type, "tags": self.tags,
            "facets": self.facets, "weight": self.weight, "embedding": self.embedding,
            "time": self.time, "source": self.source, "actor": self.actor,
            "location": self.location, "parent_id": self.parent_id,
            "merged_into": self.merged_into, "child_ids": self.child_ids,
            "lineage": {"parent_id": self.parent_id, "merged_into": self.merged_into, "child_ids": self.child_ids},
            "lock": self.lock, "expiry": self.expiry, "reminder": self.reminder,
            "deleted": self.deleted, "created_at": self.created_at, "updated_at": self.updated_at,
        }
        if fields is None:
            fields = ("id", "text", "type", "tags", "facets", "weight", "time")
        return {k: full[k] for k in fields if k in full}


@dataclass
class ExecutionResult:
    status: str  # ok | error | skipped
    op: OpKind
    affected_ids: list[str] = field(default_factory=list)
    count_delta: int = 0
    payload: dict = field(default_factory=dict)
    diagnostics: list[Diagnostic] = field(default_factory=list)
    dry_run: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "op": self.op.value if isinstance(self.op, OpKind) else self.op,
            "affected_ids": list(self.affected_ids),
            "count_delta": self.count_delta,
            "payload": self.payload,
            "diagnostics": [d.to_dict() for d in self.diagnostics],
            "dry_run": self.dry_run,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    actor: str | None
    op: str
    affected_ids: list[str]
    before_digest: str
    after_digest: str
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "seq": self.seq, "actor": self.actor, "op": self.op, "affected_ids": self.affected_ids,
            "before_digest": self.before_digest, "after_digest": self.after_digest,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class StoreConfig:
    embedding_weight: float = 0.5
    lexical_weight: float = 0.3
    salience_weight: float = 0.2
    tau: float = 0.5
    # a search hit needs lexical overlap or at least this cosine
    min_similarity: float = 0.5


def id_key(item_id: str) -> tuple[int, str]:
    """Sort key that orders decimal ids numerically and anything else stably."""
    return (len(item_id), item_id)


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------

class MemoryStore:
    """sqlite-backed memory store executing typed operations."""

    def __init__(
        self,
        path: str | Path = ":memory:",
        services: ModelServices | None = None,
        config: StoreConfig | None = None,
        *,
        _conn: sqlite3.Connection | None = None,
    ):
        self.path = str(path)
        self.services = services or StubServices()
        self.config = config or StoreConfig()
        self.conn = _conn or sqlite3.connect(self.path, isolation_level=None)
        self.conn.row_factory = sqlite3.Row
        self.conn.executescript(_SCHEMA_SQL)
        dim = str(self.services.descriptor.dimension)
        row = self.conn.execute("SELECT value FROM store_meta WHERE key='embedding_dim'").fetchone()
        if row is None:
            self.conn.execute("INSERT INTO store_meta(key, value) VALUES ('embedding_dim', ?)", (dim,))
            self.conn.execute("INSERT INTO store_meta(key, value) VALUES ('next_id', '1')")
        elif row["value"] != dim:
            raise StoreMismatch(f"store uses embedding dimension {row['value']}, services provide {dim}")

    def close(self) -> None:
        self.conn.close()

    # -- snapshots ---------------------------------------------------------

    def clone(self) -> "MemoryStore":
        """Independent in-memory copy (used for dry runs and snapshots)."""
        dst = sqlite3.connect(":memory:", isolation_level=None)
        self.conn.backup(dst)
        return MemoryStore(":memory:", self.services, self.config, _conn=dst)

    def content_digest(self) -> str:
        h = hashlib.sha256()
        for table, order in DIGEST_TABLES:
            h.update(f"#{table}\n".encode("utf-8"))
            for row in self.conn.execute(f"SELECT * FROM {table} ORDER BY {order}"):
                h.update((canonical_json(list(row)) + "\n").encode("utf-8"))
        return h.hexdigest()

    def snapshot_digest(self) -> bytes:
        return bytes.fromhex(self.content_digest())

    # -- reads -------------------------------------------------------------

    def _row_to_item(self, row: sqlite3.Row) -> MemoryItem:
        iid = row["id"]
        children = [r["child_id"] for r in self.conn.execute(
            "SELECT child_id FROM lineage WHERE parent_id=? ORDER BY created_at, child_id", (iid,))]
        children = sorted(dict.fromkeys(children), key=id_key)
        lock = None
        lr = self.conn.execute("SELECT * FROM locks WHERE item_id=?", (iid,)).fetchone()
        if lr is not None:
            lock = {"mode": lr["mode"], "reason": lr["reason"], "policy": json.loads(lr["policy"]),
                    "expires": lr["expires"]}
        expiry = None
        if row["expiry_until"] is not None:
            expiry = {"until": row["expiry_until"], "on_expire": row["on_expire"],
                      "applied": bool(row["expiry_applied"])}
        reminder = None
        rr = self.conn.execute(
            "SELECT fire_at, cadence FROM triggers WHERE item_id=? AND kind='reminder' ORDER BY id DESC LIMIT 1",
            (iid,)).fetchone()
        if rr is not None:
            reminder = {"at": rr["fire_at"], "cadence": rr["cadence"]}
        return MemoryItem(
            id=iid, text=row["text"], type=row["type"], tags=json.loads(row["tags"]),
            facets=json.loads(row["facets"]), weight=row["weight"],
            embedding=json.loads(row["embedding"]) if row["embedding"] else None,
            time=row["time"], source=row["source"], actor=row["actor"], location=row["location"],
            parent_id=row["parent_id"], merged_into=row["merged_into"], child_ids=children,
            lock=lock, expiry=expiry, reminder=reminder, deleted=bool(row["deleted"]),
            created_at=row["created_at"], updated_at=row["updated_at"],
        )

    def get(self, item_id: str) -> MemoryItem | None:
        row = self.conn.execute("SELECT * FROM memory_items WHERE id=?", (item_id,)).fetchone()
        return self._row_to_item(row) if row is not None else None

    def items(self, *, include_deleted: bool = True) -> list[MemoryItem]:
        sql = "SELECT * FROM memory_items" + ("" if include_deleted else " WHERE deleted=0")
        rows = self.conn.execute(sql).fetchall()
        return sorted((self._row_to_item(r) for r in rows), key=lambda it: id_key(it.id))

    def count(self, *, active_only: bool = True) -> int:
        sql = "SELECT COUNT(*) FROM memory_items" + (" WHERE deleted=0" if active_only else "")
        return self.conn.execute(sql).fetchone()[0]

    def triggers(self, item_id: str | None = None, kind: str | None = None) -> list[dict]:
        sql, params = "SELECT * FROM triggers WHERE 1=1", []
        if item_id is not None:
            sql += " AND item_id=?"
            params.append(item_id)
        if kind is not None:
            sql += " AND kind=?"
            params.append(kind)
        return [dict(r) for r in self.conn.execute(sql + " ORDER BY id", params)]

    def lineage_rows(self) -> list[dict]:
        return [dict(r) for r in self.conn.execute("SELECT * FROM lineage ORDER BY parent_id, child_id")]

    # -- audit -------------------------------------------------------------

    def append_audit(self, actor: str | None, op: OpKind, affected_ids: list[str],
                     before: str, after: str, timestamp: datetime) -> AuditRecord:
        seq = self.conn.execute("SELECT COALESCE(MAX(seq), 0) + 1 FROM audit_log").fetchone()[0]
        rec = AuditRecord(seq, actor, op.value, list(affected_ids), before, after, format_timestamp(timestamp))
        self.conn.execute(
            "INSERT INTO audit_log VALUES (?,?,?,?,?,?,?)",
            (rec.seq, rec.actor, rec.op, json.dumps(rec.affected_ids), rec.before_digest,
             rec.after_digest, rec.timestamp),
        )
        return rec

    def audit_records(self) -> list[AuditRecord]:
        return [
            AuditRecord(r["seq"], r["actor"], r["op"], json.loads(r["affected_ids"]),
                        r["before_digest"], r["after_digest"], r["timestamp"])
            for r in self.conn.execute("SELECT * FROM audit_log ORDER BY seq")
        ]

    def export_audit_jsonl(self) -> str:
        return "".join(canonical_json(r.to_dict()) + "\n" for r in self.audit_records())

    # -- scoring -----------------------------------------------------------

    def lexical_overlap(self, query: str, item: MemoryItem) -> float:
        q = set(tokenize(query))
        if not q:
            return 0.0
        doc = set(tokenize(item.text))
        for tag in item.tags:
            doc.update(tokenize(tag))
        return len(q & doc) / len(q)

    def score_item(self, query: str, item: MemoryItem, query_vec: list[float] | None = None) -> float:
        return self._score(query, item, query_vec)[0]

    def _score(self, query: str, item: MemoryItem, query_vec: list[float] | None = None) -> tuple[float, float, float]:
        """(score, cosine, lexical overlap)."""
        cfg = self.config
        lex = self.lexical_overlap(query, item)
        if item.embedding is None:
            denom = cfg.lexical_weight + cfg.salience_weight
            score = (cfg.lexical_weight * lex + cfg.salience_weight * item.weight) / denom
            return min(max(score, 0.0), 1.0), 0.0, lex
        if query_vec is None:
            query_vec = self.services.embed(query)
        cos = max(cosine(query_vec, item.embedding), 0.0)
        score = cfg.embedding_weight * cos + cfg.lexical_weight * lex + cfg.salience_weight * item.weight
        return min(max(score, 0.0), 1.0), cos, lex

    # -- governance --------------------------------------------------------

    @staticmethod
    def lock_active(item: MemoryItem, now: datetime) -> bool:
        if item.lock is None:
            return False
        exp = item.lock.get("policy", {}).get("expires") or item.lock.get("expires")
        return exp is None or parse_timestamp(exp) > now

    @staticmethod
    def is_expired(item: MemoryItem, now: datetime) -> bool:
        return item.expiry is not None and parse_timestamp(item.expiry["until"]) <= now

    def _check_mutation(self, items: list[MemoryItem], op: OpKind, now: datetime, *, additive: bool = False) -> None:
        for it in items:
            if not self.lock_active(it, now):
                continue
            deny = it.lock["policy"].get("deny", [])
            mode = it.lock["mode"]
            if op.value in deny:
                raise LockedItem(f"item {it.id} lock policy denies {op.value}")
            if mode == "read_only" or (mode == "append_only" and not additive):
                raise LockedItem(f"item {it.id} is locked {mode}; {op.value} refused")

    def _readable(self, item: MemoryItem, op: OpKind, now: datetime) -> bool:
        if not self.lock_active(item, now):
            return True
        policy = item.lock["policy"]
        if op.value in policy.get("deny", []):
            return False
        allow = policy.get("allow", [])
        return not allow or op.value in allow

    # -- target resolution -------------------------------------------------

    def resolve_target(self, t: ResolvedTarget, now: datetime, op: OpKind = OpKind.RETRIEVE,
                       *, for_read: bool = False) -> list[str]:
        return [it.id for it in self._resolve(t, now, op, for_read=for_read)[0]]

    def _resolve(self, t: ResolvedTarget, now: datetime, op: OpKind, *, for_read: bool) -> tuple[list[MemoryItem], dict]:
        """Return (ordered items, extras) where extras carries scores / missing ids."""
        extras: dict[str, Any] = {}

        def visible(it: MemoryItem, explicit: bool = False) -> bool:
            if it.deleted:
                return False
            if for_read:
                if it.swept or not self._readable(it, op, now):
                    return False
                if it.archived and not explicit:
                    return False
            return True

        if t.kind == "ids":
            found, missing = [], []
            for iid in t.ids:
                it = self.get(iid)
                if it is None:
                    missing.append(iid)
                else:
                    found.append(it)
            if missing and not for_read:
                raise UnknownId(f"unknown ids: {missing}", "/target/ids")
            if for_read:
                extras["missing"] = missing
                found = [it for it in found if visible(it, explicit=True)]
            return found, extras

        pool = [it for it in self.items(include_deleted=False) if visible(it)]

        if t.kind == "filter":
            f = t.filter
            out = []
            for it in pool:
                if f.has_tags and not set(f.has_tags) <= set(it.tags):
                    continue
                if f.type is not None and it.type != f.type:
                    continue
                if f.time_range is not None:
                    if it.time is None:
                        continue
                    ts = parse_timestamp(it.time)
                    if not f.time_range[0] <= ts <= f.time_range[1]:
                        continue
                if f.weight_range is not None and not f.weight_range[0] <= it.weight <= f.weight_range[1]:
                    continue
                out.append(it)
            out = _order_time(out, descending=True)
            if f.limit is not None:
                out = out[: f.limit]
            return out, extras

        if t.kind == "search":
            s = t.search
            qvec = self.services.embed(s.query)
            scored = []
            for it in pool:
                score, cos, lex = self._score(s.query, it, qvec)
                if lex > 0 or cos >= self.config.min_similarity:
                    scored.append((score, it))
            scored.sort(key=lambda p: (-p[0], id_key(p[1].id)))
            top = scored[: s.limit]
            extras["scores"] = {it.id: score for score, it in top}
            items = [it for _, it in top]
            if s.order_by == "time_desc":
                items = _order_time(items, descending=True)
            elif s.order_by == "time_asc":
                items = _order_time(items, descending=False)
            return items, extras

        return pool, extras  # all

    # -- execution ---------------------------------------------------------

    @property
    def capabilities(self) -> frozenset[OpKind]:
        return frozenset(OpKind)

    def execute(self, op: TypedOp, now: datetime) -> ExecutionResult:
        """Run one typed op atomically, lazy expiry sweep included."""
        handler: Callable[[TypedOp, datetime], ExecutionResult] = getattr(self, f"_exec_{op.op.value.lower()}")
        self.conn.execute("SAVEPOINT op")
        try:
            self.sweep_expired(now)
            before = self.count()
            result = handler(op, now)
            result.count_delta = self.count() - before
        except (ExecError, ServiceError) as exc:
            self.conn.execute("ROLLBACK TO op")
            self.conn.execute("RELEASE op")
            diag = exc.diagnostic() if isinstance(exc, ExecError) else Diagnostic(
                code=exc.code, path="/args", rule=type(exc).__name__, message=str(exc))
            return ExecutionResult(status="error", op=op.op, diagnostics=[diag])
        except Exception:
            self.conn.execute("ROLLBACK TO op")
            self.conn.execute("RELEASE op")
            raise
        self.conn.execute("RELEASE op")
        return result

    def sweep_expired(self, now: datetime) -> list[str]:
        """Apply on_expire to items whose horizon has passed.

        Items under an active read_only lock are deferred until the lock lapses.
        """
        applied = []
        rows = self.conn.execute(
            "SELECT * FROM memory_items WHERE expiry_until IS NOT NULL AND expiry_applied=0").fetchall()
        for row in rows:
            it = self._row_to_item(row)
            if not self.is_expired(it, now):
                continue
            if self.lock_active(it, now) and it.lock["mode"] == "read_only":
                continue
            action = it.expiry["on_expire"]
            stamp = format_timestamp(now)
            if action == "delete_soft":
                self.conn.execute("UPDATE memory_items SET deleted=1 WHERE id=?", (it.id,))
            elif action == "demote":
                self.conn.execute("UPDATE memory_items SET weight=? WHERE id=?",
                                  (min(it.weight, EXPIRE_DEMOTE_WEIGHT), it.id))
            elif action == "archive":
                facets = dict(it.facets, archived="true")
                self.conn.execute("UPDATE memory_items SET facets=? WHERE id=?", (_j(facets), it.id))
            elif action == "anonymize":
                facets = {k: v for k, v in it.facets.items() if k not in ENTITY_FACET_KEYS}
                self.conn.execute(
                    "UPDATE memory_items SET actor=NULL, source=NULL, location=NULL, facets=? WHERE id=?",
                    (_j(facets), it.id))
            self.conn.execute("UPDATE memory_items SET expiry_applied=1, updated_at=? WHERE id=?", (stamp, it.id))
            applied.append(it.id)
        return applied

    def _new_id(self) -> str:
        n = int(self.conn.execute("SELECT value FROM store_meta WHERE key='next_id'").fetchone()[0])
        self.conn.execute("UPDATE store_meta SET value=? WHERE key='next_id'", (str(n + 1),))
        return str(n)

    def _insert(self, *, text: str, type: str, tags: Iterable[str], facets: dict, weight: float,
                embed: bool, time: str | None, source: str | None, actor: str | None,
                location: str | None, now: datetime, parent_id: str | None = None) -> str:
        iid = self._new_id()
        vec = self.services.embed(text) if embed else None
        stamp = format_timestamp(now)
        self.conn.execute(
            "INSERT INTO memory_items (id, text, type, tags, facets, weight, embedding, time, source, actor,"
            " location, parent_id, created_at, updated_at) VALUES (?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
            (iid, text, type, _j(list(dedupe(list(tags)))), _j(facets), clamp01(weight),
             _j(vec) if vec is not None else None, time or stamp, source, actor, location, parent_id,
             stamp, stamp),
        )
        return iid

    def _set(self, item_id: str, now: datetime, **cols: Any) -> None:
        cols["updated_at"] = format_timestamp(now)
        assign = ", ".join(f"{k}=?" for k in cols)
        self.conn.execute(f"UPDATE memory_items SET {assign} WHERE id=?", (*cols.values(), item_id))

    def _link(self, parent: str, child: str, relation: str, now: datetime) -> None:
        self.conn.execute("INSERT OR IGNORE INTO lineage VALUES (?,?,?,?)",
                          (parent, child, relation, format_timestamp(now)))

    def _targets(self, op: TypedOp, now: datetime) -> list[MemoryItem]:
        return self._resolve(op.target, now, op.op, for_read=False)[0]

    # Encode -----------------------------------------------------------------

    def _exec_encode(self, op: TypedOp, now: datetime) -> ExecutionResult:
        a: EncodeArgs = op.args
        iid = self._insert(
            text=a.text, type=a.type, tags=a.tags, facets=dict(a.facets), weight=DEFAULT_WEIGHT,
            embed=a.use_embedding, time=format_timestamp(a.time) if a.time else None,
            source=a.source, actor=op.meta.actor, location=a.location, now=now,
        )
        return ExecutionResult("ok", op.op, affected_ids=[iid], payload={"id": iid})

    # Update -----------------------------------------------------------------

    def _exec_update(self, op: TypedOp, now: datetime) -> ExecutionResult:
        changes = dict(op.args.set)
        if not changes:
            raise ExecError("empty set", "/args/set")
        items = self._targets(op, now)
        self._check_mutation(items, op.op, now)
        for it in items:
            if self.is_expired(it, now):
                raise ExpiredItem(f"item {it.id} expired at {it.expiry['until']}")
        bad = sorted(set(changes) & RESERVED_FIELDS)
        if bad:
            raise ReservedField(f"reserved fields: {bad}", f"/args/set/{bad[0]}")
        for it in items:
            cols: dict[str, Any] = {}
            for key, value in changes.items():
                if key == "tags":
                    cols["tags"] = _j(list(dedupe(list(value))))
                elif key == "facets":
                    cols["facets"] = _j(dict(value))
                elif key == "weight":
                    cols["weight"] = clamp01(value)
                else:
                    cols[key] = value
            if "text" in changes and it.embedding is not None:
                cols["embedding"] = _j(self.services.embed(changes["text"]))
            self._set(it.id, now, **cols)
        return ExecutionResult("ok", op.op, affected_ids=[it.id for it in items],
                               payload={"updated": len(items)})

    # Label ------------------------------------------------------------------

    def _exec_label(self, op: TypedOp, now: datetime) -> ExecutionResult:
        a = op.args
        items = self._targets(op, now)
        self._check_mutation(items, op.op, now, additive=a.mode == "add")
        new_facets = dict(a.facets)
        payload = {}
        for it in items:
            tags, facets = list(it.tags), dict(it.facets)
            if a.mode == "add":
                tags = list(dedupe(tags + list(a.tags)))
                facets.update(new_facets)
            elif a.mode == "replace":
                if a.tags:
                    tags = list(dedupe(list(a.tags)))
                if new_facets:
                    facets = new_facets
            else:
                drop = set(a.tags)
                tags = [t for t in tags if t not in drop]
                facets = {k: v for k, v in facets.items() if k not in new_facets}
            self._set(it.id, now, tags=_j(tags), facets=_j(facets))
            payload[it.id] = tags
        return ExecutionResult("ok", op.op, affected_ids=[it.id for it in items], payload={"tags": payload})

    # Promote / Demote -------------------------------------------------------

    def _exec_promote(self, op: TypedOp, now: datetime) -> ExecutionResult:
        return self._reweight(op, now, promote=True)

    def _exec_demote(self, op: TypedOp, now: datetime) -> ExecutionResult:
        return self._reweight(op, now, promote=False)

    def _reweight(self, op: TypedOp, now: datetime, *, promote: bool) -> ExecutionResult:
        a = op.args
        items = self._targets(op, now)
        self._check_mutation(items, op.op, now)
        diags: list[Diagnostic] = []
        weights = {}
        for it in items:
            new = normalize_weight(it.weight, a.weight, a.weight_delta)
            if (promote and new < it.weight) or (not promote and new > it.weight):
                diags.append(Diagnostic(
                    code="W_WEIGHT_DIRECTION", path="/args/weight", rule="weight-direction",
                    message=f"{op.op.value} moves item {it.id} weight {it.weight} -> {new}",
                ))
            cols: dict[str, Any] = {"weight": new}
            if isinstance(a, DemoteArgs) and a.archive:
                cols["facets"] = _j(dict(it.facets, archived="true"))
            self._set(it.id, now, **cols)
            weights[it.id] = new
            if promote and a.reminder is not None:
                self.conn.execute(
                    "INSERT INTO triggers (item_id, kind, fire_at, cadence, action, created_at)"
                    " VALUES (?, 'reminder', ?, ?, NULL, ?)",
                    (it.id, format_timestamp(a.reminder.at) if a.reminder.at else None,
                     a.reminder.cadence, format_timestamp(now)),
                )
        return ExecutionResult("ok", op.op, affected_ids=[it.id for it in items],
                               payload={"weights": weights}, diagnostics=diags)

    # Merge ------------------------------------------------------------------

    def _exec_merge(self, op: TypedOp, now: datetime) -> ExecutionResult:
        a = op.args
        sources = self._targets(op, now)
        if len(sources) < 2:
            raise TooFewSources(f"merge needs >= 2 sources, target resolved {len(sources)}")
        self._check_mutation(sources, op.op, now, additive=not a.delete_children)
        text = self.services.merge_text([s.text for s in sources])
        facets: dict[str, str] = {}
        for s in sources:
            for k, v in s.facets.items():
                facets.setdefault(k, v)
        times = [s.time for s in sources if s.time]
        primary = self._insert(
            text=text, type=sources[0].type, tags=[t for s in sources for t in s.tags],
            facets=facets, weight=max(s.weight for s in sources),
            embed=any(s.embedding is not None for s in sources),
            time=min(times, key=parse_timestamp) if times else None,
            source=sources[0].source, actor=op.meta.actor, location=sources[0].location, now=now,
        )
        for s in sources:
            cols: dict[str, Any] = {"merged_into": primary}
            if a.delete_children:
                cols["deleted"] = 1
            self._set(s.id, now, **cols)
            self._link(primary, s.id, "merge", now)
        src_ids = [s.id for s in sources]
        return ExecutionResult("ok", op.op, affected_ids=[primary, *src_ids],
                               payload={"primary_id": primary, "sources": src_ids})

    # Delete -----------------------------------------------------------------

    def _exec_delete(self, op: TypedOp, now: datetime) -> ExecutionResult:
        a = op.args
        items = self._targets(op, now)
        self._check_mutation(items, op.op, now)
        if a.mode == "hard":
            doomed = {it.id for it in items}
            for it in items:
                dep = self.conn.execute(
                    "SELECT id FROM memory_items WHERE (merged_into=? OR parent_id=?) ORDER BY id",
                    (it.id, it.id)).fetchall()
                outside = [r["id"] for r in dep if r["id"] not in doomed]
                if outside:
                    raise HasDependents(f"item {it.id} is referenced by {outside}")
            for it in items:
                self.conn.execute("DELETE FROM memory_items WHERE id=?", (it.id,))
                self.conn.execute("DELETE FROM locks WHERE item_id=?", (it.id,))
                self.conn.execute("DELETE FROM triggers WHERE item_id=?", (it.id,))
        else:
            for it in items:
                if not it.deleted:
                    self._set(it.id, now, deleted=1)
        return ExecutionResult("ok", op.op, affected_ids=[it.id for it in items], payload={"mode": a.mode})

    # Split ------------------------------------------------------------------

    def _exec_split(self, op: TypedOp, now: datetime) -> ExecutionResult:
        a = op.args
        items = self._targets(op, now)
        if not items:
            raise EmptyTarget("split target resolved no items")
        self._check_mutation(items, op.op, now, additive=True)
        plan = []
        for it in items:
            if a.strategy == "chunks":
                parts = [it.text[i:i + a.chunk_size] for i in range(0, len(it.text), a.chunk_size)]
                parts = [p.strip() for p in parts if p.strip()]
            else:
                parts = split_sentences(it.text)
                if len(parts) < 2:
                    parts = [p.rstrip(",，;；").strip() for p in split_clauses(it.text)]
                    parts = [p for p in parts if p]
            if len(parts) < 2:
                raise NotSplittable(f"item {it.id} yields {len(parts)} part(s)")
            plan.append((it, parts))
        children: dict[str, list[str]] = {}
        affected = []
        for it, parts in plan:
            facets = {k: v for k, v in it.facets.items() if k != "split"}
            kids = []
            for part in parts:
                cid = self._insert(
                    text=part, type=it.type, tags=it.tags, facets=facets, weight=it.weight,
                    embed=it.embedding is not None, time=it.time, source=it.source,
                    actor=op.meta.actor or it.actor, location=it.location, now=now, parent_id=it.id,
                )
                self._link(it.id, cid, "split", now)
                kids.append(cid)
            self._set(it.id, now, facets=_j(dict(it.facets, split="true")))
            children[it.id] = kids
            affected += [it.id, *kids]
        return ExecutionResult("ok", op.op, affected_ids=affected, payload={"children": children})

    # Lock -------------------------------------------------------------------

    def _exec_lock(self, op: TypedOp, now: datetime) -> ExecutionResult:
        a = op.args
        items = self._targets(op, now)
        for it in items:
            if self.lock_active(it, now) and it.lock["mode"] != a.mode:
                raise AlreadyLocked(f"item {it.id} already locked {it.lock['mode']}")
        policy = {
            "allow": list(a.policy.allow),
            "deny": list(a.policy.deny),
            "reviewers": list(a.policy.reviewers),
            "expires": format_timestamp(a.policy.expires) if a.policy.expires else None,
        }
        for it in items:
            self.conn.execute(
                "INSERT OR REPLACE INTO locks VALUES (?,?,?,?,?,?)",
                (it.id, a.mode, a.reason, _j(policy), policy["expires"], format_timestamp(now)),
            )
        return ExecutionResult("ok", op.op, affected_ids=[it.id for it in items],
                               payload={"mode": a.mode, "policy": policy})

    # Expire -----------------------------------------------------------------

    def _exec_expire(self, op: TypedOp, now: datetime) -> ExecutionResult:
        a = op.args
        items = self._targets(op, now)
        self._check_mutation(items, op.op, now)
        for it in items:
            if self.is_expired(it, now):
                raise ExpiredItem(f"item {it.id} already expired at {it.expiry['until']}")
        until = format_timestamp(a.until)
        for it in items:
            self._set(it.id, now, expiry_until=until, on_expire=a.on_expire, expiry_applied=0)
            self.conn.execute(
                "INSERT INTO triggers (item_id, kind, fire_at, cadence, action, created_at)"
                " VALUES (?, 'expire', ?, NULL, ?, ?)",
                (it.id, until, a.on_expire, format_timestamp(now)),
            )
        return ExecutionResult("ok", op.op, affected_ids=[it.id for it in items],
                               payload={"until": until, "on_expire": a.on_expire})

    # Retrieve ---------------------------------------------------------------

    def _exec_retrieve(self, op: TypedOp, now: datetime) -> ExecutionResult:
        items, extras = self._resolve(op.target, now, op.op, for_read=True)
        fields = op.args.fields
        scores = extras.get("scores", {})
        rows = []
        for it in items:
            row = it.to_dict(fields)
            if it.id in scores and (fields is None or "score" in fields):
                row["score"] = scores[it.id]
            rows.append(row)
        payload: dict[str, Any] = {"items": rows}
        if extras.get("missing"):
            payload["missing"] = extras["missing"]
        return ExecutionResult("ok", op.op, affected_ids=[it.id for it in items], payload=payload)

    # Summarize --------------------------------------------------------------

    def _exec_summarize(self, op: TypedOp, now: datetime) -> ExecutionResult:
        a = op.args
        items, _ = self._resolve(op.target, now, op.op, for_read=True)
        if not items:
            raise EmptyTarget("summarize target resolved no readable items")
        texts = [it.text for it in items]
        summary = self.services.summarize(texts, a.focus, a.max_tokens)
        sim = cosine(self.services.embed(summary), self.services.embed("\n".join(texts)))
        facets = {"focus": a.focus} if a.focus else {}
        sid = self._insert(
            text=summary, type="summary", tags=["summary"], facets=facets, weight=DEFAULT_WEIGHT,
            embed=True, time=None, source="summarize", actor=op.meta.actor, location=None, now=now,
        )
        refs = [it.id for it in items]
        for ref in refs:
            self._link(sid, ref, "summary", now)
        return ExecutionResult("ok", op.op, affected_ids=[sid], payload={
            "summary_id": sid, "text": summary, "refs": refs,
            "similarity": sim, "tau": self.config.tau,
        })


def _order_time(items: list[MemoryItem], *, descending: bool) -> list[MemoryItem]:
    def key(it: MemoryItem):
        return parse_timestamp(it.time) if it.time else parse_timestamp("0001-01-01T00:00:00Z")
    # stable two-pass sort: id ascending breaks ties in either direction
    out = sorted(items, key=lambda it: id_key(it.id))
    return sorted(out, key=key, reverse=descending)


def _j(value: Any) -> str:
    return canonical_json(value)


def open_store(path: str | Path, services: ModelServices | None = None,
               config: StoreConfig | None = None, *, create: bool = False) -> MemoryStore:
    """Open an existing single-file store, or create one when ``create`` is set."""
    p = Path(path)
    if not create and str(path) != ":memory:" and not p.exists():
        raise FileNotFoundError(f"store {path} does not exist; run init first")
    return MemoryStore(p if str(path) != ":memory:" else ":memory:", services, config)
