"""Hypothesis strategies producing valid schema instances as plain JSON dicts."""

from datetime import datetime, timezone

from hypothesis import strategies as st

from memop.schema import LOCK_MODES, ON_EXPIRE, ORDER_BY, OP_NAMES

text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"),
    min_size=1, max_size=30,
).filter(lambda s: s.strip())
word = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789:-_", min_size=1, max_size=12)
tags = st.lists(word, max_size=4)
facets = st.dictionaries(word, text, max_size=3)
unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
delta = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)
positive = st.integers(min_value=1, max_value=500)
ids = st.lists(st.integers(1, 9999).map(str), min_size=1, max_size=5, unique=True)
ops = st.lists(st.sampled_from(sorted(OP_NAMES)), max_size=3)


@st.composite
def timestamps(draw):
    y = draw(st.integers(2000, 2035))
    mo = draw(st.integers(1, 12))
    d = draw(st.integers(1, 28))
    h = draw(st.integers(0, 23))
    mi = draw(st.integers(0, 59))
    s = draw(st.integers(0, 59))
    off = draw(st.sampled_from(["Z", "+08:00", "-05:00", "+00:00", "+05:30"]))
    return f"{y:04d}-{mo:02d}-{d:02d}T{h:02d}:{mi:02d}:{s:02d}{off}"


durations = st.sampled_from(["P1D", "P7D", "PT1H", "PT30M", "P1W", "P1Y2M", "P2DT3H"])


def optional(d: dict, key: str, strategy, draw):
    if draw(st.booleans()):
        d[key] = draw(strategy)


@st.composite
def filters(draw, need_limit: bool):
    f: dict = {}
    keys = draw(st.lists(st.sampled_from(["has_tags", "type", "time_range", "weight_range"]),
                         min_size=1, max_size=4, unique=True))
    if "has_tags" in keys:
        f["has_tags"] = draw(tags)
    if "type" in keys:
        f["type"] = draw(word)
    if "time_range" in keys:
        a, b = sorted([draw(st.integers(0, 10**9)), draw(st.integers(0, 10**9))])
        fmt = lambda t: datetime.fromtimestamp(t, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        which = draw(st.sampled_from(["both", "start", "end"]))
        tr = {}
        if which in ("both", "start"):
            tr["start"] = fmt(a)
        if which in ("both", "end"):
            tr["end"] = fmt(b)
        f["time_range"] = tr
    if "weight_range" in keys:
        lo, hi = sorted([draw(unit), draw(unit)])
        f["weight_range"] = {"min": lo, "max": hi}
    if need_limit or draw(st.booleans()):
        f["limit"] = draw(positive)
    return f


@st.composite
def searches(draw, need_limit: bool):
    s: dict = {"intent": {"query": draw(text)}}
    optional(s["intent"], "context", text, draw)
    if draw(st.booleans()):
        ov: dict = {}
        optional(ov, "k", positive, draw)
        optional(ov, "order_by", st.sampled_from(ORDER_BY), draw)
        optional(ov, "limit", positive, draw)
        s["overrides"] = ov
    if need_limit or draw(st.booleans()):
        s["limit"] = draw(positive)
    return s


@st.composite
def targets(draw, stage: str):
    kind = draw(st.sampled_from(["ids", "filter", "search", "all"]))
    sto = stage == "STO"
    if kind == "ids":
        return {"ids": draw(ids)}, False
    if kind == "filter":
        return {"filter": draw(filters(sto))}, False
    if kind == "search":
        return {"search": draw(searches(sto))}, False
    return {"all": True}, True


STAGE = {"Encode": "ENC", "Retrieve": "RET", "Summarize": "RET"}


@st.composite
def args_for(draw, op: str) -> dict:
    a: dict = {}
    if op == "Encode":
        a["payload"] = {"text": draw(text)}
        optional(a, "tags", tags, draw)
        optional(a, "type", word, draw)
        optional(a, "time", timestamps(), draw)
        optional(a, "source", word, draw)
        optional(a, "location", word, draw)
        optional(a, "facets", facets, draw)
        optional(a, "use_embedding", st.booleans(), draw)
    elif op == "Update":
        choices = {"text": text, "type": word, "tags": tags, "facets": facets, "weight": unit,
                   "time": timestamps(), "source": word, "actor": word, "location": word}
        keys = draw(st.lists(st.sampled_from(sorted(choices)), min_size=1, max_size=4, unique=True))
        a["set"] = {k: draw(choices[k]) for k in keys}
    elif op == "Label":
        a["tags"] = draw(st.lists(word, min_size=1, max_size=4))
        optional(a, "facets", facets, draw)
        optional(a, "mode", st.sampled_from(["add", "replace", "remove"]), draw)
    elif op in ("Promote", "Demote"):
        if draw(st.booleans()):
            a["weight"] = draw(unit)
        else:
            a["weight_delta"] = draw(delta)
        optional(a, "reason", text, draw)
        if op == "Promote" and draw(st.booleans()):
            r = {}
            optional(r, "cadence", durations, draw)
            optional(r, "at", timestamps(), draw)
            a["reminder"] = r
        if op == "Demote":
            optional(a, "archive", st.booleans(), draw)
    elif op == "Merge":
        optional(a, "strategy", st.sampled_from(["concat_dedupe", "summary"]), draw)
        optional(a, "delete_children", st.booleans(), draw)
    elif op == "Delete":
        optional(a, "mode", st.just("soft"), draw)
        optional(a, "reason", text, draw)
    elif op == "Split":
        optional(a, "strategy", st.sampled_from(["sentences", "chunks"]), draw)
        optional(a, "chunk_size", positive, draw)
    elif op == "Lock":
        a["mode"] = draw(st.sampled_from(LOCK_MODES))
        optional(a, "reason", text, draw)
        if draw(st.booleans()):
            p: dict = {}
            optional(p, "allow", ops, draw)
            optional(p, "deny", ops, draw)
            optional(p, "reviewers", st.lists(word, max_size=3), draw)
            optional(p, "expires", timestamps(), draw)
            a["policy"] = p
    elif op == "Expire":
        if draw(st.booleans()):
            a["ttl"] = draw(durations)
        else:
            a["until"] = draw(timestamps())
        a["on_expire"] = draw(st.sampled_from(ON_EXPIRE))
    elif op == "Retrieve":
        optional(a, "fields", st.lists(st.sampled_from(["id", "text", "tags", "weight", "time", "score"]),
                                       max_size=4, unique=True), draw)
    elif op == "Summarize":
        optional(a, "focus", text, draw)
        optional(a, "max_tokens", positive, draw)
    return a


@st.composite
def valid_instances(draw) -> dict:
    """A valid instance dict already in canonical shape (no null or false-default keys)."""
    op = draw(st.sampled_from(sorted(OP_NAMES)))
    stage = STAGE.get(op, "STO")
    obj: dict = {"op": op, "args": draw(args_for(op))}
    if draw(st.booleans()):
        obj["stage"] = stage
    needs_confirm = False
    if op != "Encode":
        obj["target"], needs_confirm = draw(targets(stage))
    meta: dict = {}
    optional(meta, "actor", word, draw)
    optional(meta, "timestamp", timestamps(), draw)
    optional(meta, "lang", st.sampled_from(["en", "zh"]), draw)
    if needs_confirm or draw(st.booleans()):
        meta["confirmation"] = True
    if draw(st.booleans()):
        meta["dry_run"] = True
    if meta:
        obj["meta"] = meta
    return obj


@st.composite
def permuted(draw, obj):
    """Same JSON value with every object's keys shuffled."""
    if isinstance(obj, dict):
        keys = draw(st.permutations(list(obj)))
        return {k: draw(permuted(obj[k])) for k in keys}
    if isinstance(obj, list):
        return [draw(permuted(v)) for v in obj]
    return obj
