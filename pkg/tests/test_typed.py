import json
import logging
from datetime import datetime

import pytest
from hypothesis import HealthCheck, given, settings

from golden import EX1_PROMOTE, EX2_LOCK, RULE_FIXTURES
from memop.schema import OpKind, decode_instance, encode_instance
from memop.timeutil import NEG_INF, POS_INF, UTC, fixed_clock, format_timestamp
from memop.typed import (
    DEFAULT_RETRIEVE_K,
    BothOrNeither,
    InconsistentInstance,
    InvertedRange,
    UnresolvableTime,
    normalize_time_range,
    normalize_weight,
    parse,
)
from strategies import valid_instances

CLOCK = fixed_clock("2025-06-01T00:00:00Z")


def p(text, **kw):
    return parse(decode_instance(text), kw.pop("now", CLOCK), **kw)


def test_parse_example_promote():
    op = p(EX1_PROMOTE)
    assert op.op is OpKind.PROMOTE
    assert op.target.kind == "search"
    assert op.target.search.query == "OKR"
    assert op.target.search.limit == 3
    assert op.args.weight == 0.9


def test_label_dedupe_and_default_mode():
    op = p('{"op":"Label","target":{"ids":["1"]},"args":{"tags":["a","a","b"]}}')
    assert op.args.tags == ("a", "b")
    assert op.args.mode == "add"


def test_expire_ttl_folded_into_until():
    # oracle: 2025-01-01 + 7 calendar days
    op = p('{"op":"Expire","target":{"ids":["1"]},"args":{"ttl":"P7D","on_expire":"archive"},'
           '"meta":{"timestamp":"2025-01-01T00:00:00Z"}}')
    assert format_timestamp(op.args.until) == "2025-01-08T00:00:00Z"
    assert op.args.on_expire == "archive"
    assert "ttl" not in op.to_instance().args


def test_ttl_anchor_falls_back_to_clock():
    op = p('{"op":"Expire","target":{"ids":["1"]},"args":{"ttl":"PT1H","on_expire":"demote"}}')
    assert op.args.until == datetime(2025, 6, 1, 1, 0, tzinfo=UTC)


def test_ttl_strict_without_anchor():
    inst = decode_instance('{"op":"Expire","target":{"ids":["1"]},"args":{"ttl":"P1D","on_expire":"demote"}}')
    with pytest.raises(UnresolvableTime):
        parse(inst, None, strict=True)


def test_ttl_months_calendar_arithmetic():
    op = p('{"op":"Expire","target":{"ids":["1"]},"args":{"ttl":"P1M","on_expire":"demote"},'
           '"meta":{"timestamp":"2025-01-31T00:00:00Z"}}')
    assert format_timestamp(op.args.until) == "2025-02-28T00:00:00Z"


def test_example2_time_range_to_utc():
    # oracle: subtract the +08:00 offset by hand
    op = p(EX2_LOCK)
    lo, hi = op.target.filter.time_range
    assert format_timestamp(lo) == "2025-09-27T16:00:00Z"
    assert format_timestamp(hi) == "2025-10-05T15:59:59Z"
    assert op.target.filter.limit == 200
    assert op.args.policy.deny == ("Update", "Delete")


def test_time_range_open_and_inverted():
    lo, hi = normalize_time_range("2025-01-01T00:00:00Z", None)
    assert hi is POS_INF and lo == datetime(2025, 1, 1, tzinfo=UTC)
    assert normalize_time_range(None, "2025-01-01T00:00:00Z")[0] is NEG_INF
    with pytest.raises(InvertedRange):
        normalize_time_range("2025-02-01T00:00:00Z", "2025-01-01T00:00:00Z")


@pytest.mark.parametrize("cur,w,d,expected", [
    (0.5, 0.9, None, 0.9),
    (0.5, None, 0.0, 0.5),
    (0.9, None, 0.5, 1.0),
    (0.1, None, -0.2, 0.0),
    (0.5, 1.7, None, 1.0),
])
def test_normalize_weight(cur, w, d, expected):
    assert normalize_weight(cur, w, d) == expected


def test_normalize_weight_both_or_neither():
    with pytest.raises(BothOrNeither):
        normalize_weight(0.5)
    with pytest.raises(BothOrNeither):
        normalize_weight(0.5, 0.1, 0.1)


@pytest.mark.parametrize("search,expected", [
    ('{"intent":{"query":"q"}}', DEFAULT_RETRIEVE_K),
    ('{"intent":{"query":"q"},"limit":5}', 5),
    ('{"intent":{"query":"q"},"limit":5,"overrides":{"k":8}}', 5),
    ('{"intent":{"query":"q"},"limit":8,"overrides":{"k":3,"limit":4}}', 3),
])
def test_effective_search_limit(search, expected):
    op = p('{"op":"Retrieve","target":{"search":%s}}' % search)
    assert op.target.search.limit == expected


def test_defaults_materialized():
    assert p('{"op":"Summarize","target":{"ids":["1"]}}').args.max_tokens == 256
    assert p('{"op":"Delete","target":{"ids":["1"]}}').args.mode == "soft"
    assert p('{"op":"Split","target":{"ids":["1"]}}').args.strategy == "sentences"
    enc = p('{"op":"Encode","args":{"payload":{"text":"x"}}}').args
    assert enc.type == "note" and enc.use_embedding is True


def test_parse_rejects_invalid():
    with pytest.raises(InconsistentInstance):
        p(RULE_FIXTURES["R4"])


def test_negative_promote_delta_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="memop.typed"):
        op = p('{"op":"Promote","target":{"ids":["1"]},"args":{"weight_delta":-0.1}}')
    assert op.args.weight_delta == -0.1
    assert "negative" in caplog.text


def test_debug_json_is_json():
    assert json.loads(p(EX2_LOCK).debug_json())["op"] == "Lock"


@settings(max_examples=1500, deadline=None, suppress_health_check=list(HealthCheck))
@given(valid_instances())
def test_parse_idempotent(obj):
    first = parse(decode_instance(json.dumps(obj)), CLOCK)
    again = parse(decode_instance(encode_instance(first.to_instance())), CLOCK)
    assert again == first


@settings(max_examples=500, deadline=None, suppress_health_check=list(HealthCheck))
@given(valid_instances())
def test_parse_deterministic_and_clamped(obj):
    a = parse(decode_instance(json.dumps(obj)), CLOCK)
    b = parse(decode_instance(json.dumps(obj)), CLOCK)
    assert a == b
    if a.op in (OpKind.PROMOTE, OpKind.DEMOTE):
        assert 0.0 <= normalize_weight(0.5, a.args.weight, a.args.weight_delta) <= 1.0
