import dataclasses

from golden import EX1_CLOCK, EX2_CLOCK, EXAMPLE_1, EXAMPLE_2
from memop.adapter import confirmation_gate, dispatch, execute_instance, run_sequence
from memop.schema import OpKind, decode_instance
from memop.store import MemoryStore
from memop.timeutil import fixed_clock
from memop.typed import parse

CLOCK = fixed_clock("2025-06-01T00:00:00Z")


def typed(text):
    return parse(decode_instance(text), CLOCK)


def test_dispatch_encode():
    store = MemoryStore()
    res = dispatch(typed('{"op":"Encode","args":{"payload":{"text":"x"}}}'), store, CLOCK)
    assert res.ok and res.count_delta == 1
    assert len(store.audit_records()) == 1


def test_dispatch_dry_run_any_op():
    store = MemoryStore()
    execute_instance('{"op":"Encode","args":{"payload":{"text":"a. b."}}}', store, CLOCK)
    before = store.snapshot_digest()
    audits = len(store.audit_records())
    for text in ('{"op":"Split","target":{"ids":["1"]},"meta":{"dry_run":true}}',
                 '{"op":"Delete","target":{"all":true},"args":{"mode":"hard"},"meta":{"dry_run":true}}',
                 '{"op":"Encode","args":{"payload":{"text":"y"}},"meta":{"dry_run":true}}'):
        res = dispatch(typed(text), store, CLOCK)
        assert res.ok and res.dry_run
    assert store.snapshot_digest() == before
    assert len(store.audit_records()) == audits


def test_gate_on_unconfirmed_global_hard_delete():
    # build the op directly so the validator does not get there first
    op = typed('{"op":"Delete","target":{"all":true},"args":{"mode":"hard"},"meta":{"confirmation":true}}')
    op = dataclasses.replace(op, meta=dataclasses.replace(op.meta, confirmation=False))
    assert confirmation_gate(op).code == "E_CONFIRMATION_REQUIRED"
    res = dispatch(op, MemoryStore(), CLOCK)
    assert res.status == "error" and res.diagnostics[0].rule == "ConfirmationRequired"


def test_unsupported_op():
    class Partial(MemoryStore):
        capabilities = frozenset({OpKind.ENCODE})

    res = dispatch(typed('{"op":"Retrieve","target":{"ids":["1"]}}'), Partial(), CLOCK)
    assert res.diagnostics[0].code == "E_UNSUPPORTED_OP"


def test_example_sequences():
    store = MemoryStore()
    r1 = run_sequence(EXAMPLE_1, store, fixed_clock(EX1_CLOCK))
    assert [r.status for r in r1] == ["ok"] * 3
    assert r1[2].affected_ids == ["1", "2"]
    r2 = run_sequence(EXAMPLE_2, store, fixed_clock(EX2_CLOCK))
    assert [r.status for r in r2] == ["ok"] * 3
    assert r2[2].payload["refs"] == ["3"]


def test_fail_stop():
    res = run_sequence(['{"op":"Forget"}', '{"op":"Encode","args":{"payload":{"text":"x"}}}'],
                       MemoryStore(), CLOCK)
    assert [r.status for r in res] == ["error", "skipped"]
    assert res[1].op is OpKind.ENCODE


def test_error_kinds_are_results():
    store = MemoryStore()
    assert execute_instance("{not json", store, CLOCK).diagnostics[0].code == "E_MALFORMED_JSON"
    assert execute_instance('{"op":"Lock","target":{"ids":["1"]},"args":{"mode":"frozen"}}',
                            store, CLOCK).diagnostics[0].rule == "R6"
    assert execute_instance({"op": "Encode", "args": {"payload": {"text": "dict input"}}}, store, CLOCK).ok


def test_force_dry_run():
    store = MemoryStore()
    d = store.content_digest()
    res = execute_instance('{"op":"Encode","args":{"payload":{"text":"x"}}}', store, CLOCK, force_dry_run=True)
    assert res.ok and res.dry_run and store.content_digest() == d


def test_dispatch_is_deterministic():
    outs = []
    for _ in range(2):
        store = MemoryStore()
        outs.append([r.to_json() for r in run_sequence(EXAMPLE_1, store, fixed_clock(EX1_CLOCK))])
    assert outs[0] == outs[1]
