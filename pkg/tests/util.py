"""Small helpers shared by the store, adapter and acceptance tests."""

import json

from memop.adapter import execute_instance
from memop.store import MemoryStore
from memop.timeutil import fixed_clock

CLOCK = "2025-06-01T12:00:00Z"


def run(store, step, at=CLOCK):
    if isinstance(step, dict):
        step = json.dumps(step)
    return execute_instance(step, store, fixed_clock(at))


def encode(store, text, tags=(), at=CLOCK, **args):
    a = {"payload": {"text": text}, "tags": list(tags), **args}
    res = run(store, {"op": "Encode", "args": a}, at)
    assert res.ok, res.to_dict()
    return res.payload["id"]


def seeded(*texts):
    store = MemoryStore()
    ids = [encode(store, t) for t in texts]
    return store, ids
