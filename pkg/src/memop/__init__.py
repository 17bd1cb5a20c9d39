"""Structured memory operations: schema, validation, typed ops, a sqlite store and a bench harness."""

__version__ = "0.1.0"

from .adapter import dispatch, execute_instance, run_sequence
from .schema import OpKind, SchemaInstance, Stage, canonical_json, decode_instance, encode_instance
from .store import ExecutionResult, MemoryStore, open_store
from .typed import TypedOp, parse
from .validator import ValidationReport, validate

__all__ = [
    "OpKind", "Stage", "SchemaInstance", "decode_instance", "encode_instance", "canonical_json",
    "validate", "ValidationReport", "parse", "TypedOp", "MemoryStore", "open_store",
    "ExecutionResult", "dispatch", "execute_instance", "run_sequence", "__version__",
]
