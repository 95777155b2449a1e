"""Dynamic trace files: the offline record an instrumenter leaves behind.

Format: one JSON object per line in a ``.jsonl`` file, discriminated by
``type``; raw little-endian tensor blobs live in a sibling directory named
``<stem>_blobs`` with one file per dump, keyed ``<fn>.param<N>``.

Event types:

    {"type": "call", "seq", "fn", "param_addrs": ["0x...", ...]}
    {"type": "first_read", "fn", "param_index", "insn_addr"}
    {"type": "insn_window", "fn", "instructions": [...]}
    {"type": "tensor_dump", "fn", "param_index", "dims", "dtype", "data_ref"}

Parameter addresses follow the calling convention shared with the listing
side: inputs first, outputs last.  Output dumps use next-entry semantics
(captured when the following function is entered), so with buffer reuse a
dump always reflects the producer that most recently wrote the address.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NotTracedError, TraceValidationError
from .isa import Instruction, format_addr, parse_addr

NP_DTYPES = {
    "f32": np.dtype("<f4"),
    "i8": np.dtype("<i1"),
    "u8": np.dtype("<u1"),
    "i32": np.dtype("<i4"),
}


@dataclass(frozen=True)
class CallEvent:
    seq: int
    fn: str
    param_addrs: tuple[int, ...]

    def to_json(self):
        return {
            "type": "call",
            "seq": self.seq,
            "fn": self.fn,
            "param_addrs": [format_addr(a) for a in self.param_addrs],
        }


@dataclass(frozen=True)
class FirstReadEvent:
    fn: str
    param_index: int
    insn_addr: int

    def to_json(self):
        return {
            "type": "first_read",
            "fn": self.fn,
            "param_index": self.param_index,
            "insn_addr": format_addr(self.insn_addr),
        }


@dataclass(frozen=True)
class InsnWindowEvent:
    fn: str
    instructions: tuple[Instruction, ...]

    def to_json(self):
        return {
            "type": "insn_window",
            "fn": self.fn,
            "instructions": [i.to_json() for i in self.instructions],
        }


@dataclass(frozen=True)
class TensorDumpEvent:
    fn: str
    param_index: int
    dims: tuple[int, ...]
    dtype: str
    data_ref: str

    def to_json(self):
        return {
            "type": "tensor_dump",
            "fn": self.fn,
            "param_index": self.param_index,
            "dims": list(self.dims),
            "dtype": self.dtype,
            "data_ref": self.data_ref,
        }


def _event_from_json(obj: dict):
    kind = obj.get("type")
    if kind == "call":
        return CallEvent(
            seq=int(obj["seq"]),
            fn=str(obj["fn"]),
            param_addrs=tuple(parse_addr(a) for a in obj["param_addrs"]),
        )
    if kind == "first_read":
        return FirstReadEvent(str(obj["fn"]), int(obj["param_index"]), parse_addr(obj["insn_addr"]))
    if kind == "insn_window":
        return InsnWindowEvent(
            str(obj["fn"]),
            tuple(Instruction.from_json(i) for i in obj["instructions"]),
        )
    if kind == "tensor_dump":
        return TensorDumpEvent(
            fn=str(obj["fn"]),
            param_index=int(obj["param_index"]),
            dims=tuple(int(d) for d in obj["dims"]),
            dtype=str(obj["dtype"]),
            data_ref=str(obj["data_ref"]),
        )
    raise TraceValidationError(f"unknown trace event type {kind!r}")


class TraceLog:
    """Immutable view over a validated event stream plus its blobs."""

    def __init__(self, events, blobs: dict[str, bytes]):
        self.events = tuple(events)
        self.blobs = dict(blobs)
        self.calls = [e for e in self.events if isinstance(e, CallEvent)]
        self._calls_by_fn = {c.fn: c for c in self.calls}
        self._dumps = {
            (e.fn, e.param_index): e
            for e in self.events
            if isinstance(e, TensorDumpEvent)
        }
        self._first_reads = {
            (e.fn, e.param_index): e
            for e in self.events
            if isinstance(e, FirstReadEvent)
        }
        self._windows = {}
        for e in self.events:
            if isinstance(e, InsnWindowEvent):
                self._windows.setdefault(e.fn, e)
        self._validate()

    def _validate(self):
        prev = None
        known = set()
        for e in self.events:
            if isinstance(e, CallEvent):
                if prev is not None and e.seq <= prev:
                    raise TraceValidationError(
                        f"call seq not strictly increasing at {e.fn} (seq {e.seq})"
                    )
                prev = e.seq
                known.add(e.fn)
            elif not isinstance(e, InsnWindowEvent):
                if e.fn not in known:
                    raise TraceValidationError(
                        f"{type(e).__name__} for {e.fn} precedes its call event"
                    )
        for (fn, idx), e in self._dumps.items():
            blob = self.blobs.get(e.data_ref)
            if blob is None:
                raise TraceValidationError(f"dangling data_ref {e.data_ref!r}")
            want = int(np.prod(e.dims)) * NP_DTYPES[e.dtype].itemsize
            if len(blob) != want:
                raise TraceValidationError(
                    f"blob {e.data_ref}: {len(blob)} bytes, expected {want} "
                    f"for dims {e.dims} {e.dtype}"
                )

    def call(self, fn: str) -> CallEvent:
        c = self._calls_by_fn.get(fn)
        if c is None:
            raise NotTracedError(f"no call event for {fn}")
        return c

    def dump_event(self, fn: str, param_index: int) -> TensorDumpEvent | None:
        return self._dumps.get((fn, param_index))

    def first_read(self, fn: str, param_index: int) -> FirstReadEvent | None:
        return self._first_reads.get((fn, param_index))

    def window(self, fn: str) -> InsnWindowEvent | None:
        return self._windows.get(fn)

    def tensor(self, fn: str, param_index: int) -> np.ndarray:
        e = self._dumps.get((fn, param_index))
        if e is None:
            raise NotTracedError(
                f"{fn} param {param_index} was not dumped; re-run the trace "
                f"with dumps enabled for {fn}"
            )
        arr = np.frombuffer(self.blobs[e.data_ref], dtype=NP_DTYPES[e.dtype])
        return arr.reshape(e.dims)


def blob_dir_for(path) -> Path:
    p = Path(path)
    return p.parent / (p.stem + "_blobs")


def load_trace(path) -> TraceLog:
    """Load and validate a trace JSONL file plus its blob directory."""
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceValidationError(f"{path}:{lineno}: bad JSON: {e.msg}") from e
            events.append(_event_from_json(obj))
    blobs = {}
    bdir = blob_dir_for(path)
    if bdir.is_dir():
        for name in sorted(os.listdir(bdir)):
            with open(bdir / name, "rb") as fh:
                blobs[name] = fh.read()
    return TraceLog(events, blobs)


def save_trace(path, log: TraceLog):
    with open(path, "w", encoding="utf-8") as fh:
        for e in log.events:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")
    bdir = blob_dir_for(path)
    bdir.mkdir(parents=True, exist_ok=True)
    for ref, blob in sorted(log.blobs.items()):
        with open(bdir / ref, "wb") as fh:
            fh.write(blob)


def dump_io(log: TraceLog, fn: str):
    """Materialize a function's dumped input tensors and output tensor.

    All parameters but the last are returned as inputs, in parameter order.
    A single trivial input is enough for full coverage, so one trace suffices.
    """
    call = log.call(fn)
    n = len(call.param_addrs)
    inputs = [log.tensor(fn, i) for i in range(n - 1)]
    output = log.tensor(fn, n - 1)
    return inputs, output
