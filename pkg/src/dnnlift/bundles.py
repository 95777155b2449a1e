"""Function Bundle files: portable exports of disassembled operator functions.

One JSON file per executable:

    {
      "origin": "tvm" | "glow",
      "functions": [
        {
          "name": "FUN_00401000",
          "entry_addr": "0x401000",
          "disassembly": [ { "addr", "opclass", "operands", "raw" }, ... ],
          "pseudocode": "...",
          "param_records": [ { "index", "dims", "dtype" }, ... ]   # optional
        }, ...
      ]
    }

TVM-style exports embed one dimension descriptor per parameter directly in
the disassembly as a contiguous run of move_imm stores into a stack
descriptor region.  The slot stream (4-byte slots starting at offset
DESC_BASE) is, per parameter: ndim, dims..., dtype code.  Blocks for
successive parameters follow each other immediately; the explicit ndim header
is what delimits them.  ``scan_param_records`` decodes that stream; a
``param_records`` JSON field (for exporters that already scanned, or GLOW
files) is used as fallback and cross-checked when both exist.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import BundleFormatError, BundleValidationError, ExtractionError
from .isa import (
    Instruction,
    OpClass,
    format_addr,
    immediate_value,
    is_immediate_token,
    is_memory_token,
    parse_addr,
)

DESC_BASE = 0x40
DESC_SLOT = 4

DTYPE_CODES = {"f32": 0, "i8": 1, "u8": 2, "i32": 3}
DTYPE_FROM_CODE = {v: k for k, v in DTYPE_CODES.items()}

_LAYOUT_TAG_BY_NDIM = {2: "flat2d", 4: "nchw", 5: "nchwc", 6: "kernel_blocked"}


def layout_tag_for_dims(dims) -> str:
    return _LAYOUT_TAG_BY_NDIM.get(len(dims), "unknown")


@dataclass(frozen=True)
class ParamRecord:
    index: int
    dims: tuple[int, ...]
    dtype: str
    layout_tag: str = "unknown"

    def __post_init__(self):
        if not self.dims or any(d <= 0 for d in self.dims):
            raise BundleValidationError(
                f"param {self.index}: dims must be non-empty positive, got {self.dims}"
            )
        if self.dtype not in DTYPE_CODES:
            raise BundleValidationError(f"param {self.index}: unknown dtype {self.dtype!r}")

    def to_json(self) -> dict:
        return {"index": self.index, "dims": list(self.dims), "dtype": self.dtype}

    @classmethod
    def from_json(cls, obj: dict) -> "ParamRecord":
        dims = tuple(int(d) for d in obj["dims"])
        return cls(
            index=int(obj["index"]),
            dims=dims,
            dtype=str(obj["dtype"]),
            layout_tag=obj.get("layout_tag", layout_tag_for_dims(dims)),
        )


@dataclass(frozen=True)
class FunctionBundle:
    name: str
    entry_addr: int
    disassembly: tuple[Instruction, ...]
    pseudocode: str
    origin: str
    param_records: tuple[ParamRecord, ...] = field(default=())

    def to_json(self) -> dict:
        obj = {
            "name": self.name,
            "entry_addr": format_addr(self.entry_addr),
            "disassembly": [i.to_json() for i in self.disassembly],
            "pseudocode": self.pseudocode,
        }
        if self.param_records:
            obj["param_records"] = [r.to_json() for r in self.param_records]
        return obj


def _validate_bundle(b: FunctionBundle):
    if not b.pseudocode.strip():
        raise BundleValidationError(f"function {b.name}: pseudocode is empty")
    prev = None
    for insn in b.disassembly:
        if prev is not None and insn.addr <= prev:
            raise BundleValidationError(
                f"function {b.name}: disassembly addresses not strictly "
                f"increasing at {format_addr(insn.addr)}"
            )
        prev = insn.addr


def load_bundle_file(path) -> list[FunctionBundle]:
    """Parse and validate a Function Bundle JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise BundleFormatError(
                f"{path}: malformed JSON at line {e.lineno}: {e.msg}"
            ) from e
    origin = doc.get("origin")
    if origin not in ("tvm", "glow"):
        raise BundleFormatError(f"{path}: origin must be 'tvm' or 'glow', got {origin!r}")
    bundles = []
    for fn_obj in doc.get("functions", []):
        if "pseudocode" not in fn_obj or not str(fn_obj["pseudocode"]).strip():
            raise BundleValidationError(
                f"{path}: function {fn_obj.get('name', '?')} is missing pseudocode"
            )
        records = tuple(
            ParamRecord.from_json(r) for r in fn_obj.get("param_records", [])
        )
        bundle = FunctionBundle(
            name=str(fn_obj["name"]),
            entry_addr=parse_addr(fn_obj["entry_addr"]),
            disassembly=tuple(
                Instruction.from_json(i) for i in fn_obj.get("disassembly", [])
            ),
            pseudocode=str(fn_obj["pseudocode"]),
            origin=origin,
            param_records=records,
        )
        _validate_bundle(bundle)
        bundles.append(bundle)
    return bundles


def save_bundle_file(path, bundles: list[FunctionBundle], origin: str | None = None):
    if origin is None:
        origins = {b.origin for b in bundles}
        if len(origins) != 1:
            raise BundleValidationError(f"bundles have mixed origins: {origins}")
        origin = origins.pop()
    doc = {"origin": origin, "functions": [b.to_json() for b in bundles]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --- dimension descriptor encode / scan ---

def descriptor_instructions(records, start_addr: int, insn_size: int = 4):
    """Render parameter records as the move_imm descriptor stream.

    Shared by the synthetic compiler and the scanner so the format contract
    lives in one place.
    """
    slots = []
    for rec in records:
        slots.append(len(rec.dims))
        slots.extend(int(d) for d in rec.dims)
        slots.append(DTYPE_CODES[rec.dtype])
    insns = []
    addr = start_addr
    for i, value in enumerate(slots):
        off = DESC_BASE + i * DESC_SLOT
        insns.append(
            Instruction(
                addr=addr,
                opclass=OpClass.MOVE_IMM,
                operands=(f"[sp+0x{off:x}]", f"0x{value:x}"),
                raw=f"mov dword ptr [sp+0x{off:x}], 0x{value:x}",
            )
        )
        addr += insn_size
    return insns, addr


def _descriptor_slots(bundle: FunctionBundle) -> list[int]:
    slots = {}
    for insn in bundle.disassembly:
        if insn.opclass is not OpClass.MOVE_IMM:
            continue
        dest = insn.operands[0] if insn.operands else ""
        if not (is_memory_token(dest) and dest.startswith("[sp+0x") and dest.endswith("]")):
            continue
        off = int(dest[4:-1], 16)
        if off < DESC_BASE or (off - DESC_BASE) % DESC_SLOT != 0:
            continue
        imm = next(t for t in insn.operands if is_immediate_token(t))
        slots[(off - DESC_BASE) // DESC_SLOT] = immediate_value(imm)
    if not slots:
        return []
    ordered = sorted(slots)
    if ordered != list(range(len(ordered))):
        raise ExtractionError(
            f"function {bundle.name}: descriptor slot stream has gaps"
        )
    return [slots[i] for i in ordered]


def scan_param_records(bundle: FunctionBundle) -> list[ParamRecord]:
    """Extract parameter dimension/type records for a TVM function.

    Scans the disassembly descriptor stream; falls back to the explicit
    ``param_records`` field when the stream is absent (foreign exporters).
    """
    if bundle.origin != "tvm":
        raise ExtractionError(
            f"function {bundle.name}: {bundle.origin} exports carry no dimension records"
        )
    slots = _descriptor_slots(bundle)
    if not slots:
        if bundle.param_records:
            return [
                ParamRecord(r.index, r.dims, r.dtype, layout_tag_for_dims(r.dims))
                for r in bundle.param_records
            ]
        raise ExtractionError(
            f"function {bundle.name}: no dimension records found "
            "(stripped or obfuscated export?)"
        )
    records = []
    pos = 0
    index = 0
    while pos < len(slots):
        ndim = slots[pos]
        if ndim <= 0 or pos + ndim + 2 > len(slots):
            raise ExtractionError(
                f"function {bundle.name}: truncated descriptor block at slot {pos}"
            )
        dims = tuple(slots[pos + 1 : pos + 1 + ndim])
        code = slots[pos + 1 + ndim]
        if code not in DTYPE_FROM_CODE:
            raise ExtractionError(
                f"function {bundle.name}: unknown dtype code {code} at slot {pos}"
            )
        records.append(
            ParamRecord(index, dims, DTYPE_FROM_CODE[code], layout_tag_for_dims(dims))
        )
        pos += ndim + 2
        index += 1
    if bundle.param_records:
        declared = [(r.index, tuple(r.dims), r.dtype) for r in bundle.param_records]
        scanned = [(r.index, tuple(r.dims), r.dtype) for r in records]
        if declared != scanned:
            raise ExtractionError(
                f"function {bundle.name}: descriptor stream disagrees with "
                f"declared param_records"
            )
    return records
