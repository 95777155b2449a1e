"""Normalized instruction model shared by listings and traces.

Real exports come from arbitrary ISAs; everything downstream (descriptor
scanning, taint propagation) only needs a small opcode vocabulary, so the
exporter maps native mnemonics onto these classes and anything unknown
becomes ``other``.

Operand convention: ``operands[0]`` is the destination, the rest are sources.
For stores the destination is a memory token. Memory tokens are bracketed
(``[sp+0x40]``, ``[0x7f0000001000]``); immediates are decimal or 0x-prefixed
hex strings; anything else is a register name.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import BundleValidationError


class OpClass(str, Enum):
    MOVE_IMM = "move_imm"
    LOAD = "load"
    STORE = "store"
    MUL = "mul"
    ADD = "add"
    MAX = "max"
    MIN = "min"
    OTHER = "other"


_OPCLASS_VALUES = {o.value for o in OpClass}


def opclass_from_str(text: str) -> OpClass:
    """Map a mnemonic class string to OpClass; unknown strings become OTHER."""
    if text in _OPCLASS_VALUES:
        return OpClass(text)
    return OpClass.OTHER


def parse_addr(value) -> int:
    """Accept ints or 0x-prefixed hex strings."""
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        return int(value, 16)
    raise BundleValidationError(f"bad address value: {value!r}")


def format_addr(value: int) -> str:
    return f"0x{value:x}"


def is_memory_token(tok: str) -> bool:
    return tok.startswith("[") and tok.endswith("]")


def is_immediate_token(tok: str) -> bool:
    if is_memory_token(tok):
        return False
    try:
        int(tok, 0)
        return True
    except ValueError:
        return False


def immediate_value(tok: str) -> int:
    return int(tok, 0)


@dataclass(frozen=True)
class Instruction:
    addr: int
    opclass: OpClass
    operands: tuple[str, ...]
    raw: str

    def __post_init__(self):
        if self.opclass is OpClass.MOVE_IMM:
            imms = [t for t in self.operands if is_immediate_token(t)]
            if len(imms) != 1:
                raise BundleValidationError(
                    f"move_imm at {format_addr(self.addr)} must carry exactly "
                    f"one immediate operand, got {self.operands!r}"
                )

    @property
    def dest(self) -> str:
        return self.operands[0] if self.operands else ""

    @property
    def sources(self) -> tuple[str, ...]:
        return self.operands[1:]

    def to_json(self) -> dict:
        return {
            "addr": format_addr(self.addr),
            "opclass": self.opclass.value,
            "operands": list(self.operands),
            "raw": self.raw,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Instruction":
        return cls(
            addr=parse_addr(obj["addr"]),
            opclass=opclass_from_str(obj.get("opclass", "other")),
            operands=tuple(str(t) for t in obj.get("operands", [])),
            raw=str(obj.get("raw", "")),
        )
