"""Flat-module parser and reference stack-machine interpreter.

The interpreter executes a module deterministically and records the ordered
sequence of retired opcodes.  That sequence is the ground truth every
downstream stage is evaluated against.
"""

from dataclasses import dataclass, field

from .opcodes import (
    OPCODE_INFO,
    OPENERS,
    OpcodeId,
    opcode_family,  # re-exported as part of this module's surface
    opcode_info,
)

__all__ = [
    "FlatModule",
    "Instruction",
    "OpcodeTrace",
    "ParseError",
    "Trap",
    "Interpreter",
    "parse_flat_module",
    "serialize_module",
    "execute",
    "opcode_family",
]

PAGE_BYTES = 65536  # one linear-memory page
MAX_MEMORY_PAGES = 256

_I32_MASK = 0xFFFFFFFF
_I64_MASK = 0xFFFFFFFFFFFFFFFF


class ParseError(ValueError):
    """Malformed flat-module text; carries the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class Trap(RuntimeError):
    """Runtime fault (division by zero, bad memory access, underflow)."""


@dataclass(frozen=True, slots=True)
class Instruction:
    opcode: OpcodeId
    immediates: tuple[int, ...] = ()


@dataclass(frozen=True)
class FlatModule:
    instructions: tuple[Instruction, ...]
    locals_count: int = 0
    initial_memory_pages: int = 0


@dataclass(frozen=True)
class OpcodeTrace:
    """Ordered retirement record of one execution."""

    executed: tuple[OpcodeId, ...]
    step_limit_hit: bool


def _wrap(value: int, mask: int) -> int:
    """Two's-complement wrap of an arbitrary int to the given width."""
    value &= mask
    sign_bit = (mask >> 1) + 1
    return value - (mask + 1) if value & sign_bit else value


def _to_unsigned(value: int, mask: int) -> int:
    return value & mask


def parse_flat_module(text: str) -> FlatModule:
    """Parse flat-module text into a validated FlatModule.

    Accepted lines: blank, '# comment', '.locals N', '.memory N',
    '@label:' and 'mnemonic [immediates...]'.  'call' accepts either a
    numeric instruction index or '@label'.  Labels resolve at parse time
    and are not kept in the module.
    """
    instructions: list[tuple[int, str, list[str]]] = []  # (line_no, mnemonic, raw imms)
    labels: dict[str, int] = {}
    locals_count = 0
    memory_pages = 0
    depth = 0  # structured-control nesting while scanning

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("."):
            parts = line.split()
            if parts[0] == ".locals":
                locals_count = _parse_directive_int(parts, line_no, ".locals")
            elif parts[0] == ".memory":
                memory_pages = _parse_directive_int(parts, line_no, ".memory")
            else:
                raise ParseError(line_no, f"unknown directive {parts[0]!r}")
            continue
        if line.startswith("@"):
            if not line.endswith(":"):
                raise ParseError(line_no, "label line must end with ':'")
            name = line[1:-1]
            if not name:
                raise ParseError(line_no, "empty label name")
            if name in labels:
                raise ParseError(line_no, f"duplicate label @{name}")
            if depth != 0:
                raise ParseError(line_no, "label inside an open control structure")
            labels[name] = len(instructions)
            continue
        parts = line.split()
        mnemonic, raw_imms = parts[0], parts[1:]
        info = OPCODE_INFO.get(mnemonic)
        if info is None:
            raise ParseError(line_no, f"unknown mnemonic {mnemonic!r}")
        if len(raw_imms) != info.n_immediates:
            raise ParseError(
                line_no,
                f"{mnemonic} takes {info.n_immediates} immediate(s), got {len(raw_imms)}",
            )
        family = info.opcode.family
        if family in OPENERS:
            depth += 1
        elif family == "end":
            if depth == 0:
                raise ParseError(line_no, "'end' without matching opener")
            depth -= 1
        instructions.append((line_no, mnemonic, raw_imms))

    if depth != 0:
        raise ParseError(len(text.splitlines()) or 1, "unclosed control structure at end of module")

    resolved = _resolve(instructions, labels, locals_count)
    return FlatModule(
        instructions=resolved,
        locals_count=locals_count,
        initial_memory_pages=memory_pages,
    )


def _parse_directive_int(parts: list[str], line_no: int, name: str) -> int:
    if len(parts) != 2:
        raise ParseError(line_no, f"{name} takes one integer argument")
    try:
        value = int(parts[1])
    except ValueError:
        raise ParseError(line_no, f"{name} argument must be an integer") from None
    if value < 0:
        raise ParseError(line_no, f"{name} argument must be non-negative")
    return value


def _resolve(
    raw: list[tuple[int, str, list[str]]],
    labels: dict[str, int],
    locals_count: int,
) -> tuple[Instruction, ...]:
    """Second pass: immediates, label targets, branch depths, else/if pairing."""
    out: list[Instruction] = []
    # stack of (family, line) for opener bookkeeping; 'if' entries flip to
    # 'if+else' once an else is seen so a second else can be rejected.
    openers: list[list] = []
    n = len(raw)
    for index, (line_no, mnemonic, raw_imms) in enumerate(raw):
        info = OPCODE_INFO[mnemonic]
        family = info.opcode.family
        imms: list[int] = []
        for text_imm in raw_imms:
            if family == "call" and text_imm.startswith("@"):
                name = text_imm[1:]
                if name not in labels:
                    raise ParseError(line_no, f"unknown label @{name}")
                imms.append(labels[name])
                continue
            try:
                imms.append(int(text_imm))
            except ValueError:
                raise ParseError(line_no, f"bad immediate {text_imm!r}") from None

        if family in ("local.get", "local.set", "local.tee"):
            if imms[0] < 0 or imms[0] >= locals_count:
                raise ParseError(line_no, f"local index {imms[0]} out of range")
        elif family in ("global.get", "global.set"):
            if imms[0] < 0:
                raise ParseError(line_no, "global index must be non-negative")
        elif family in ("br", "br_if"):
            if imms[0] < 0:
                raise ParseError(line_no, "branch depth must be non-negative")
            if imms[0] >= len(openers):
                raise ParseError(line_no, "branch depth exceeds nesting")
        elif family == "call":
            if not 0 <= imms[0] < n:
                raise ParseError(line_no, f"call target {imms[0]} out of range")

        if family in OPENERS:
            openers.append([family, line_no])
        elif family == "else":
            if not openers or openers[-1][0] != "if":
                raise ParseError(line_no, "'else' outside an if")
            openers[-1][0] = "if+else"
        elif family == "end":
            openers.pop()

        out.append(Instruction(info.opcode, tuple(imms)))
    return tuple(out)


def serialize_module(module: FlatModule) -> str:
    """Render a module back to flat text (labels are already resolved)."""
    lines: list[str] = []
    if module.locals_count:
        lines.append(f".locals {module.locals_count}")
    if module.initial_memory_pages:
        lines.append(f".memory {module.initial_memory_pages}")
    for instr in module.instructions:
        if instr.immediates:
            imm_text = " ".join(str(v) for v in instr.immediates)
            lines.append(f"{instr.opcode.mnemonic} {imm_text}")
        else:
            lines.append(instr.opcode.mnemonic)
    return "\n".join(lines) + "\n"


@dataclass
class _ControlFrame:
    family: str  # block | loop | if | if+else
    start: int  # instruction index of the opener
    end: int  # index of the matching 'end'
    else_index: int | None
    stack_height: int


class Interpreter:
    """Executes a FlatModule; inspectable state for tests."""

    def __init__(self, module: FlatModule):
        self.module = module
        self.stack: list[int] = []
        self.locals: list[int] = [0] * module.locals_count
        self.globals: dict[int, int] = {}
        self.memory = bytearray(module.initial_memory_pages * PAGE_BYTES)
        self.control: list[_ControlFrame] = []
        self.call_stack: list[tuple[int, int]] = []  # (return pc, control height)
        self._structure = _match_structures(module.instructions)

    # -- value-stack helpers ------------------------------------------------

    def _pop(self) -> int:
        if not self.stack:
            raise Trap("operand stack underflow")
        return self.stack.pop()

    def _push(self, value: int) -> None:
        self.stack.append(value)

    # -- execution ----------------------------------------------------------

    def run(self, step_limit: int) -> OpcodeTrace:
        if step_limit <= 0:
            raise ValueError("step_limit must be positive")
        executed: list[OpcodeId] = []
        instrs = self.module.instructions
        pc = 0
        limit_hit = False
        while pc < len(instrs):
            if len(executed) >= step_limit:
                limit_hit = True
                break
            instr = instrs[pc]
            executed.append(instr.opcode)
            try:
                pc = self._step(pc, instr)
            except Trap:
                break
            if pc is None:  # explicit halt via top-level return
                break
        return OpcodeTrace(executed=tuple(executed), step_limit_hit=limit_hit)

    def _step(self, pc: int, instr: Instruction) -> int | None:
        family = instr.opcode.family
        mnemonic = instr.opcode.mnemonic
        is64 = mnemonic.startswith("i64.")
        mask = _I64_MASK if is64 else _I32_MASK
        bits = 64 if is64 else 32
        imms = instr.immediates

        if family == "const":
            self._push(_wrap(imms[0], mask))
        elif family in _BINOPS:
            rhs, lhs = self._pop(), self._pop()
            self._push(_BINOPS[family](lhs, rhs, mask, bits))
        elif family in _COMPARES:
            rhs, lhs = self._pop(), self._pop()
            self._push(1 if _COMPARES[family](lhs, rhs) else 0)
        elif family == "eqz":
            self._push(1 if self._pop() == 0 else 0)
        elif family == "drop":
            self._pop()
        elif family == "select":
            cond, b, a = self._pop(), self._pop(), self._pop()
            self._push(a if cond != 0 else b)
        elif family == "local.get":
            self._push(self.locals[imms[0]])
        elif family == "local.set":
            self.locals[imms[0]] = self._pop()
        elif family == "local.tee":
            value = self._pop()
            self._push(value)
            self.locals[imms[0]] = value
        elif family == "global.get":
            self._push(self.globals.get(imms[0], 0))
        elif family == "global.set":
            self.globals[imms[0]] = self._pop()
        elif family == "load":
            self._push(self._load(self._pop(), 8 if is64 else 4, mask))
        elif family == "store":
            value, addr = self._pop(), self._pop()
            self._store(addr, value, 8 if is64 else 4, mask)
        elif family == "memory.grow":
            delta = _to_unsigned(self._pop(), _I32_MASK)
            current = len(self.memory) // PAGE_BYTES
            if current + delta > MAX_MEMORY_PAGES:
                self._push(-1)
            else:
                self.memory.extend(bytes(delta * PAGE_BYTES))
                self._push(current)
        elif family == "nop":
            pass
        elif family in OPENERS:
            return self._enter(pc, family)
        elif family == "else":
            # Reached only by falling out of the then-branch: skip to 'end'.
            return self.control[-1].end
        elif family == "end":
            if self.control:
                self.control.pop()
        elif family == "br":
            return self._branch(imms[0])
        elif family == "br_if":
            cond = self._pop()
            if cond != 0:
                return self._branch(imms[0])
        elif family == "call":
            self.call_stack.append((pc + 1, len(self.control)))
            return imms[0]
        elif family == "return":
            if not self.call_stack:
                return None  # top-level return halts execution
            return_pc, height = self.call_stack.pop()
            del self.control[height:]
            return return_pc
        else:  # pragma: no cover - registry and dispatch must stay in sync
            raise AssertionError(f"unhandled opcode {mnemonic}")
        return pc + 1

    def _enter(self, pc: int, family: str) -> int:
        else_index, end_index = self._structure[pc]
        frame = _ControlFrame(family, pc, end_index, else_index, len(self.stack))
        if family == "if":
            cond = self._pop()
            frame.stack_height = len(self.stack)
            self.control.append(frame)
            if cond == 0:
                # False path: enter at else-body or at 'end' (which pops).
                return else_index + 1 if else_index is not None else end_index
        else:
            self.control.append(frame)
        return pc + 1

    def _branch(self, depth: int) -> int:
        if depth >= len(self.control):
            raise Trap("branch depth exceeds runtime nesting")
        target = self.control[-1 - depth]
        del self.stack[target.stack_height :]
        if target.family == "loop":
            # Re-enter the loop body; frames above the target unwind.
            del self.control[len(self.control) - depth :]
            return target.start + 1
        del self.control[len(self.control) - depth - 1 :]
        return target.end + 1

    def _load(self, addr: int, size: int, mask: int) -> int:
        addr = _to_unsigned(addr, _I32_MASK)
        if addr + size > len(self.memory):
            raise Trap("out-of-bounds memory read")
        raw = int.from_bytes(self.memory[addr : addr + size], "little")
        return _wrap(raw, mask)

    def _store(self, addr: int, value: int, size: int, mask: int) -> None:
        addr = _to_unsigned(addr, _I32_MASK)
        if addr + size > len(self.memory):
            raise Trap("out-of-bounds memory write")
        self.memory[addr : addr + size] = _to_unsigned(value, mask).to_bytes(size, "little")


def _match_structures(
    instructions: tuple[Instruction, ...],
) -> dict[int, tuple[int | None, int]]:
    """Map each opener index to (else index or None, end index)."""
    result: dict[int, tuple[int | None, int]] = {}
    stack: list[tuple[int, int | None]] = []  # (opener index, else index)
    for index, instr in enumerate(instructions):
        family = instr.opcode.family
        if family in OPENERS:
            stack.append((index, None))
        elif family == "else":
            opener, _ = stack[-1]
            stack[-1] = (opener, index)
        elif family == "end":
            opener, else_index = stack.pop()
            result[opener] = (else_index, index)
    return result


def _div_s(lhs: int, rhs: int, mask: int, bits: int) -> int:
    if rhs == 0:
        raise Trap("integer division by zero")
    if lhs == -(1 << (bits - 1)) and rhs == -1:
        raise Trap("integer overflow in division")
    quotient = abs(lhs) // abs(rhs)
    return quotient if (lhs < 0) == (rhs < 0) else -quotient


def _rem_s(lhs: int, rhs: int, mask: int, bits: int) -> int:
    if rhs == 0:
        raise Trap("integer remainder by zero")
    magnitude = abs(lhs) % abs(rhs)
    return magnitude if lhs >= 0 else -magnitude


_BINOPS = {
    "add": lambda a, b, m, w: _wrap(a + b, m),
    "sub": lambda a, b, m, w: _wrap(a - b, m),
    "mul": lambda a, b, m, w: _wrap(a * b, m),
    "div_s": _div_s,
    "rem_s": _rem_s,
    "and": lambda a, b, m, w: _wrap(a & b, m),
    "or": lambda a, b, m, w: _wrap(a | b, m),
    "xor": lambda a, b, m, w: _wrap(a ^ b, m),
    "shl": lambda a, b, m, w: _wrap(a << (b % w), m),
    "shr_s": lambda a, b, m, w: a >> (b % w),
}

_COMPARES = {
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "lt_s": lambda a, b: a < b,
    "gt_s": lambda a, b: a > b,
    "le_s": lambda a, b: a <= b,
    "ge_s": lambda a, b: a >= b,
}


def execute(module: FlatModule, step_limit: int = 10_000_000) -> OpcodeTrace:
    """Run a module to completion, trap, or step limit."""
    return Interpreter(module).run(step_limit)
