"""Default handler templates and compile-time mitigations.

Templates model a threaded dispatch loop compiled at a fixed optimization
level: every handler ends with the shared dispatch tail (bytecode fetch,
optable lookup, indirect branch).  Body shapes differ per operation family;
families whose handlers compile to identical memory-access shapes (e.g. the
bitwise group) are told apart only by per-step latency offsets, which is what
keeps recovery imperfect under measurement jitter.

Width variants share one template: an i64.add handler is byte-for-byte the
same shape as i32.add, which is exactly why evaluation groups families.
"""

from dataclasses import replace

import numpy as np

from .machine import (
    HandlerSpec,
    MitigationConfig,
    NativeStep,
    PageClass,
    StackRole,
    StepKind,
)
from .opcodes import OpcodeId, all_opcodes

__all__ = ["default_handler_specs", "apply_mitigation", "BASE_LATENCY"]

BASE_LATENCY = {
    StepKind.REG_OP: 5280,
    StepKind.LOAD: 5540,
    StepKind.STORE: 5400,
    StepKind.EXEC_BRANCH: 5309,
}

_PF_EXEC = 5
_PF_READ = {
    PageClass.STACK: 7,
    PageClass.LINEAR_MEM: 7,
    PageClass.BYTECODE: 8,
    PageClass.OPTABLE: 8,
}
_PF_WRITE = 9


def _reg(dlat: int = 0) -> NativeStep:
    return NativeStep(StepKind.REG_OP, base_latency=BASE_LATENCY[StepKind.REG_OP] + dlat, pf_count=_PF_EXEC)


def _branch(dlat: int = 0) -> NativeStep:
    return NativeStep(
        StepKind.EXEC_BRANCH, base_latency=BASE_LATENCY[StepKind.EXEC_BRANCH] + dlat, pf_count=_PF_EXEC
    )


def _load(cls: PageClass, role: StackRole | None = None, dlat: int = 0) -> NativeStep:
    return NativeStep(
        StepKind.LOAD,
        target_class=cls,
        stack_role=role,
        base_latency=BASE_LATENCY[StepKind.LOAD] + dlat,
        pf_count=_PF_READ[cls],
    )


def _store(cls: PageClass, role: StackRole | None = None, dlat: int = 0) -> NativeStep:
    return NativeStep(
        StepKind.STORE,
        target_class=cls,
        stack_role=role,
        base_latency=BASE_LATENCY[StepKind.STORE] + dlat,
        pf_count=_PF_WRITE,
    )


def _pop_op(dlat: int = 0) -> NativeStep:
    return _load(PageClass.STACK, StackRole.OPERAND, dlat)


def _push_op(dlat: int = 0) -> NativeStep:
    return _store(PageClass.STACK, StackRole.OPERAND, dlat)


_TAIL = (_load(PageClass.BYTECODE), _load(PageClass.OPTABLE), _branch())


def _binop_body(write_dlat: int, extra_regs: int = 1) -> list[NativeStep]:
    """pop one operand, combine in place with the stack top (read-modify-write)."""
    body = [_reg(), _reg(), _pop_op()]
    body += [_reg() for _ in range(extra_regs)]
    body.append(_push_op(dlat=write_dlat))
    return body


def _family_bodies() -> dict[str, tuple[list[NativeStep], int]]:
    """family -> (body steps, extra optable accesses)."""
    mem_r = _load(PageClass.LINEAR_MEM)
    mem_w = _store(PageClass.LINEAR_MEM)
    frame_r = _load(PageClass.STACK, StackRole.FRAME)
    frame_w = _store(PageClass.STACK, StackRole.FRAME)
    imm_r = _load(PageClass.BYTECODE)

    bodies: dict[str, tuple[list[NativeStep], int]] = {
        "nop": ([_reg()], 0),
        "drop": ([_reg(), _pop_op(), _reg()], 0),
        "const": ([_reg(), imm_r, _push_op()], 0),
        # Same shape, latency-separated: add/sub (slow RMW ALU step) and the
        # shift pair live a structural twin apart from each other.
        "add": (_binop_body(881), 0),
        "sub": (_binop_body(941), 0),
        "shl": (_binop_body(100), 0),
        "shr_s": (_binop_body(150), 0),
        # Bitwise trio: one fewer register op, only latency splits the three.
        "and": ([_reg(), _pop_op(), _push_op(0)], 0),
        "or": ([_reg(), _pop_op(), _push_op(30)], 0),
        "xor": ([_reg(), _pop_op(), _push_op(60)], 0),
        "mul": ([_reg(), _reg(), _pop_op(), _reg(), _reg(dlat=320), _push_op()], 0),
        "div_s": ([_reg(), _reg(), _pop_op(), _branch(), _reg(), _reg(dlat=650), _push_op(200)], 0),
        "rem_s": (
            [_reg(), _reg(), _pop_op(), _branch(), _reg(), _reg(dlat=650), _reg(), _push_op(200)],
            0,
        ),
        "eq": ([_reg(), _reg(), _pop_op(), _reg(), _reg(), _reg(), _push_op(0)], 0),
        "ne": ([_reg(), _reg(), _pop_op(), _reg(), _reg(), _reg(), _push_op(30)], 0),
        "lt_s": ([_reg(), _reg(), _pop_op(), _reg(), _reg(), _reg(), _reg(), _push_op(0)], 0),
        "gt_s": ([_reg(), _reg(), _pop_op(), _reg(), _reg(), _reg(), _reg(), _push_op(35)], 0),
        "le_s": ([_reg(), _reg(), _pop_op(), _reg(), _reg(), _reg(), _reg(), _push_op(70)], 0),
        "ge_s": ([_reg(), _reg(), _pop_op(), _reg(), _reg(), _reg(), _reg(), _push_op(105)], 0),
        "eqz": ([_reg(), _pop_op(), _reg(), _reg(), _push_op()], 0),
        "load": ([_reg(), _pop_op(), _reg(), _branch(), mem_r, _push_op()], 0),
        "store": ([_reg(), _pop_op(), _pop_op(), _reg(), mem_w], 0),
        "local.get": ([_reg(), imm_r, frame_r, _push_op()], 0),
        "local.set": ([_reg(), imm_r, _pop_op(), _reg(), frame_w], 0),
        "local.tee": ([_reg(), imm_r, _reg(), _pop_op(), _reg(), frame_w], 0),
        "global.get": ([_reg(), imm_r, _load(PageClass.LINEAR_MEM, dlat=45), _push_op()], 0),
        "global.set": (
            [_reg(), imm_r, _pop_op(), _reg(), _reg(), _reg(), _store(PageClass.LINEAR_MEM, dlat=60)],
            0,
        ),
        "select": ([_reg(), _pop_op(), _reg(), _pop_op(), _pop_op(), _reg(), _push_op()], 0),
        "block": ([_reg(), imm_r, _reg(), frame_w], 0),
        "loop": ([_reg(), imm_r, _reg(), _reg(), frame_w], 0),
        "if": ([_reg(), imm_r, _pop_op(), _reg(), _branch(), frame_w], 0),
        "else": ([_reg(), _reg(), _branch()], 0),
        "end": ([_reg(), frame_r, _reg(), _reg()], 0),
        "br": ([_reg(), imm_r, _reg(), _branch()], 0),
        "br_if": ([_reg(), imm_r, _pop_op(), _reg(), _branch(), _reg()], 0),
        "call": ([_reg(), imm_r, _reg(), _load(PageClass.OPTABLE), _reg(), frame_w], 1),
        "return": ([_reg(), frame_r, _reg(), _reg(), _branch()], 0),
        "memory.grow": (
            [_reg(), _pop_op(), _reg(), _load(PageClass.OPTABLE), _reg(), _reg(), mem_w, _push_op()],
            1,
        ),
    }
    return bodies


def default_handler_specs() -> dict[OpcodeId, HandlerSpec]:
    """Handler templates for every supported opcode."""
    bodies = _family_bodies()
    specs: dict[OpcodeId, HandlerSpec] = {}
    for op in all_opcodes():
        body, extra = bodies[op.family]
        specs[op] = HandlerSpec(
            opcode=op, steps=tuple(body) + _TAIL, extra_optable_accesses=extra
        )
    return specs


def _insert_nops(spec: HandlerSpec, rng, prob: float, forced: int = 0) -> HandlerSpec:
    """Insert nop register steps at random body slots, ahead of the tail."""
    body = list(spec.body)
    slots = len(body) + 1  # before each body step and right before the tail
    inserted_at = [i for i in range(slots) if rng.random() < prob]
    while len(inserted_at) < forced:
        inserted_at.append(int(rng.integers(0, slots)))
    for slot in sorted(inserted_at, reverse=True):
        body.insert(slot, _reg())
    return replace(spec, steps=tuple(body) + spec.tail)


def apply_mitigation(
    specs: dict[OpcodeId, HandlerSpec],
    mitigation: MitigationConfig,
    seed: int,
) -> dict[OpcodeId, HandlerSpec | tuple[HandlerSpec, ...]]:
    """Rewrite handler templates the way a hardened build would.

    nop_insertion_prob pads handler bodies with dummy register steps;
    variant_count > 1 yields several equivalent templates per opcode, one of
    which is drawn at each execution.  Handler-page shuffling is a layout
    transform (see machine.shuffle_handler_pages) and is not applied here.
    """
    rng = np.random.default_rng(seed)
    out: dict[OpcodeId, HandlerSpec | tuple[HandlerSpec, ...]] = {}
    for op in sorted(specs, key=lambda o: o.mnemonic):
        spec = specs[op]
        if mitigation.variant_count == 1:
            out[op] = (
                _insert_nops(spec, rng, mitigation.nop_insertion_prob)
                if mitigation.nop_insertion_prob > 0
                else spec
            )
            continue
        variants = []
        for v in range(mitigation.variant_count):
            variant = spec
            if mitigation.nop_insertion_prob > 0:
                variant = _insert_nops(variant, rng, mitigation.nop_insertion_prob)
            if v > 0:
                # Equivalent recodings differ by a bit of register padding.
                variant = _insert_nops(variant, rng, 0.0, forced=1 + v % 2)
            variants.append(variant)
        out[op] = tuple(variants)
    return out
