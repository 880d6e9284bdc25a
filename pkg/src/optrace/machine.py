"""Machine model: turns an opcode trace into a single-step side-channel trace.

Every retired native instruction of the interpreter becomes one StepEvent
carrying the page it touched, the access mode (R/W/E), a page-fault count and
a latency.  Instructions with a data access report that access; pure register
and branch instructions report an execute fault on their code page.  Branch
events are attributed to the branch-target page, which is what makes the
read-then-execute dispatch pattern visible downstream.

Per handler the emission order is: body steps, then the shared dispatch tail
(bytecode read, optable read, dispatch branch).  The optable read of a tail
fetches the *next* opcode, so truth labels attach there.  A dispatch prologue
is emitted before the first opcode and the final handler stops before its
tail (the interpreter exits instead of dispatching).
"""

import enum
from dataclasses import dataclass, replace

import numpy as np

from .bytecode import OpcodeTrace
from .opcodes import OpcodeId, all_opcodes, opcode_info

__all__ = [
    "PageClass",
    "StepKind",
    "StackRole",
    "MemoryLayout",
    "LayoutConfig",
    "NativeStep",
    "HandlerSpec",
    "NoiseModel",
    "StepEvent",
    "SideChannelTrace",
    "MitigationConfig",
    "SynthesisError",
    "build_layout",
    "classify_page",
    "shuffle_handler_pages",
    "synthesize_trace",
]

PAGE_SIZE = 4096

# Operand-stack slots per page; depth beyond this spills to the next page.
_SLOTS_PER_PAGE = 512


class PageClass(enum.Enum):
    OPTABLE = "OPTABLE"
    STACK = "STACK"
    HANDLER_CODE = "HANDLER_CODE"
    BYTECODE = "BYTECODE"
    MARKER = "MARKER"
    LINEAR_MEM = "LINEAR_MEM"
    OTHER = "OTHER"


class StepKind(enum.Enum):
    REG_OP = "REG_OP"
    LOAD = "LOAD"
    STORE = "STORE"
    EXEC_BRANCH = "EXEC_BRANCH"


class StackRole(enum.Enum):
    """Which part of the interpreter stack region a STACK access targets."""

    OPERAND = "OPERAND"
    FRAME = "FRAME"


class SynthesisError(ValueError):
    """Inconsistent synthesis inputs (e.g. opcode without a handler spec)."""


@dataclass(frozen=True, slots=True)
class NativeStep:
    kind: StepKind
    target_class: PageClass | None = None
    stack_role: StackRole | None = None
    base_latency: int = 0
    pf_count: int = 1

    def __post_init__(self):
        data = self.kind in (StepKind.LOAD, StepKind.STORE)
        if data and self.target_class is None:
            raise ValueError("LOAD/STORE steps need a target class")
        if not data and self.target_class is not None:
            raise ValueError("only LOAD/STORE steps carry a target class")
        if self.base_latency <= 0:
            raise ValueError("base latency must be positive")
        if self.pf_count < 1:
            raise ValueError("pf_count must be >= 1")


@dataclass(frozen=True)
class HandlerSpec:
    """Native-step template for one opcode's interpreter handler."""

    opcode: OpcodeId
    steps: tuple[NativeStep, ...]
    extra_optable_accesses: int = 0

    def __post_init__(self):
        if len(self.steps) < 3:
            raise ValueError("handler needs at least the dispatch tail")
        tail = self.steps[-3:]
        ok = (
            tail[0].kind is StepKind.LOAD
            and tail[0].target_class is PageClass.BYTECODE
            and tail[1].kind is StepKind.LOAD
            and tail[1].target_class is PageClass.OPTABLE
            and tail[2].kind is StepKind.EXEC_BRANCH
        )
        if not ok:
            raise ValueError(f"{self.opcode.mnemonic}: handler must end with the dispatch tail")
        optable_loads = sum(
            1 for s in self.steps if s.kind is StepKind.LOAD and s.target_class is PageClass.OPTABLE
        )
        if optable_loads != 1 + self.extra_optable_accesses:
            raise ValueError(
                f"{self.opcode.mnemonic}: optable loads ({optable_loads}) must equal "
                f"1 + extra_optable_accesses ({self.extra_optable_accesses})"
            )
        info = opcode_info(self.opcode)
        operand_loads = sum(
            1
            for s in self.steps
            if s.kind is StepKind.LOAD
            and s.target_class is PageClass.STACK
            and s.stack_role is StackRole.OPERAND
        )
        operand_stores = sum(
            1
            for s in self.steps
            if s.kind is StepKind.STORE
            and s.target_class is PageClass.STACK
            and s.stack_role is StackRole.OPERAND
        )
        if operand_loads > info.pops or operand_stores > info.pushes:
            raise ValueError(
                f"{self.opcode.mnemonic}: operand-stack accesses exceed pop/push arity"
            )

    @property
    def body(self) -> tuple[NativeStep, ...]:
        return self.steps[:-3]

    @property
    def tail(self) -> tuple[NativeStep, ...]:
        return self.steps[-3:]


@dataclass(frozen=True)
class LayoutConfig:
    stack_pages: int = 2
    bytecode_pages: int = 2
    linear_pages: int = 2
    span: int = 1 << 20  # page-frame numbers are drawn from [0, span)

    def __post_init__(self):
        if min(self.stack_pages, self.bytecode_pages, self.linear_pages) < 1:
            raise ValueError("page counts must be >= 1")


@dataclass(frozen=True)
class MemoryLayout:
    page_size: int
    optable_page: int
    handler_pages: dict[OpcodeId, int]
    stack_pages: tuple[int, ...]
    bytecode_pages: tuple[int, ...]
    marker_page: int
    linear_mem_pages: tuple[int, ...]
    seed: int

    def all_pages(self) -> frozenset[int]:
        return frozenset(
            [self.optable_page, self.marker_page]
            + list(self.handler_pages.values())
            + list(self.stack_pages)
            + list(self.bytecode_pages)
            + list(self.linear_mem_pages)
        )


def build_layout(seed: int, config: LayoutConfig | None = None) -> MemoryLayout:
    """Deterministically place every interpreter region on distinct frames."""
    config = config or LayoutConfig()
    opcodes = all_opcodes()
    needed = 2 + len(opcodes) + config.stack_pages + config.bytecode_pages + config.linear_pages
    if needed > config.span:
        raise ValueError(f"layout needs {needed} frames but span is {config.span}")
    rng = np.random.default_rng(seed)
    frames = [int(f) for f in rng.choice(config.span, size=needed, replace=False)]
    it = iter(frames)
    optable = next(it)
    marker = next(it)
    stacks = tuple(next(it) for _ in range(config.stack_pages))
    bytecodes = tuple(next(it) for _ in range(config.bytecode_pages))
    linears = tuple(next(it) for _ in range(config.linear_pages))
    handlers = {op: next(it) for op in opcodes}
    return MemoryLayout(
        page_size=PAGE_SIZE,
        optable_page=optable,
        handler_pages=handlers,
        stack_pages=stacks,
        bytecode_pages=bytecodes,
        marker_page=marker,
        linear_mem_pages=linears,
        seed=seed,
    )


def classify_page(layout: MemoryLayout, page: int) -> PageClass:
    if page == layout.optable_page:
        return PageClass.OPTABLE
    if page == layout.marker_page:
        return PageClass.MARKER
    if page in layout.stack_pages:
        return PageClass.STACK
    if page in layout.bytecode_pages:
        return PageClass.BYTECODE
    if page in layout.linear_mem_pages:
        return PageClass.LINEAR_MEM
    if page in layout.handler_pages.values():
        return PageClass.HANDLER_CODE
    return PageClass.OTHER


def shuffle_handler_pages(layout: MemoryLayout, seed: int) -> MemoryLayout:
    """Permute the opcode -> handler-page assignment (deployment mitigation)."""
    rng = np.random.default_rng(seed)
    ops = sorted(layout.handler_pages, key=lambda o: o.mnemonic)
    pages = [layout.handler_pages[o] for o in ops]
    order = rng.permutation(len(pages))
    shuffled = {ops[i]: pages[int(order[i])] for i in range(len(ops))}
    return replace(layout, handler_pages=shuffled)


@dataclass(frozen=True)
class NoiseModel:
    """Measurement-noise parameters; all-zero means a perfectly clean trace."""

    latency_jitter_sigma: float = 60.0
    apic_quantum: int = 35
    ctx_switch_rate: float = 1953 / 10_000_000
    ctx_switch_extra_steps_mean: float = 2258.0
    multistep_prob: float = 10 / 2_810_963_156
    rng_seed: int = 0

    @classmethod
    def zero(cls, rng_seed: int = 0) -> "NoiseModel":
        return cls(0.0, 0, 0.0, 0.0, 0.0, rng_seed)


@dataclass(frozen=True, slots=True)
class StepEvent:
    page: int
    mode: str  # 'R' | 'W' | 'E'
    pf_count: int
    latency: int


@dataclass
class SideChannelTrace:
    events: list[StepEvent]
    truth: tuple[tuple[int, str | None], ...] | None
    layout_seed: int


@dataclass(frozen=True)
class MitigationConfig:
    nop_insertion_prob: float = 0.0
    shuffle_handlers: bool = False
    variant_count: int = 1

    def __post_init__(self):
        if not 0.0 <= self.nop_insertion_prob <= 1.0:
            raise ValueError("nop_insertion_prob must be in [0, 1]")
        if self.variant_count < 1:
            raise ValueError("variant_count must be >= 1")


_NO_LABEL = object()  # events that are not truth boundaries

SpecMap = dict  # OpcodeId -> HandlerSpec | tuple[HandlerSpec, ...]


class _Synth:
    """One synthesis run; bundles rng state and page resolution."""

    def __init__(self, layout: MemoryLayout, noise: NoiseModel, profiling_markers: bool):
        self.layout = layout
        self.noise = noise
        self.markers = profiling_markers
        self.rng = np.random.default_rng(noise.rng_seed)
        self.events: list[StepEvent] = []
        self.labels: list = []
        self.depth = 0  # replayed operand-stack depth
        self.linear_counter = 0
        self.bytecode_counter = 0
        # Foreign frames (co-tenant activity) live above every layout frame.
        self.foreign_base = max(layout.all_pages()) + 1

    # -- low-level emission --------------------------------------------------

    def latency(self, base: float) -> int:
        noise = self.noise
        x = float(base)
        if noise.latency_jitter_sigma > 0:
            x += self.rng.normal(0.0, noise.latency_jitter_sigma)
        if noise.apic_quantum > 0:
            q = noise.apic_quantum
            return max(q, q * int(round(x / q)))
        return max(1, int(round(x)))

    def emit(self, page: int, mode: str, pf: int, base_latency: float, label=_NO_LABEL) -> None:
        self.events.append(StepEvent(page, mode, pf, self.latency(base_latency)))
        self.labels.append(label)

    def maybe_burst(self) -> None:
        rate = self.noise.ctx_switch_rate
        if rate > 0 and self.rng.random() < rate:
            self._emit_burst()

    def _emit_burst(self) -> None:
        """Co-tenant preemption: a run of foreign-page events.

        Modeled as mostly straight-line execution over a tiny working set
        with occasional data touches, so the burst rarely fakes the
        read-then-execute dispatch pattern.
        """
        rng = self.rng
        mean = max(self.noise.ctx_switch_extra_steps_mean, 1.0)
        length = int(rng.geometric(1.0 / mean))
        pool = rng.integers(0, 4096, size=6)
        code = [self.foreign_base + int(p) for p in pool[:3]]
        data = [self.foreign_base + 4096 + int(p) for p in pool[3:]]
        current = code[0]
        for _ in range(length):
            u = rng.random()
            if u < 0.04:
                current = code[int(rng.integers(0, len(code)))]
                self.emit(current, "E", 5, 5280)
            elif u < 0.10:
                self.emit(data[int(rng.integers(0, len(data)))], "R", 7, 5540)
            elif u < 0.16:
                self.emit(data[int(rng.integers(0, len(data)))], "W", 9, 5400)
            else:
                self.emit(current, "E", 5, 5280)

    # -- page resolution -----------------------------------------------------

    def data_page(self, step: NativeStep) -> int:
        layout = self.layout
        cls = step.target_class
        if cls is PageClass.OPTABLE:
            return layout.optable_page
        if cls is PageClass.STACK:
            if step.stack_role is StackRole.FRAME or len(layout.stack_pages) == 1:
                return layout.stack_pages[0]
            index = 1 + self.depth // _SLOTS_PER_PAGE
            return layout.stack_pages[min(index, len(layout.stack_pages) - 1)]
        if cls is PageClass.BYTECODE:
            index = (self.bytecode_counter // 4096) % len(layout.bytecode_pages)
            return layout.bytecode_pages[index]
        if cls is PageClass.LINEAR_MEM:
            page = layout.linear_mem_pages[self.linear_counter % len(layout.linear_mem_pages)]
            self.linear_counter += 1
            return page
        raise SynthesisError(f"unexpected data class {cls}")

    # -- structured emission ---------------------------------------------------

    def emit_body(self, spec: HandlerSpec, handler_page: int) -> None:
        for step in spec.body:
            self.maybe_burst()
            if step.kind in (StepKind.REG_OP, StepKind.EXEC_BRANCH):
                # In-handler branches land on the handler's own page.
                self.emit(handler_page, "E", step.pf_count, step.base_latency)
            elif step.kind is StepKind.LOAD:
                label = None if step.target_class is PageClass.OPTABLE else _NO_LABEL
                self.emit(self.data_page(step), "R", step.pf_count, step.base_latency, label)
            else:
                self.emit(self.data_page(step), "W", step.pf_count, step.base_latency)

    def emit_tail(self, tail: tuple[NativeStep, ...], dispatched: OpcodeId) -> None:
        """Dispatch of `dispatched`: bytecode fetch, optable read, branch."""
        fetch, lookup, branch = tail
        self.maybe_burst()
        self.emit(self.data_page(fetch), "R", fetch.pf_count, fetch.base_latency)
        self.bytecode_counter += 1
        if self.markers:
            self.maybe_burst()
            self.emit(self.layout.marker_page, "W", 9, 5400)
        self.maybe_burst()
        self.emit(
            self.layout.optable_page,
            "R",
            lookup.pf_count,
            lookup.base_latency,
            label=dispatched.mnemonic,
        )
        self.maybe_burst()
        target = self.layout.handler_pages[dispatched]
        self.emit(target, "E", branch.pf_count, branch.base_latency)


def _variants_of(specs: SpecMap, op: OpcodeId) -> tuple[HandlerSpec, ...]:
    entry = specs[op]
    if isinstance(entry, HandlerSpec):
        return (entry,)
    return tuple(entry)


def synthesize_trace(
    trace: OpcodeTrace,
    layout: MemoryLayout,
    specs: SpecMap,
    noise: NoiseModel,
    profiling_markers: bool = False,
) -> SideChannelTrace:
    """Expand retired opcodes into per-instruction StepEvents plus truth.

    Truth records one (event index, label) pair per optable read: the opcode
    it dispatches, or NULL (None) for the extra optable touches of handlers
    like call and memory.grow.
    """
    ops = trace.executed
    missing = {op.mnemonic for op in ops if op not in specs}
    if missing:
        raise SynthesisError(f"no handler spec for: {', '.join(sorted(missing))}")

    synth = _Synth(layout, noise, profiling_markers)
    if ops:
        first_variants = _variants_of(specs, ops[0])
        synth.emit_tail(first_variants[0].tail, dispatched=ops[0])
        for i, op in enumerate(ops):
            variants = _variants_of(specs, op)
            if len(variants) == 1:
                spec = variants[0]
            else:
                spec = variants[int(synth.rng.integers(0, len(variants)))]
            synth.emit_body(spec, layout.handler_pages[op])
            if i + 1 < len(ops):
                synth.emit_tail(spec.tail, dispatched=ops[i + 1])
            info = opcode_info(op)
            synth.depth = max(synth.depth - info.pops, 0) + info.pushes

    events, labels = synth.events, synth.labels
    if noise.multistep_prob > 0:
        events, labels = _merge_multisteps(synth.rng, noise.multistep_prob, events, labels)

    truth = tuple(
        (i, label) for i, label in enumerate(labels) if label is not _NO_LABEL
    )
    return SideChannelTrace(events=events, truth=truth, layout_seed=layout.seed)


def _merge_multisteps(rng, prob: float, events: list[StepEvent], labels: list):
    """Occasionally two native steps retire under one observation."""
    merged_events: list[StepEvent] = []
    merged_labels: list = []
    i = 0
    while i < len(events):
        if i + 1 < len(events) and rng.random() < prob:
            a, b = events[i], events[i + 1]
            merged_events.append(
                StepEvent(a.page, a.mode, a.pf_count + b.pf_count, a.latency + b.latency)
            )
            merged_labels.append(labels[i])  # the absorbed event's label is lost
            i += 2
        else:
            merged_events.append(events[i])
            merged_labels.append(labels[i])
            i += 1
    return merged_events, merged_labels
