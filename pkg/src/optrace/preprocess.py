"""Trace preprocessing: locate interpreter structures, clean, and segment.

Works purely on the observable channel (page, mode, pf, latency); layout
ground truth is never consulted.  The dispatch table page shows up as the
page whose reads are followed by execution on a fresh code page; the stack
region is whatever pages are both read and written often enough to cover the
regions between dispatches.
"""

from collections import Counter
from dataclasses import dataclass

from .machine import SideChannelTrace, StepEvent

__all__ = [
    "DetectionError",
    "SegmentationError",
    "PreprocessReport",
    "Segment",
    "detect_optable_page",
    "detect_stack_pages",
    "filter_redundant",
    "segment_trace",
    "preprocess_trace",
]

DEFAULT_COVERAGE_TARGET = 0.95
DEFAULT_WINDOW = 16
DEFAULT_MIN_RW_FRAC = 0.005


class DetectionError(ValueError):
    """The trace does not exhibit the structure being looked for."""


class SegmentationError(ValueError):
    """Trace cannot be split into per-opcode segments."""


@dataclass(frozen=True)
class PreprocessReport:
    optable_page: int
    optable_confidence: float
    stack_pages: frozenset[int]
    events_removed: int


@dataclass(frozen=True)
class Segment:
    """One inter-dispatch slice of the trace plus its channel vectors.

    Page classes collapse to O (optable), S (stack), X (everything else):
    which handler page ran is deliberately not used.
    """

    events: tuple[StepEvent, ...]
    start_index: int
    modes: str
    classes: str
    pf: tuple[int, ...]
    latency: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.events)


def detect_optable_page(trace: SideChannelTrace) -> tuple[int, float]:
    """Find the dispatch-table page via the read-then-execute pattern.

    A qualifying pair is a read immediately followed by an execute event on a
    page different from the previously executing one, i.e. a read that
    redirected control.  Returns (page, confidence); confidence is the
    winning page's share of all qualifying pairs.
    """
    events = trace.events
    counts: Counter[int] = Counter()
    last_exec_page: int | None = None
    for i in range(len(events) - 1):
        cur, nxt = events[i], events[i + 1]
        if (
            cur.mode == "R"
            and nxt.mode == "E"
            and (last_exec_page is None or nxt.page != last_exec_page)
        ):
            counts[cur.page] += 1
        if cur.mode == "E":
            last_exec_page = cur.page
    if not counts:
        raise DetectionError("no read-then-execute pairs in trace")
    total = sum(counts.values())
    page, hits = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return page, hits / total


def _dispatch_regions(events: list[StepEvent], optable_page: int) -> list[tuple[int, int]]:
    """Half-open [start, end) spans between consecutive optable reads."""
    boundaries = [
        i for i, ev in enumerate(events) if ev.mode == "R" and ev.page == optable_page
    ]
    regions = []
    for j, start in enumerate(boundaries):
        end = boundaries[j + 1] if j + 1 < len(boundaries) else len(events)
        regions.append((start, end))
    return regions


def detect_stack_pages(
    trace: SideChannelTrace,
    optable_page: int,
    coverage_target: float = DEFAULT_COVERAGE_TARGET,
    min_rw_frac: float = DEFAULT_MIN_RW_FRAC,
) -> frozenset[int]:
    """Pick the interpreter-stack pages: read+written often, covering regions.

    Candidates (pages with enough reads AND writes, spread over enough
    distinct inter-dispatch regions) are ranked by min(reads, writes) and
    added in rank order until at least coverage_target of the regions
    contain an access to the chosen set, or candidates run out.  The
    spread requirement keeps one long preemption burst — heavy traffic
    confined to a single region — out of the candidate pool.
    """
    events = trace.events
    regions = _dispatch_regions(events, optable_page)
    if not regions:
        return frozenset()
    reads: Counter[int] = Counter()
    writes: Counter[int] = Counter()
    for ev in events:
        if ev.page == optable_page:
            continue
        if ev.mode == "R":
            reads[ev.page] += 1
        elif ev.mode == "W":
            writes[ev.page] += 1

    # Per-region page sets restricted to data accesses, for coverage counting.
    region_pages: list[set[int]] = []
    spread: Counter[int] = Counter()
    for start, end in regions:
        touched = {ev.page for ev in events[start:end] if ev.mode in ("R", "W")}
        region_pages.append(touched)
        spread.update(touched)

    threshold = max(2, int(min_rw_frac * len(regions)))
    candidates = [
        page
        for page in reads.keys() & writes.keys()
        if min(reads[page], writes[page]) >= threshold and spread[page] >= threshold
    ]
    candidates.sort(key=lambda p: (-min(reads[p], writes[p]), p))

    chosen: set[int] = set()
    covered = 0
    for page in candidates:
        if covered / len(regions) >= coverage_target:
            break
        chosen.add(page)
        covered = sum(1 for touched in region_pages if touched & chosen)
    return frozenset(chosen)


def filter_redundant(
    trace: SideChannelTrace,
    optable_page: int,
    stack_pages: frozenset[int] = frozenset(),
    window: int = DEFAULT_WINDOW,
) -> tuple[SideChannelTrace, int]:
    """Drop events on pages that never appear near a dispatch boundary.

    Keeps every event whose page shows up within +-window events of some
    optable read (plus the detected interpreter pages themselves); long
    co-tenant bursts disappear while opcode-region events survive.  Truth
    boundary indices are remapped.  Returns (filtered trace, removed count).
    """
    events = trace.events
    if not events:
        return SideChannelTrace(events=[], truth=trace.truth, layout_seed=trace.layout_seed), 0
    keep_pages: set[int] = {optable_page} | set(stack_pages)
    n = len(events)
    for i, ev in enumerate(events):
        if ev.mode == "R" and ev.page == optable_page:
            lo, hi = max(0, i - window), min(n, i + window + 1)
            keep_pages.update(events[j].page for j in range(lo, hi))

    kept: list[StepEvent] = []
    index_map: dict[int, int] = {}
    removed = 0
    for i, ev in enumerate(events):
        if ev.page in keep_pages:
            index_map[i] = len(kept)
            kept.append(ev)
        else:
            removed += 1

    truth = trace.truth
    if truth is not None:
        remapped = []
        for idx, label in truth:
            if idx in index_map:
                remapped.append((index_map[idx], label))
        truth = tuple(remapped)
    return SideChannelTrace(events=kept, truth=truth, layout_seed=trace.layout_seed), removed


def _classify(page: int, optable_page: int, stack_pages: frozenset[int]) -> str:
    if page == optable_page:
        return "O"
    if page in stack_pages:
        return "S"
    return "X"


def _make_segment(
    events: list[StepEvent],
    start: int,
    end: int,
    optable_page: int,
    stack_pages: frozenset[int],
) -> Segment:
    chunk = tuple(events[start:end])
    return Segment(
        events=chunk,
        start_index=start,
        modes="".join(ev.mode for ev in chunk),
        classes="".join(_classify(ev.page, optable_page, stack_pages) for ev in chunk),
        pf=tuple(ev.pf_count for ev in chunk),
        latency=tuple(ev.latency for ev in chunk),
    )


def segment_trace(
    trace: SideChannelTrace,
    optable_page: int,
    stack_pages: frozenset[int] = frozenset(),
) -> list[Segment]:
    """Split at optable reads; each segment covers one dispatched opcode.

    Events before the first boundary (the partial first dispatch) are
    discarded.  The final segment runs to the end of the trace.
    """
    events = trace.events
    regions = _dispatch_regions(events, optable_page)
    if len(regions) < 2:
        raise SegmentationError("need at least 2 dispatch boundaries to segment")
    return [
        _make_segment(events, start, end, optable_page, stack_pages)
        for start, end in regions
    ]


def preprocess_trace(
    trace: SideChannelTrace,
    coverage_target: float = DEFAULT_COVERAGE_TARGET,
    window: int = DEFAULT_WINDOW,
    min_rw_frac: float = DEFAULT_MIN_RW_FRAC,
) -> tuple[PreprocessReport, SideChannelTrace, list[Segment]]:
    """Full pipeline: detect structures, filter noise, segment."""
    optable_page, confidence = detect_optable_page(trace)
    stack_pages = detect_stack_pages(
        trace, optable_page, coverage_target=coverage_target, min_rw_frac=min_rw_frac
    )
    filtered, removed = filter_redundant(trace, optable_page, stack_pages, window=window)
    segments = segment_trace(filtered, optable_page, stack_pages)
    report = PreprocessReport(
        optable_page=optable_page,
        optable_confidence=confidence,
        stack_pages=stack_pages,
        events_removed=removed,
    )
    return report, filtered, segments
