"""Fingerprint database construction from marker-instrumented runs.

During profiling the analyst controls the interpreter, so each dispatch tail
additionally writes to a dedicated marker page.  Marker writes delimit one
region per retired opcode; stripping the marker events and cutting at
dispatch-table reads yields slices shaped exactly like the segments the
attack phase recovers, so fingerprints and observations compare one-to-one.
"""

from dataclasses import dataclass

from .machine import SideChannelTrace, StepEvent
from .preprocess import Segment, segment_trace

__all__ = [
    "ProfilingError",
    "Fingerprint",
    "FingerprintDb",
    "split_by_marker",
    "dedup_fingerprints",
    "build_fingerprint_db",
]


class ProfilingError(ValueError):
    """Marker stream and dispatch stream disagree."""


@dataclass(frozen=True)
class Fingerprint:
    """Channel vectors for one opcode (or one unlabeled dispatch slice).

    label None marks slices produced by mid-handler dispatch-table reads;
    they carry no retired opcode.  support counts how many raw slices were
    merged into this entry; latency holds their element-wise means.
    """

    label: str | None
    modes: str
    classes: str
    pf: tuple[int, ...]
    latency: tuple[float, ...]
    support: int

    def __len__(self) -> int:
        return len(self.modes)


@dataclass(frozen=True)
class FingerprintDb:
    entries: tuple[Fingerprint, ...]
    meta: dict[str, str]

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> set[str | None]:
        return {fp.label for fp in self.entries}


def split_by_marker(
    trace: SideChannelTrace,
    marker_page: int,
    optable_page: int,
    stack_pages: frozenset[int] = frozenset(),
) -> list[tuple[str | None, Segment]]:
    """Cut a marker-instrumented trace into labeled per-opcode slices.

    Marker writes only validate the stream (one per retired opcode); the
    actual cuts happen at dispatch-table reads after the marker events are
    stripped, matching the attack-side segmentation geometry.
    """
    if trace.truth is None:
        raise ProfilingError("profiling trace carries no ground-truth labels")
    events = trace.events
    marker_count = sum(
        1 for ev in events if ev.page == marker_page and ev.mode == "W"
    )
    if marker_count == 0:
        raise ProfilingError("trace has no marker writes; synthesized without markers?")
    labeled = sum(1 for _, label in trace.truth if label is not None)
    if marker_count != labeled:
        raise ProfilingError(
            f"{marker_count} marker writes but {labeled} labeled dispatches"
        )

    stripped: list[StepEvent] = []
    index_map: dict[int, int] = {}
    for i, ev in enumerate(events):
        if ev.page == marker_page:
            continue
        index_map[i] = len(stripped)
        stripped.append(ev)
    label_at = {index_map[i]: label for i, label in trace.truth if i in index_map}

    segments = segment_trace(
        SideChannelTrace(events=stripped, truth=None, layout_seed=trace.layout_seed),
        optable_page,
        stack_pages,
    )
    out: list[tuple[str | None, Segment]] = []
    for seg in segments:
        if seg.start_index not in label_at:
            raise ProfilingError(
                f"dispatch at event {seg.start_index} has no ground-truth label"
            )
        out.append((label_at[seg.start_index], seg))
    return out


def dedup_fingerprints(
    labeled_segments: list[tuple[str | None, Segment]],
) -> list[Fingerprint]:
    """Merge slices that agree on label and every discrete channel.

    Latency, the only noisy channel, is averaged element-wise across the
    merged slices.  Entries come out sorted for stable serialization.
    """
    groups: dict[tuple, list[Segment]] = {}
    for label, seg in labeled_segments:
        groups.setdefault((label, seg.modes, seg.classes, seg.pf), []).append(seg)

    entries = []
    for (label, modes, classes, pf), segs in groups.items():
        n = len(segs)
        latency = tuple(
            sum(seg.latency[i] for seg in segs) / n for i in range(len(pf))
        )
        entries.append(
            Fingerprint(
                label=label,
                modes=modes,
                classes=classes,
                pf=pf,
                latency=latency,
                support=n,
            )
        )
    entries.sort(
        key=lambda fp: (fp.label is None, fp.label or "", fp.modes, fp.classes, fp.pf)
    )
    return entries


def build_fingerprint_db(
    trace: SideChannelTrace,
    marker_page: int,
    optable_page: int,
    stack_pages: frozenset[int] = frozenset(),
    meta: dict[str, str] | None = None,
    max_slice_len: int = 64,
) -> FingerprintDb:
    """Profile a marker-instrumented run into a deduplicated database.

    No handler expands to anywhere near max_slice_len native steps, so any
    longer slice means the run was preempted mid-dispatch; such slices are
    discarded rather than stored as nonsense fingerprints.
    """
    labeled = split_by_marker(trace, marker_page, optable_page, stack_pages)
    labeled = [(label, seg) for label, seg in labeled if len(seg) <= max_slice_len]
    if not labeled:
        raise ProfilingError("every profiling slice exceeded max_slice_len")
    return FingerprintDb(
        entries=tuple(dedup_fingerprints(labeled)),
        meta=dict(meta or {}),
    )
