"""Segment-vs-fingerprint scoring: channel scores, tie-breaks, bulk scorer."""

import random
import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optrace.matcher import (
    Channel,
    CompiledDb,
    MatchError,
    match_trace,
    pearson,
    score_discrete,
    score_numeric,
    score_segment,
)
from optrace.preprocess import Segment
from optrace.profiler import Fingerprint, FingerprintDb


def seg(modes, classes, pf, latency):
    assert len(modes) == len(classes) == len(pf) == len(latency)
    return Segment(
        events=tuple(range(len(modes))),
        start_index=0,
        modes=modes,
        classes=classes,
        pf=tuple(pf),
        latency=tuple(latency),
    )


def fp(label, modes, classes, pf, latency, support=1):
    assert len(modes) == len(classes) == len(pf) == len(latency)
    return Fingerprint(
        label=label,
        modes=modes,
        classes=classes,
        pf=tuple(pf),
        latency=tuple(float(v) for v in latency),
        support=support,
    )


def db(*fps):
    return FingerprintDb(entries=tuple(fps), meta={})


# ---------------------------------------------------------------- pearson


def test_pearson_matches_stdlib_on_random_vectors():
    rng = random.Random(1234)
    for _ in range(200):
        n = rng.randint(2, 12)
        x = [rng.uniform(-50, 50) for _ in range(n)]
        y = [rng.uniform(-50, 50) for _ in range(n)]
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert pearson(x, y) == pytest.approx(
            statistics.correlation(x, y), rel=1e-9, abs=1e-12
        )


def test_pearson_endpoints():
    assert pearson([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_pearson_rejects_bad_input():
    with pytest.raises(ValueError, match="length"):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(ValueError, match="2 points"):
        pearson([1], [2])
    with pytest.raises(ValueError, match="constant"):
        pearson([5, 5, 5], [1, 2, 3])


# --------------------------------------------------------- channel scores


def brute_discrete(a, b):
    m = min(len(a), len(b))
    mismatches = sum(a[i] != b[i] for i in range(m))
    return 1.0 / (1.0 + mismatches + abs(len(a) - len(b)))


def test_score_discrete_exhaustive_small_strings():
    alphabet = "RWE"
    strings = [""]
    for length in (1, 2, 3):
        pool = [""]
        for _ in range(length):
            pool = [s + c for s in pool for c in alphabet]
        strings.extend(pool)
    for a in strings:
        for b in strings:
            assert score_discrete(a, b) == pytest.approx(brute_discrete(a, b))


def test_score_discrete_examples():
    assert score_discrete("REE", "REEWR") == pytest.approx(1.0 / 3.0)
    assert score_discrete("", "") == 1.0
    assert score_discrete("RRR", "RRR") == 1.0
    assert score_discrete((8, 5, 5), (8, 5, 9)) == pytest.approx(0.5)


def test_score_numeric_prefix_correlation_scaled_by_length():
    a = tuple(range(1, 9))
    b = tuple(range(1, 7))
    # Perfect correlation over the 6-long prefix, scaled by 6/8.
    assert score_numeric(a, b) == pytest.approx(0.75)


def test_score_numeric_constant_rules():
    assert score_numeric((5, 5, 5), (5, 5)) == 1.0
    assert score_numeric((5, 5), (6, 6)) == 0.0
    assert score_numeric((5, 5, 5), (1, 2, 3)) == pytest.approx(0.25)
    assert score_numeric((1, 2, 3), (5, 5, 5, 5)) == pytest.approx(1.0 / 5.0)


def test_score_numeric_empty_vectors():
    assert score_numeric((), ()) == 1.0
    assert score_numeric((), (1,)) == 0.0


def test_score_numeric_clips_negative_correlation():
    assert score_numeric((1, 2, 3), (3, 2, 1)) == 0.0


def test_score_numeric_ignores_affine_latency_shifts():
    rng = random.Random(7)
    for _ in range(50):
        n = rng.randint(3, 8)
        a = [rng.randint(5000, 6000) for _ in range(n)]
        b = [rng.randint(5000, 6000) for _ in range(n)]
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        scaled = [3 * v + 17 for v in b]
        assert score_numeric(a, b) == pytest.approx(score_numeric(a, scaled))


def test_identical_segment_scores_one_on_every_channel():
    s = seg("REWR", "OXSX", (8, 5, 9, 8), (5548, 5309, 5409, 5540))
    twin = fp("x", s.modes, s.classes, s.pf, s.latency)
    assert score_segment(s, twin) == pytest.approx(1.0)
    for channel in Channel:
        assert score_segment(s, twin, frozenset({channel})) == pytest.approx(1.0)


# ------------------------------------------------- compiled db equivalence

LABELS = st.sampled_from(["i32.add", "i32.sub", "call", None])
MODE_CH = st.sampled_from("RWE")
CLASS_CH = st.sampled_from("OSX")


@st.composite
def channel_vectors(draw):
    n = draw(st.integers(min_value=1, max_value=4))
    modes = "".join(draw(st.lists(MODE_CH, min_size=n, max_size=n)))
    classes = "".join(draw(st.lists(CLASS_CH, min_size=n, max_size=n)))
    pf = tuple(draw(st.lists(st.integers(0, 9), min_size=n, max_size=n)))
    latency = tuple(
        draw(st.lists(st.integers(5000, 5010), min_size=n, max_size=n))
    )
    return modes, classes, pf, latency


@st.composite
def fingerprints(draw):
    modes, classes, pf, latency = draw(channel_vectors())
    return fp(
        draw(LABELS),
        modes,
        classes,
        pf,
        latency,
        support=draw(st.integers(1, 3)),
    )


@st.composite
def segments(draw):
    return seg(*draw(channel_vectors()))


CHANNEL_SETS = st.sets(
    st.sampled_from(list(Channel)), min_size=1, max_size=4
).map(frozenset)


@settings(max_examples=300, deadline=None)
@given(
    fps=st.lists(fingerprints(), min_size=1, max_size=8),
    segment=segments(),
    channels=CHANNEL_SETS,
)
def test_compiled_scores_match_scalar_scoring(fps, segment, channels):
    compiled = CompiledDb(db(*fps), channels)
    bulk = compiled.score_all(segment)
    for entry, got in zip(fps, bulk):
        want = score_segment(segment, entry, channels)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-12)
        assert 0.0 <= got <= 1.0 + 1e-12


@settings(max_examples=200, deadline=None)
@given(
    fps=st.lists(fingerprints(), min_size=1, max_size=8),
    segment=segments(),
    channels=CHANNEL_SETS,
)
def test_best_applies_the_documented_tie_break(fps, segment, channels):
    compiled = CompiledDb(db(*fps), channels)
    scores = compiled.score_all(segment)
    idx, top, margin = compiled.best(segment)
    assert top == pytest.approx(float(scores.max()))
    tied = [i for i, s in enumerate(scores) if s == scores.max()]
    want = min(
        tied,
        key=lambda i: (-fps[i].support, fps[i].label is None, fps[i].label or "", i),
    )
    assert idx == want
    ranked = sorted(scores, reverse=True)
    second = ranked[1] if len(ranked) > 1 else 0.0
    assert margin == pytest.approx(top - second)


@settings(max_examples=100, deadline=None)
@given(
    fps=st.lists(fingerprints(), min_size=1, max_size=6),
    segment=segments(),
)
def test_adding_channels_never_raises_a_score(fps, segment):
    full = CompiledDb(db(*fps), frozenset(Channel)).score_all(segment)
    partial = CompiledDb(db(*fps), frozenset({Channel.MODE})).score_all(segment)
    assert (full <= partial + 1e-12).all()


# ------------------------------------------------------------- tie-breaks


def test_tie_prefers_higher_support():
    s = seg("RE", "OX", (8, 5), (5548, 5309))
    low = fp("zz.rare", s.modes, s.classes, s.pf, s.latency, support=1)
    high = fp("aa.common", s.modes, s.classes, s.pf, s.latency, support=9)
    preds = match_trace([s], db(low, high))
    assert preds[0].label == "aa.common"
    assert preds[0].margin == pytest.approx(0.0)


def test_tie_prefers_lexicographically_smaller_label():
    s = seg("RE", "OX", (8, 5), (5548, 5309))
    b = fp("bbb", s.modes, s.classes, s.pf, s.latency)
    a = fp("aaa", s.modes, s.classes, s.pf, s.latency)
    preds = match_trace([s], db(b, a))
    assert preds[0].label == "aaa"


def test_tie_prefers_labeled_over_unlabeled():
    s = seg("RE", "OX", (8, 5), (5548, 5309))
    anon = fp(None, s.modes, s.classes, s.pf, s.latency)
    named = fp("zzz", s.modes, s.classes, s.pf, s.latency)
    preds = match_trace([s], db(anon, named))
    assert preds[0].label == "zzz"


def test_single_entry_margin_is_the_full_score():
    s = seg("RE", "OX", (8, 5), (5548, 5309))
    only = fp("one", s.modes, s.classes, s.pf, s.latency)
    preds = match_trace([s], db(only))
    assert preds[0].score == pytest.approx(1.0)
    assert preds[0].margin == pytest.approx(1.0)


# ------------------------------------------------------------- match_trace


def test_match_trace_enumerates_segments_in_order():
    s1 = seg("RE", "OX", (8, 5), (5548, 5309))
    s2 = seg("RW", "OS", (8, 9), (5548, 5409))
    e1 = fp("first", s1.modes, s1.classes, s1.pf, s1.latency)
    e2 = fp("second", s2.modes, s2.classes, s2.pf, s2.latency)
    preds = match_trace([s1, s2], db(e1, e2))
    assert [p.segment_id for p in preds] == [0, 1]
    assert [p.label for p in preds] == ["first", "second"]


def test_match_trace_is_deterministic():
    rng = random.Random(3)
    entries = [
        fp(
            f"op{i}",
            "".join(rng.choice("RWE") for _ in range(4)),
            "".join(rng.choice("OSX") for _ in range(4)),
            [rng.randint(0, 9) for _ in range(4)],
            [rng.randint(5000, 6000) for _ in range(4)],
        )
        for i in range(6)
    ]
    segs = [
        seg(
            "".join(rng.choice("RWE") for _ in range(4)),
            "".join(rng.choice("OSX") for _ in range(4)),
            [rng.randint(0, 9) for _ in range(4)],
            [rng.randint(5000, 6000) for _ in range(4)],
        )
        for _ in range(10)
    ]
    assert match_trace(segs, db(*entries)) == match_trace(segs, db(*entries))


def test_empty_database_is_an_error():
    with pytest.raises(MatchError, match="empty"):
        match_trace([], db())
