"""Match recovered trace segments against a fingerprint database.

Each fingerprint channel is scored independently and the per-channel scores
multiply, so one disagreeing channel is enough to sink a candidate.
Symbolic channels (access mode, page class) score by Hamming agreement;
numeric channels (fault counts, latency) score by correlation, which
tolerates the additive jitter and quantization the timer applies.
"""

from dataclasses import dataclass
from enum import Enum
from math import sqrt

import numpy as np

from .preprocess import Segment
from .profiler import Fingerprint, FingerprintDb

__all__ = [
    "Channel",
    "DEFAULT_CHANNELS",
    "MatchError",
    "Prediction",
    "pearson",
    "score_discrete",
    "score_numeric",
    "score_segment",
    "CompiledDb",
    "match_trace",
]


class Channel(Enum):
    MODE = "mode"
    CLASS = "class"
    PF = "pf"
    LATENCY = "latency"


DEFAULT_CHANNELS = frozenset(Channel)


class MatchError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    segment_id: int
    label: str | None
    score: float
    margin: float


def pearson(x, y) -> float:
    """Sample correlation; requires equal lengths and variance on both sides."""
    n = len(x)
    if n != len(y):
        raise ValueError("length mismatch")
    if n < 2:
        raise ValueError("need at least 2 points")
    sx = sy = sxx = syy = sxy = 0.0
    for a, b in zip(x, y):
        sx += a
        sy += b
        sxx += a * a
        syy += b * b
        sxy += a * b
    vx = n * sxx - sx * sx
    vy = n * syy - sy * sy
    if vx <= 0.0 or vy <= 0.0:
        raise ValueError("correlation undefined for constant input")
    return (n * sxy - sx * sy) / sqrt(vx * vy)


def score_discrete(a, b) -> float:
    """1 / (1 + Hamming distance), counting length difference as mismatches."""
    m = min(len(a), len(b))
    mism = sum(1 for i in range(m) if a[i] != b[i])
    return 1.0 / (1.0 + mism + abs(len(a) - len(b)))


def score_numeric(a, b) -> float:
    """Correlation over the common prefix, scaled by the length ratio.

    Constant vectors make correlation undefined, so they get their own
    rules: two constants agree fully or not at all; a constant against a
    varying vector falls back to Hamming-style counting.
    """
    if not a or not b:
        return 1.0 if len(a) == len(b) else 0.0
    m = min(len(a), len(b))
    ax, bx = a[:m], b[:m]
    a_const = all(v == ax[0] for v in ax)
    b_const = all(v == bx[0] for v in bx)
    if a_const and b_const:
        return 1.0 if ax[0] == bx[0] else 0.0
    if a_const or b_const:
        mism = sum(1 for p, q in zip(ax, bx) if p != q)
        return 1.0 / (1.0 + mism + abs(len(a) - len(b)))
    r = max(pearson(ax, bx), 0.0)
    return r * (m / max(len(a), len(b)))


def score_segment(
    segment: Segment, fp: Fingerprint, channels: frozenset[Channel] = DEFAULT_CHANNELS
) -> float:
    score = 1.0
    if Channel.MODE in channels:
        score *= score_discrete(segment.modes, fp.modes)
    if Channel.CLASS in channels:
        score *= score_discrete(segment.classes, fp.classes)
    if Channel.PF in channels:
        score *= score_numeric(segment.pf, fp.pf)
    if Channel.LATENCY in channels:
        score *= score_numeric(segment.latency, fp.latency)
    return score


def _pad_str(s: str, width: int) -> np.ndarray:
    out = np.zeros(width, dtype=np.uint8)
    raw = s.encode("ascii")
    out[: len(raw)] = np.frombuffer(raw, dtype=np.uint8)
    return out


def _pad_num(values, width: int, dtype) -> np.ndarray:
    out = np.zeros(width, dtype=dtype)
    out[: len(values)] = values
    return out


class CompiledDb:
    """Fingerprint entries packed into padded arrays for bulk scoring.

    Produces the same scores as score_segment; ties broken in favor of
    higher support, then lexicographic label (unlabeled entries last).
    """

    def __init__(self, db: FingerprintDb, channels: frozenset[Channel] = DEFAULT_CHANNELS):
        if not db.entries:
            raise MatchError("empty fingerprint database")
        self.entries = db.entries
        self.channels = channels
        lens = np.array([len(fp) for fp in db.entries], dtype=np.int64)
        self.lens = lens
        self.width = int(lens.max())
        self.modes = np.stack([_pad_str(fp.modes, self.width) for fp in db.entries])
        self.classes = np.stack([_pad_str(fp.classes, self.width) for fp in db.entries])
        self.pf = np.stack(
            [_pad_num(fp.pf, self.width, np.float64) for fp in db.entries]
        )
        self.latency = np.stack(
            [_pad_num(fp.latency, self.width, np.float64) for fp in db.entries]
        )
        # Row sums only make sense under per-pair masks; precompute the
        # squared rows once since they never change.
        self.pf_sq = self.pf * self.pf
        self.latency_sq = self.latency * self.latency
        self.tie_key = [
            (-fp.support, fp.label is None, fp.label or "") for fp in db.entries
        ]
        self._cache: dict[tuple, tuple[int, float, float]] = {}

    def _discrete_scores(self, ent: np.ndarray, seg: np.ndarray, mask, lendiff):
        mism = ((ent != seg[None, :]) & mask).sum(axis=1)
        return 1.0 / (1.0 + mism + lendiff)

    def _numeric_scores(self, ent, ent_sq, seg_vals, L, m, mask, lendiff, maxlen):
        x = _pad_num(seg_vals, max(self.width, L), np.float64)[: self.width]
        n = m.astype(np.float64)
        xm = x[None, :] * mask
        sx = xm.sum(axis=1)
        sxx = ((x * x)[None, :] * mask).sum(axis=1)
        sy = (ent * mask).sum(axis=1)
        syy = (ent_sq * mask).sum(axis=1)
        sxy = (ent * xm).sum(axis=1)
        vx = n * sxx - sx * sx
        vy = n * syy - sy * sy
        cov = n * sxy - sx * sy
        x_const = vx <= 0.0
        y_const = vy <= 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            r = cov / np.sqrt(vx * vy)
        r = np.clip(r, 0.0, None)
        corr_score = r * (m / maxlen)
        first_eq = ent[:, 0] == (seg_vals[0] if len(seg_vals) else 0.0)
        both = x_const & y_const
        one = x_const ^ y_const
        mism = ((ent != x[None, :]) & mask).sum(axis=1)
        fallback = 1.0 / (1.0 + mism + lendiff)
        out = np.where(both, np.where(first_eq, 1.0, 0.0), corr_score)
        out = np.where(one, fallback, out)
        return out

    def score_all(self, segment: Segment) -> np.ndarray:
        L = len(segment)
        m = np.minimum(self.lens, L)
        maxlen = np.maximum(self.lens, L)
        lendiff = np.abs(self.lens - L)
        mask = np.arange(self.width)[None, :] < m[:, None]
        scores = np.ones(len(self.entries), dtype=np.float64)
        if Channel.MODE in self.channels:
            seg = _pad_str(segment.modes, max(self.width, L))[: self.width]
            scores *= self._discrete_scores(self.modes, seg, mask, lendiff)
        if Channel.CLASS in self.channels:
            seg = _pad_str(segment.classes, max(self.width, L))[: self.width]
            scores *= self._discrete_scores(self.classes, seg, mask, lendiff)
        if Channel.PF in self.channels:
            scores *= self._numeric_scores(
                self.pf,
                self.pf_sq,
                np.array(segment.pf, dtype=np.float64),
                L,
                m,
                mask,
                lendiff,
                maxlen,
            )
        if Channel.LATENCY in self.channels:
            scores *= self._numeric_scores(
                self.latency,
                self.latency_sq,
                np.array(segment.latency, dtype=np.float64),
                L,
                m,
                mask,
                lendiff,
                maxlen,
            )
        return scores

    def best(self, segment: Segment) -> tuple[int, float, float]:
        """Index of the winning entry plus its score and margin to runner-up."""
        key = (segment.modes, segment.classes, segment.pf, segment.latency)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        scores = self.score_all(segment)
        top = float(scores.max())
        tied = np.flatnonzero(scores == top)
        idx = int(min(tied, key=lambda i: self.tie_key[i]))
        if len(scores) > 1:
            second = float(np.partition(scores, -2)[-2])
        else:
            second = 0.0
        result = (idx, top, top - second)
        self._cache[key] = result
        return result


def match_trace(
    segments: list[Segment],
    db: FingerprintDb,
    channels: frozenset[Channel] = DEFAULT_CHANNELS,
) -> list[Prediction]:
    compiled = CompiledDb(db, channels)
    out = []
    for seg_id, seg in enumerate(segments):
        idx, score, margin = compiled.best(seg)
        out.append(
            Prediction(
                segment_id=seg_id,
                label=compiled.entries[idx].label,
                score=score,
                margin=margin,
            )
        )
    return out
