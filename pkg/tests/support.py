"""Shared trace-pipeline builders for the test suite.

Synthesizing traces dominates test runtime, so every builder is memoized;
tests that share a (seed, noise, mitigation) combination reuse one run.
Seeds, noise values, and the profile-seed offset mirror the CLI defaults
so pipeline-level expectations here match `optrace end2end` behavior.
"""

from functools import lru_cache
from types import SimpleNamespace

from optrace.bytecode import execute
from optrace.cli import PROFILE_SEED_OFFSET
from optrace.handlers import apply_mitigation, default_handler_specs
from optrace.machine import (
    LayoutConfig,
    MitigationConfig,
    NoiseModel,
    build_layout,
    synthesize_trace,
)
from optrace.matcher import Channel, match_trace
from optrace.metrics import classify_outcomes
from optrace.preprocess import preprocess_trace
from optrace.profiler import build_fingerprint_db
from optrace.workloads import benchmark_module, reference_module

FULL_CHANNELS = frozenset(Channel)
NO_LATENCY = FULL_CHANNELS - {Channel.LATENCY}
DEFAULT_SIGMA = 60.0


def noise_model(seed: int, sigma: float = DEFAULT_SIGMA, zero: bool = False) -> NoiseModel:
    if zero:
        return NoiseModel.zero(rng_seed=seed)
    return NoiseModel(latency_jitter_sigma=sigma, rng_seed=seed)


@lru_cache(maxsize=None)
def profile_db(seed: int, sigma: float = DEFAULT_SIGMA, zero: bool = False, repeats: int = 32):
    """Fingerprint DB from the coverage program under its own layout."""
    run = execute(reference_module(repeats), step_limit=10_000_000)
    layout = build_layout(seed, LayoutConfig())
    trace = synthesize_trace(
        run,
        layout,
        default_handler_specs(),
        noise_model(seed + 1, sigma, zero),
        profiling_markers=True,
    )
    return build_fingerprint_db(
        trace, layout.marker_page, layout.optable_page, frozenset(layout.stack_pages)
    )


@lru_cache(maxsize=None)
def victim(
    seed: int,
    sigma: float = DEFAULT_SIGMA,
    zero: bool = False,
    nop_prob: float = 0.0,
    iterations: int = 55,
):
    """Benchmark run, synthesized and preprocessed; truth kept alongside."""
    run = execute(benchmark_module(seed, iterations), step_limit=50_000_000)
    layout = build_layout(seed, LayoutConfig())
    specs = default_handler_specs()
    if nop_prob > 0.0:
        specs = apply_mitigation(
            specs, MitigationConfig(nop_insertion_prob=nop_prob), seed
        )
    trace = synthesize_trace(
        run, layout, specs, noise_model(seed + 1, sigma, zero), profiling_markers=False
    )
    report, filtered, segments = preprocess_trace(trace)
    return SimpleNamespace(
        run=run,
        layout=layout,
        trace=trace,
        report=report,
        segments=tuple(segments),
        truth=tuple(label for _, label in trace.truth),
    )


@lru_cache(maxsize=None)
def attack_report(
    seed: int,
    sigma: float = DEFAULT_SIGMA,
    zero: bool = False,
    nop_prob: float = 0.0,
    iterations: int = 55,
    channels: frozenset = FULL_CHANNELS,
    strict: bool = False,
):
    """Recall report for one profiled-then-attacked benchmark run."""
    v = victim(seed, sigma, zero, nop_prob, iterations)
    db = profile_db(seed + PROFILE_SEED_OFFSET, sigma, zero)
    predictions = match_trace(list(v.segments), db, channels)
    return classify_outcomes(v.truth, [p.label for p in predictions], strict=strict)


def mean_recall(seeds, **kwargs) -> float:
    recalls = [attack_report(seed, **kwargs).recall for seed in seeds]
    return sum(recalls) / len(recalls)
