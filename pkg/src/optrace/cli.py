"""Command-line pipeline driver.

Subcommands mirror the attack phases: synth (victim trace), profile
(fingerprint DB), preprocess (structure report), attack (label recovery),
eval (recall), ablate (channel study), end2end (all of the above).

Exit codes: 0 success, 2 usage or configuration error, 3 malformed or
inconsistent data files, 4 pipeline failure (detection or matching).
"""

import argparse
import sys
from pathlib import Path

from .bytecode import ParseError, Trap, execute, parse_flat_module
from .handlers import apply_mitigation, default_handler_specs
from .machine import (
    LayoutConfig,
    MitigationConfig,
    NoiseModel,
    SideChannelTrace,
    SynthesisError,
    build_layout,
    shuffle_handler_pages,
    synthesize_trace,
)
from .matcher import Channel, MatchError, match_trace
from .metrics import classify_outcomes
from .preprocess import (
    DetectionError,
    SegmentationError,
    preprocess_trace,
)
from .profiler import ProfilingError, build_fingerprint_db
from .traceio import (
    ConfigError,
    FormatError,
    config_hash,
    load_config,
    read_db,
    read_predictions,
    read_trace,
    read_truth,
    write_config,
    write_db,
    write_predictions,
    write_segments,
    write_trace,
    write_truth,
)
from .workloads import benchmark_module, primes_module, reference_module

# Profiling runs on the attacker's own instance, which maps pages
# independently of the victim; any fixed offset gives it a distinct layout.
PROFILE_SEED_OFFSET = 7919

_USAGE_ERRORS = (ConfigError,)
_DATA_ERRORS = (FormatError, ParseError, Trap)
_PIPELINE_ERRORS = (
    DetectionError,
    SegmentationError,
    ProfilingError,
    MatchError,
    SynthesisError,
)


class EvalError(ValueError):
    """Prediction and truth files do not describe the same run."""


def _noise_from_config(cfg, seed: int, zero: bool = False) -> NoiseModel:
    if zero:
        return NoiseModel.zero(rng_seed=seed)
    return NoiseModel(
        latency_jitter_sigma=cfg["noise.latency_jitter_sigma"],
        apic_quantum=cfg["noise.apic_quantum"],
        ctx_switch_rate=cfg["noise.ctx_switch_rate"],
        ctx_switch_extra_steps_mean=cfg["noise.ctx_switch_extra_steps_mean"],
        multistep_prob=cfg["noise.multistep_prob"],
        rng_seed=seed,
    )


def _layout_from_config(cfg) -> LayoutConfig:
    return LayoutConfig(
        stack_pages=cfg["layout.stack_pages"],
        bytecode_pages=cfg["layout.bytecode_pages"],
        linear_pages=cfg["layout.linear_pages"],
        span=cfg["layout.span"],
    )


def _mitigation_from_config(cfg) -> MitigationConfig:
    return MitigationConfig(
        nop_insertion_prob=cfg["mitigation.nop_insertion_prob"],
        shuffle_handlers=cfg["mitigation.shuffle_handlers"],
        variant_count=cfg["mitigation.variant_count"],
    )


_CHANNEL_NAMES = {c.value: c for c in Channel}


def _parse_channels(spec: str) -> frozenset[Channel]:
    names = [part.strip() for part in spec.split(",") if part.strip()]
    if not names:
        raise ConfigError("empty channel list")
    try:
        return frozenset(_CHANNEL_NAMES[name] for name in names)
    except KeyError as exc:
        raise ConfigError(
            f"unknown channel {exc.args[0]!r}; choose from {sorted(_CHANNEL_NAMES)}"
        ) from None


def _build_module(args):
    if getattr(args, "module", None):
        module_path = Path(args.module)
        if not module_path.is_file():
            raise ConfigError(f"module file not found: {module_path}")
        return parse_flat_module(module_path.read_text())
    name = args.workload
    if name == "benchmark":
        return benchmark_module(args.seed, args.iterations)
    if name == "reference":
        return reference_module()
    if name == "primes":
        return primes_module()
    raise ConfigError(f"unknown workload {name!r}")


def _synthesize(cfg, seed, module, markers: bool, zero_noise: bool, step_limit: int):
    run = execute(module, step_limit=step_limit)
    if run.step_limit_hit:
        raise Trap(f"step limit {step_limit} hit before program end")
    layout = build_layout(seed, _layout_from_config(cfg))
    mitigation = _mitigation_from_config(cfg)
    specs = default_handler_specs()
    if not markers:
        # Deployed-interpreter hardening applies to the victim only; the
        # profiling replica is always the stock build.
        specs = apply_mitigation(specs, mitigation, seed)
        if mitigation.shuffle_handlers:
            layout = shuffle_handler_pages(layout, seed)
    noise = _noise_from_config(cfg, seed + 1, zero=zero_noise)
    trace = synthesize_trace(
        run, layout, specs, noise, profiling_markers=markers
    )
    return run, layout, trace


def _cmd_synth(args) -> int:
    cfg = load_config(args.config)
    run, layout, trace = _synthesize(
        cfg,
        args.seed,
        _build_module(args),
        args.markers,
        args.zero_noise,
        args.step_limit,
    )
    digest = config_hash(cfg)
    write_trace(args.out_trace, trace, config_hash=digest)
    write_truth(args.out_truth, trace, config_hash=digest)
    config_out = args.out_config or str(Path(args.out_trace).with_suffix(".config"))
    write_config(config_out, cfg)
    print(
        f"synth: {len(run.executed)} retired opcodes, {len(trace.events)} events, "
        f"layout seed {args.seed}"
    )
    print(f"synth: trace -> {args.out_trace}")
    print(f"synth: truth -> {args.out_truth}")
    print(f"synth: config -> {config_out}")
    return 0


def _cmd_profile(args) -> int:
    cfg = load_config(args.config)
    if bool(args.trace) != bool(args.truth):
        raise ConfigError("--trace and --truth must be given together")
    if args.trace:
        # Replay a marker-instrumented run captured earlier with
        # `synth --markers`; the layout seed travels in the trace header.
        bare = read_trace(args.trace)
        truth, _ = read_truth(args.truth)
        if bare.layout_seed is None:
            raise FormatError("trace header lacks layout_seed")
        trace = SideChannelTrace(
            events=bare.events,
            truth=tuple(truth),
            layout_seed=bare.layout_seed,
        )
        layout = build_layout(bare.layout_seed, _layout_from_config(cfg))
        seed = bare.layout_seed
    else:
        module = reference_module(args.repeats)
        _, layout, trace = _synthesize(
            cfg, args.seed, module, True, args.zero_noise, args.step_limit
        )
        seed = args.seed
    db = build_fingerprint_db(
        trace,
        layout.marker_page,
        layout.optable_page,
        frozenset(layout.stack_pages),
        meta={
            "config_hash": config_hash(cfg),
            "profile_seed": str(seed),
        },
    )
    write_db(args.out, db)
    labels = {fp.label for fp in db.entries if fp.label is not None}
    print(f"profile: {len(db.entries)} fingerprints covering {len(labels)} opcodes")
    print(f"profile: db -> {args.out}")
    return 0


def _run_attack(cfg, trace, db, channels):
    report, filtered, segments = preprocess_trace(
        trace,
        coverage_target=cfg["preprocess.coverage_target"],
        window=cfg["preprocess.window"],
        min_rw_frac=cfg["preprocess.min_rw_frac"],
    )
    predictions = match_trace(segments, db, channels)
    return report, segments, predictions


def _cmd_attack(args) -> int:
    cfg = load_config(args.config)
    trace = read_trace(args.trace)
    db = read_db(args.db)
    channels = _parse_channels(args.channels or cfg["match.channels"])
    report, segments, predictions = _run_attack(cfg, trace, db, channels)
    write_predictions(
        args.out,
        predictions,
        config_hash=config_hash(cfg),
        layout_seed=trace.layout_seed,
    )
    print(
        f"attack: dispatch table page 0x{report.optable_page:x} "
        f"(confidence {report.optable_confidence:.4f}), "
        f"{len(report.stack_pages)} stack pages, "
        f"{report.events_removed} events filtered"
    )
    print(f"attack: {len(predictions)} segments labeled -> {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    trace = read_trace(args.trace)
    report, filtered, segments = preprocess_trace(
        trace,
        coverage_target=cfg["preprocess.coverage_target"],
        window=cfg["preprocess.window"],
        min_rw_frac=cfg["preprocess.min_rw_frac"],
    )
    print(f"dispatch table page: 0x{report.optable_page:x}")
    print(f"confidence: {report.optable_confidence:.6f}")
    print(f"stack pages: {' '.join(f'0x{p:x}' for p in sorted(report.stack_pages))}")
    print(f"events removed: {report.events_removed}")
    print(f"segments: {len(segments)}")
    if args.out:
        write_segments(
            args.out,
            segments,
            config_hash=config_hash(cfg),
            layout_seed=trace.layout_seed,
        )
        print(f"segments -> {args.out}")
    return 0


def _check_same_run(pred_meta, truth_meta, force: bool) -> None:
    a = pred_meta.get("layout_seed")
    b = truth_meta.get("layout_seed")
    if force:
        return
    if a is None or b is None or a != b:
        raise EvalError(
            f"layout_seed mismatch between predictions ({a}) and truth ({b}); "
            "pass --force to compare anyway"
        )


def _evaluate(predictions, truth, strict: bool):
    if len(predictions) != len(truth):
        raise EvalError(
            f"{len(predictions)} predictions vs {len(truth)} truth labels"
        )
    truth_labels = [label for _, label in truth]
    pred_labels = [label for _, label, _, _ in predictions]
    return classify_outcomes(truth_labels, pred_labels, strict=strict)


def _write_confusion(path, confusion) -> None:
    def name(label):
        return "NULL" if label is None else label

    with open(path, "w", newline="") as fh:
        fh.write("truth,predicted,count\n")
        for (truth, pred), count in sorted(
            confusion.items(), key=lambda kv: (name(kv[0][0]), name(kv[0][1]))
        ):
            fh.write(f"{name(truth)},{name(pred)},{count}\n")


def _cmd_eval(args) -> int:
    predictions, pred_meta = read_predictions(args.predictions)
    truth, truth_meta = read_truth(args.truth)
    _check_same_run(pred_meta, truth_meta, args.force)
    report = _evaluate(predictions, truth, args.strict)
    print(f"recall: {report.recall:.3f}%")
    if args.counts:
        print(
            f"counts: n={report.n} correct={report.correct} wrong={report.wrong} "
            f"missed={report.missed} inserted={report.inserted}"
        )
    if args.out_confusion:
        _write_confusion(args.out_confusion, report.confusion)
        print(f"confusion -> {args.out_confusion}")
    return 0


_ABLATION_SETS = [
    "mode,class,pf,latency",
    "mode,class,pf",
    "mode,class,latency",
    "mode,pf,latency",
    "class,pf,latency",
]

_CHANNEL_ORDER = [Channel.MODE, Channel.CLASS, Channel.PF, Channel.LATENCY]


def _dedup_subsets(specs: list[str]) -> list[frozenset[Channel]]:
    subsets: list[frozenset[Channel]] = []
    for spec in specs:
        channels = _parse_channels(spec)
        if channels in subsets:
            print(f"warning: duplicate channel subset {spec!r} skipped", file=sys.stderr)
            continue
        subsets.append(channels)
    return subsets


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    trace = read_trace(args.trace)
    db = read_db(args.db)
    truth, _ = read_truth(args.truth)
    specs = args.subsets.split(";") if args.subsets else _ABLATION_SETS
    lines = ["channels,recall_percent,n,correct,wrong,missed,inserted"]
    for channels in _dedup_subsets(specs):
        _, _, predictions = _run_attack(cfg, trace, db, channels)
        pred_rows = [(p.segment_id, p.label, p.score, p.margin) for p in predictions]
        report = _evaluate(pred_rows, truth, args.strict)
        shown = "+".join(c.value for c in _CHANNEL_ORDER if c in channels)
        lines.append(
            f"{shown},{report.recall:.3f},{report.n},{report.correct},"
            f"{report.wrong},{report.missed},{report.inserted}"
        )
    body = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(body)
        print(f"ablation table -> {args.out}")
    else:
        print(body, end="")
    return 0


def _cmd_end2end(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    write_config(out / "config.txt", cfg)

    profile_seed = args.seed + PROFILE_SEED_OFFSET
    module = reference_module(args.repeats)
    _, playout, ptrace = _synthesize(
        cfg, profile_seed, module, True, args.zero_noise, args.step_limit
    )
    db = build_fingerprint_db(
        ptrace,
        playout.marker_page,
        playout.optable_page,
        frozenset(playout.stack_pages),
        meta={"config_hash": digest, "profile_seed": str(profile_seed)},
    )
    write_db(out / "db.txt", db)

    run, _, vtrace = _synthesize(
        cfg, args.seed, _build_module(args), False, args.zero_noise, args.step_limit
    )
    write_trace(out / "victim.csv", vtrace, config_hash=digest)
    write_truth(out / "truth.csv", vtrace, config_hash=digest)

    channels = _parse_channels(cfg["match.channels"])
    victim = read_trace(out / "victim.csv")
    report, segments, predictions = _run_attack(cfg, victim, db, channels)
    write_predictions(
        out / "predictions.csv",
        predictions,
        config_hash=digest,
        layout_seed=victim.layout_seed,
    )

    truth, _ = read_truth(out / "truth.csv")
    pred_rows = [(p.segment_id, p.label, p.score, p.margin) for p in predictions]
    result = _evaluate(pred_rows, truth, args.strict)
    lines = [
        f"seed: {args.seed}",
        f"config_hash: {digest}",
        f"retired: {len(run.executed)}",
        f"segments: {len(segments)}",
        f"dispatch_confidence: {report.optable_confidence:.6f}",
        f"recall: {result.recall:.3f}%",
        f"counts: n={result.n} correct={result.correct} wrong={result.wrong} "
        f"missed={result.missed} inserted={result.inserted}",
    ]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value settings file")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")

    parser = argparse.ArgumentParser(
        prog="optrace",
        description="Interpreter instruction-recovery pipeline on page-access traces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate a victim trace")
    synth.add_argument("--workload", default="benchmark",
                       choices=["benchmark", "reference", "primes"])
    synth.add_argument("--module", metavar="FILE", help="flat module text to run instead")
    synth.add_argument("--iterations", type=int, default=55)
    synth.add_argument("--step-limit", type=int, default=10_000_000)
    synth.add_argument("--zero-noise", action="store_true")
    synth.add_argument("--markers", action="store_true",
                       help="instrumented profiling build (marker page writes)")
    synth.add_argument("--out-trace", default="victim.csv")
    synth.add_argument("--out-truth", default="truth.csv")
    synth.add_argument("--out-config", metavar="FILE",
                       help="resolved settings path (default: trace path, .config)")
    synth.set_defaults(func=_cmd_synth)

    profile = sub.add_parser("profile", parents=[common],
                             help="build a fingerprint database")
    profile.add_argument("--trace", metavar="FILE",
                         help="marker-instrumented trace CSV (default: synthesize)")
    profile.add_argument("--truth", metavar="FILE",
                         help="truth CSV matching --trace")
    profile.add_argument("--repeats", type=int, default=32)
    profile.add_argument("--step-limit", type=int, default=10_000_000)
    profile.add_argument("--zero-noise", action="store_true")
    profile.add_argument("--out", default="db.txt")
    profile.set_defaults(func=_cmd_profile)

    attack = sub.add_parser("attack", parents=[common],
                            help="recover opcode labels from a trace")
    attack.add_argument("--trace", required=True)
    attack.add_argument("--db", required=True)
    attack.add_argument("--channels", help="comma list: mode,class,pf,latency")
    attack.add_argument("--out", default="predictions.csv")
    attack.set_defaults(func=_cmd_attack)

    prep = sub.add_parser("preprocess", parents=[common],
                          help="report detected interpreter structure")
    prep.add_argument("--trace", required=True)
    prep.add_argument("--out", metavar="FILE",
                      help="write segmented trace CSV (segment_id column)")
    prep.set_defaults(func=_cmd_preprocess)

    ev = sub.add_parser("eval", parents=[common], help="score predictions against truth")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--counts", action="store_true", help="print error breakdown")
    ev.add_argument("--strict", action="store_true",
                    help="exact mnemonics instead of opcode families")
    ev.add_argument("--force", action="store_true",
                    help="skip the same-run header check")
    ev.add_argument("--out-confusion", metavar="FILE",
                    help="write confusion matrix CSV")
    ev.set_defaults(func=_cmd_eval)

    ablate = sub.add_parser("ablate", parents=[common],
                            help="recall per fingerprint-channel subset")
    ablate.add_argument("--trace", required=True)
    ablate.add_argument("--db", required=True)
    ablate.add_argument("--truth", required=True)
    ablate.add_argument("--strict", action="store_true")
    ablate.add_argument("--subsets", metavar="LISTS",
                        help="semicolon-separated channel lists "
                             "(default: full plus each leave-one-out)")
    ablate.add_argument("--out", metavar="FILE", help="write table instead of stdout")
    ablate.set_defaults(func=_cmd_ablate)

    end2end = sub.add_parser("end2end", parents=[common],
                             help="profile, synthesize, attack, and evaluate")
    end2end.add_argument("--workload", default="benchmark",
                         choices=["benchmark", "reference", "primes"])
    end2end.add_argument("--module", metavar="FILE")
    end2end.add_argument("--iterations", type=int, default=55)
    end2end.add_argument("--repeats", type=int, default=32)
    end2end.add_argument("--step-limit", type=int, default=10_000_000)
    end2end.add_argument("--zero-noise", action="store_true")
    end2end.add_argument("--strict", action="store_true")
    end2end.add_argument("--out-dir", default="optrace-out")
    end2end.set_defaults(func=_cmd_end2end)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EvalError, *_DATA_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _PIPELINE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
