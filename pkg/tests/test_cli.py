"""Command-line driver: pipeline wiring, artifacts, and exit codes."""

from types import SimpleNamespace

import pytest

from optrace.cli import main
from optrace.traceio import read_db, trace_meta


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One zero-noise primes run pushed through synth -> profile -> attack."""
    d = tmp_path_factory.mktemp("cli")
    paths = SimpleNamespace(
        dir=d,
        trace=d / "victim.csv",
        truth=d / "truth.csv",
        config=d / "victim.config",
        db=d / "db.txt",
        preds=d / "predictions.csv",
    )
    assert run(
        "synth", "--workload", "primes", "--zero-noise", "--seed", 3,
        "--out-trace", paths.trace, "--out-truth", paths.truth,
    ) == 0
    assert run(
        "profile", "--zero-noise", "--seed", 11, "--repeats", 4,
        "--out", paths.db,
    ) == 0
    assert run(
        "attack", "--trace", paths.trace, "--db", paths.db, "--out", paths.preds,
    ) == 0
    return paths


# ------------------------------------------------------------------ synth


def test_synth_writes_all_artifacts(pipeline):
    assert pipeline.trace.is_file()
    assert pipeline.truth.is_file()
    # Config lands next to the trace unless --out-config overrides it.
    assert pipeline.config.is_file()
    meta = trace_meta(pipeline.trace)
    assert meta["format"] == "optrace trace v1"
    assert meta["layout_seed"] == "3"
    assert "config_hash" in meta


def test_synth_is_deterministic(tmp_path, pipeline):
    again = tmp_path / "again.csv"
    assert run(
        "synth", "--workload", "primes", "--zero-noise", "--seed", 3,
        "--out-trace", again, "--out-truth", tmp_path / "again.truth",
    ) == 0
    assert again.read_bytes() == pipeline.trace.read_bytes()


def test_synth_honors_out_config(tmp_path):
    cfg_path = tmp_path / "custom.cfg"
    assert run(
        "synth", "--workload", "primes", "--zero-noise",
        "--out-trace", tmp_path / "t.csv", "--out-truth", tmp_path / "t.truth",
        "--out-config", cfg_path,
    ) == 0
    assert "match.channels" in cfg_path.read_text()


def test_synth_runs_user_modules(tmp_path, capsys):
    module = tmp_path / "tiny.ot"
    module.write_text("i32.const 1\ni32.const 2\ni32.add\ndrop\nreturn\n")
    assert run(
        "synth", "--module", module, "--zero-noise",
        "--out-trace", tmp_path / "t.csv", "--out-truth", tmp_path / "t.truth",
    ) == 0
    assert "5 retired opcodes" in capsys.readouterr().out


# ---------------------------------------------------------------- profile


def test_profile_reports_coverage(pipeline, capsys):
    assert run("profile", "--zero-noise", "--repeats", 2,
               "--out", pipeline.dir / "db2.txt") == 0
    out = capsys.readouterr().out
    assert "fingerprints covering 58 opcodes" in out


def test_profile_from_recorded_files(tmp_path):
    trace = tmp_path / "prof.csv"
    truth = tmp_path / "prof.truth"
    assert run(
        "synth", "--workload", "primes", "--zero-noise", "--markers",
        "--out-trace", trace, "--out-truth", truth,
    ) == 0
    db_path = tmp_path / "db.txt"
    assert run("profile", "--trace", trace, "--truth", truth, "--out", db_path) == 0
    db = read_db(db_path)
    assert "i32.rem_s" in db.labels()
    assert db.meta["profile_seed"] == "0"


def test_profile_requires_trace_and_truth_together(tmp_path, pipeline, capsys):
    assert run("profile", "--trace", pipeline.trace, "--out", tmp_path / "x.txt") == 2
    assert "together" in capsys.readouterr().err


def test_profile_rejects_markerless_trace(tmp_path, pipeline, capsys):
    assert run(
        "profile", "--trace", pipeline.trace, "--truth", pipeline.truth,
        "--out", tmp_path / "x.txt",
    ) == 4
    assert "marker" in capsys.readouterr().err


def test_profile_needs_layout_seed_header(tmp_path, capsys):
    trace = tmp_path / "prof.csv"
    truth = tmp_path / "prof.truth"
    run("synth", "--workload", "primes", "--zero-noise", "--markers",
        "--out-trace", trace, "--out-truth", truth)
    stripped = [
        line for line in trace.read_text().splitlines()
        if not line.startswith("# layout_seed")
    ]
    trace.write_text("\n".join(stripped) + "\n")
    assert run("profile", "--trace", trace, "--truth", truth,
               "--out", tmp_path / "x.txt") == 3
    assert "layout_seed" in capsys.readouterr().err


# ----------------------------------------------------- attack + preprocess


def test_attack_then_eval_recovers_zero_noise_run(pipeline, capsys):
    assert run("eval", "--predictions", pipeline.preds, "--truth", pipeline.truth,
               "--counts") == 0
    out = capsys.readouterr().out
    assert "recall: 100.000%" in out
    assert "wrong=0 missed=0 inserted=0" in out


def test_strict_eval_still_perfect_at_zero_noise(pipeline, capsys):
    # Width twins tie on every channel; the lexicographic tie-break picks
    # the i32 variant, which is what this workload actually runs.
    assert run("eval", "--predictions", pipeline.preds, "--truth", pipeline.truth,
               "--strict") == 0
    assert "recall: 100.000%" in capsys.readouterr().out


def test_eval_writes_confusion_table(pipeline, tmp_path, capsys):
    out_path = tmp_path / "confusion.csv"
    assert run("eval", "--predictions", pipeline.preds, "--truth", pipeline.truth,
               "--out-confusion", out_path) == 0
    lines = out_path.read_text().splitlines()
    assert lines[0] == "truth,predicted,count"
    assert all(int(line.rsplit(",", 1)[1]) > 0 for line in lines[1:])


def test_attack_rejects_unknown_channel(pipeline, tmp_path, capsys):
    assert run(
        "attack", "--trace", pipeline.trace, "--db", pipeline.db,
        "--channels", "mode,bogus", "--out", tmp_path / "p.csv",
    ) == 2
    assert "unknown channel" in capsys.readouterr().err


def test_attack_rejects_empty_channel_list(pipeline, tmp_path, capsys):
    assert run(
        "attack", "--trace", pipeline.trace, "--db", pipeline.db,
        "--channels", " , ", "--out", tmp_path / "p.csv",
    ) == 2
    assert "empty channel" in capsys.readouterr().err


def test_preprocess_reports_structure(pipeline, tmp_path, capsys):
    seg_path = tmp_path / "segments.csv"
    assert run("preprocess", "--trace", pipeline.trace, "--out", seg_path) == 0
    out = capsys.readouterr().out
    assert "dispatch table page: 0x" in out
    assert "confidence: 1.000000" in out
    assert seg_path.read_text().startswith("# optrace segments v1")


# ------------------------------------------------------------------- eval


def test_eval_refuses_mismatched_runs(tmp_path, pipeline, capsys):
    other_truth = tmp_path / "other.truth"
    run("synth", "--workload", "primes", "--zero-noise", "--seed", 4,
        "--out-trace", tmp_path / "other.csv", "--out-truth", other_truth)
    assert run("eval", "--predictions", pipeline.preds, "--truth", other_truth) == 3
    assert "layout_seed mismatch" in capsys.readouterr().err


def test_eval_force_overrides_header_check(tmp_path, pipeline):
    headerless = tmp_path / "stripped.truth"
    lines = [
        line for line in pipeline.truth.read_text().splitlines()
        if not line.startswith("# layout_seed")
    ]
    headerless.write_text("\n".join(lines) + "\n")
    assert run("eval", "--predictions", pipeline.preds, "--truth", headerless) == 3
    assert run("eval", "--predictions", pipeline.preds, "--truth", headerless,
               "--force") == 0


# ----------------------------------------------------------------- ablate


def test_ablate_emits_default_table(pipeline, capsys):
    assert run("ablate", "--trace", pipeline.trace, "--db", pipeline.db,
               "--truth", pipeline.truth) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "channels,recall_percent,n,correct,wrong,missed,inserted"
    assert len(lines) == 6
    assert lines[1].startswith("mode+class+pf+latency,100.000")
    assert {line.split(",")[0] for line in lines[2:]} == {
        "mode+class+pf",
        "mode+class+latency",
        "mode+pf+latency",
        "class+pf+latency",
    }


def test_ablate_deduplicates_subsets(pipeline, tmp_path, capsys):
    out_path = tmp_path / "ablate.csv"
    assert run(
        "ablate", "--trace", pipeline.trace, "--db", pipeline.db,
        "--truth", pipeline.truth, "--subsets", "mode,class;class,mode",
        "--out", out_path,
    ) == 0
    captured = capsys.readouterr()
    assert "duplicate channel subset" in captured.err
    lines = out_path.read_text().strip().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("mode+class,")


# -------------------------------------------------------------- exit codes


def test_missing_module_file_is_a_usage_error(tmp_path, capsys):
    assert run(
        "synth", "--module", tmp_path / "nope.ot",
        "--out-trace", tmp_path / "t.csv", "--out-truth", tmp_path / "t.truth",
    ) == 2
    assert "module file not found" in capsys.readouterr().err


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense.key = 1\n")
    assert run(
        "synth", "--workload", "primes", "--config", bad,
        "--out-trace", tmp_path / "t.csv", "--out-truth", tmp_path / "t.truth",
    ) == 2
    assert "unknown key" in capsys.readouterr().err


def test_malformed_trace_file_is_a_data_error(pipeline, tmp_path, capsys):
    assert run("attack", "--trace", pipeline.truth, "--db", pipeline.db,
               "--out", tmp_path / "p.csv") == 3
    assert "expected 'optrace trace v1'" in capsys.readouterr().err


def test_missing_input_file_is_a_data_error(tmp_path, pipeline, capsys):
    assert run("attack", "--trace", tmp_path / "ghost.csv", "--db", pipeline.db,
               "--out", tmp_path / "p.csv") == 3


def test_undetectable_trace_is_a_pipeline_error(tmp_path, pipeline, capsys):
    dead = tmp_path / "dead.csv"
    rows = "\n".join("0x1000,W,1,10" for _ in range(8))
    dead.write_text(f"# optrace trace v1\naddress,mode,pf_count,latency\n{rows}\n")
    assert run("attack", "--trace", dead, "--db", pipeline.db,
               "--out", tmp_path / "p.csv") == 4
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_subcommand_exits_via_argparse():
    with pytest.raises(SystemExit) as info:
        run("frobnicate")
    assert info.value.code == 2


# ---------------------------------------------------------------- end2end


def test_end2end_is_byte_reproducible(tmp_path, capsys):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert run(
            "end2end", "--workload", "primes", "--zero-noise",
            "--repeats", 4, "--seed", 9, "--out-dir", d,
        ) == 0
    out = capsys.readouterr().out
    assert "recall: 100.000%" in out
    for name in ("victim.csv", "truth.csv", "db.txt", "predictions.csv",
                 "report.txt", "config.txt"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
