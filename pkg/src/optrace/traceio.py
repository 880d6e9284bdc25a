"""File formats: traces, truth labels, predictions, fingerprint DBs, config.

Every format is line-oriented text with `#` comment headers.  The first
line always names the format and version so files cannot be fed to the
wrong reader.  Addresses are page-aligned byte addresses in lowercase hex;
the page number is address / 4096.
"""

import csv
import hashlib
from pathlib import Path

from .machine import PAGE_SIZE, SideChannelTrace, StepEvent
from .profiler import Fingerprint, FingerprintDb

__all__ = [
    "FormatError",
    "ConfigError",
    "DEFAULT_CONFIG",
    "write_trace",
    "read_trace",
    "write_segments",
    "write_truth",
    "read_truth",
    "write_predictions",
    "read_predictions",
    "write_db",
    "read_db",
    "load_config",
    "parse_config_text",
    "write_config",
    "config_hash",
]

_NULL_LABEL = "NULL"


class FormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(msg if line is None else f"line {line}: {msg}")


class ConfigError(ValueError):
    pass


def _split_file(path) -> tuple[str, dict[str, str], list[list[str]], list[int]]:
    """Read a CSV-ish file into (format tag, header meta, rows, line numbers)."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# optrace "):
        raise FormatError("missing '# optrace <kind> <version>' header", 1)
    tag = lines[0][2:].strip()
    meta: dict[str, str] = {}
    rows: list[list[str]] = []
    row_lines: list[int] = []
    for lineno, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if "=" in body:
                key, _, value = body.partition("=")
                meta[key.strip()] = value.strip()
            continue
        rows.append(next(csv.reader([stripped])))
        row_lines.append(lineno)
    return tag, meta, rows, row_lines


def _check_tag(tag: str, kind: str) -> None:
    want = f"optrace {kind} v1"
    if tag != want:
        raise FormatError(f"expected '{want}', found '{tag}'", 1)


def _check_columns(rows, row_lines, expected: list[str]):
    if not rows or rows[0] != expected:
        raise FormatError(
            f"expected column header {','.join(expected)}",
            row_lines[0] if rows else None,
        )
    return rows[1:], row_lines[1:]


# ---------------------------------------------------------------- traces


def write_trace(path, trace: SideChannelTrace, config_hash: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# optrace trace v1\n")
        if trace.layout_seed is not None:
            fh.write(f"# layout_seed={trace.layout_seed}\n")
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("address,mode,pf_count,latency\n")
        for ev in trace.events:
            fh.write(f"0x{ev.page * PAGE_SIZE:x},{ev.mode},{ev.pf_count},{ev.latency}\n")


def read_trace(path) -> SideChannelTrace:
    tag, meta, rows, row_lines = _split_file(path)
    _check_tag(tag, "trace")
    rows, row_lines = _check_columns(rows, row_lines, ["address", "mode", "pf_count", "latency"])
    events = []
    for row, lineno in zip(rows, row_lines):
        if len(row) != 4:
            raise FormatError("expected 4 fields", lineno)
        addr_s, mode, pf_s, lat_s = row
        try:
            addr = int(addr_s, 16)
            pf = int(pf_s)
            lat = int(lat_s)
        except ValueError as exc:
            raise FormatError(str(exc), lineno) from None
        if mode not in ("R", "W", "E"):
            raise FormatError(f"bad access mode {mode!r}", lineno)
        if addr % PAGE_SIZE:
            raise FormatError(f"address 0x{addr:x} not page aligned", lineno)
        events.append(StepEvent(page=addr // PAGE_SIZE, mode=mode, pf_count=pf, latency=lat))
    seed = meta.get("layout_seed")
    return SideChannelTrace(
        events=events,
        truth=None,
        layout_seed=int(seed) if seed is not None else None,
    )


def write_segments(
    path,
    segments,
    config_hash: str | None = None,
    layout_seed: int | None = None,
) -> None:
    """Trace rows annotated with the segment each event landed in."""
    with open(path, "w", newline="") as fh:
        fh.write("# optrace segments v1\n")
        if layout_seed is not None:
            fh.write(f"# layout_seed={layout_seed}\n")
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("segment_id,address,mode,pf_count,latency\n")
        for seg_id, seg in enumerate(segments):
            for ev in seg.events:
                fh.write(
                    f"{seg_id},0x{ev.page * PAGE_SIZE:x},{ev.mode},"
                    f"{ev.pf_count},{ev.latency}\n"
                )


def trace_meta(path) -> dict[str, str]:
    """Header key=value pairs of any trace-family file, without the rows."""
    tag, meta, _, _ = _split_file(path)
    meta["format"] = tag
    return meta


# ----------------------------------------------------------- truth labels


def write_truth(path, trace: SideChannelTrace, config_hash: str | None = None) -> None:
    if trace.truth is None:
        raise ValueError("trace carries no ground truth")
    with open(path, "w", newline="") as fh:
        fh.write("# optrace truth v1\n")
        if trace.layout_seed is not None:
            fh.write(f"# layout_seed={trace.layout_seed}\n")
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("boundary_index,label\n")
        for idx, label in trace.truth:
            fh.write(f"{idx},{_NULL_LABEL if label is None else label}\n")


def read_truth(path) -> tuple[list[tuple[int, str | None]], dict[str, str]]:
    tag, meta, rows, row_lines = _split_file(path)
    _check_tag(tag, "truth")
    rows, row_lines = _check_columns(rows, row_lines, ["boundary_index", "label"])
    truth: list[tuple[int, str | None]] = []
    for row, lineno in zip(rows, row_lines):
        if len(row) != 2:
            raise FormatError("expected 2 fields", lineno)
        try:
            idx = int(row[0])
        except ValueError as exc:
            raise FormatError(str(exc), lineno) from None
        label = None if row[1] == _NULL_LABEL else row[1]
        truth.append((idx, label))
    return truth, meta


# ----------------------------------------------------------- predictions


def write_predictions(
    path, predictions, config_hash: str | None = None, layout_seed: int | None = None
) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# optrace predictions v1\n")
        if layout_seed is not None:
            fh.write(f"# layout_seed={layout_seed}\n")
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("segment_id,label,score,margin\n")
        for p in predictions:
            label = _NULL_LABEL if p.label is None else p.label
            fh.write(f"{p.segment_id},{label},{p.score:.6f},{p.margin:.6f}\n")


def read_predictions(path) -> tuple[list[tuple[int, str | None, float, float]], dict[str, str]]:
    tag, meta, rows, row_lines = _split_file(path)
    _check_tag(tag, "predictions")
    rows, row_lines = _check_columns(rows, row_lines, ["segment_id", "label", "score", "margin"])
    out = []
    for row, lineno in zip(rows, row_lines):
        if len(row) != 4:
            raise FormatError("expected 4 fields", lineno)
        try:
            seg_id = int(row[0])
            score = float(row[2])
            margin = float(row[3])
        except ValueError as exc:
            raise FormatError(str(exc), lineno) from None
        label = None if row[1] == _NULL_LABEL else row[1]
        out.append((seg_id, label, score, margin))
    return out, meta


# --------------------------------------------------------- fingerprint DB


def write_db(path, db: FingerprintDb) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# optrace fingerprint-db v1\n")
        for key in sorted(db.meta):
            fh.write(f"# {key}={db.meta[key]}\n")
        for fp in db.entries:
            label = _NULL_LABEL if fp.label is None else fp.label
            fh.write(f"entry {label} support={fp.support}\n")
            fh.write(f"modes {fp.modes}\n")
            fh.write(f"classes {fp.classes}\n")
            fh.write(f"pf {','.join(str(v) for v in fp.pf)}\n")
            fh.write(f"latency {','.join(f'{v:.6f}' for v in fp.latency)}\n")
            fh.write("end\n")


def read_db(path) -> FingerprintDb:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "# optrace fingerprint-db v1":
        raise FormatError("missing '# optrace fingerprint-db v1' header", 1)
    meta: dict[str, str] = {}
    entries: list[Fingerprint] = []
    current: dict[str, object] | None = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if "=" in body:
                key, _, value = body.partition("=")
                meta[key.strip()] = value.strip()
            continue
        word, _, rest = line.partition(" ")
        if word == "entry":
            if current is not None:
                raise FormatError("entry before previous 'end'", lineno)
            name, _, support_part = rest.partition(" ")
            if not support_part.startswith("support="):
                raise FormatError("entry line needs 'support=<n>'", lineno)
            current = {
                "label": None if name == _NULL_LABEL else name,
                "support": int(support_part.removeprefix("support=")),
            }
        elif word in ("modes", "classes"):
            if current is None:
                raise FormatError(f"'{word}' outside entry", lineno)
            current[word] = rest.strip()
        elif word == "pf":
            if current is None:
                raise FormatError("'pf' outside entry", lineno)
            current["pf"] = tuple(int(v) for v in rest.split(",")) if rest else ()
        elif word == "latency":
            if current is None:
                raise FormatError("'latency' outside entry", lineno)
            current["latency"] = tuple(float(v) for v in rest.split(",")) if rest else ()
        elif word == "end":
            if current is None:
                raise FormatError("'end' outside entry", lineno)
            try:
                fp = Fingerprint(
                    label=current["label"],
                    modes=current["modes"],
                    classes=current["classes"],
                    pf=current["pf"],
                    latency=current["latency"],
                    support=current["support"],
                )
            except KeyError as exc:
                raise FormatError(f"entry missing field {exc}", lineno) from None
            if not (len(fp.modes) == len(fp.classes) == len(fp.pf) == len(fp.latency)):
                raise FormatError("channel lengths disagree", lineno)
            entries.append(fp)
            current = None
        else:
            raise FormatError(f"unknown directive {word!r}", lineno)
    if current is not None:
        raise FormatError("unterminated entry", len(lines))
    return FingerprintDb(entries=tuple(entries), meta=meta)


# ----------------------------------------------------------------- config

# One flat namespace of dotted keys; values are coerced to the default's type.
DEFAULT_CONFIG: dict[str, object] = {
    "noise.latency_jitter_sigma": 60.0,
    "noise.apic_quantum": 35,
    "noise.ctx_switch_rate": 1953 / 10_000_000,
    "noise.ctx_switch_extra_steps_mean": 2258.0,
    "noise.multistep_prob": 10 / 2_810_963_156,
    "layout.stack_pages": 2,
    "layout.bytecode_pages": 2,
    "layout.linear_pages": 2,
    "layout.span": 1 << 20,
    "mitigation.nop_insertion_prob": 0.0,
    "mitigation.shuffle_handlers": False,
    "mitigation.variant_count": 1,
    "preprocess.coverage_target": 0.95,
    "preprocess.window": 16,
    "preprocess.min_rw_frac": 0.005,
    "match.channels": "mode,class,pf,latency",
}


def _coerce(key: str, raw: str, default) -> object:
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    config = dict(DEFAULT_CONFIG)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        config[key] = _coerce(key, value, DEFAULT_CONFIG[key])
    return config


def load_config(path=None) -> dict[str, object]:
    if path is None:
        return dict(DEFAULT_CONFIG)
    return parse_config_text(Path(path).read_text())


def write_config(path, config: dict[str, object]) -> None:
    with open(path, "w") as fh:
        for key in sorted(config):
            fh.write(f"{key} = {config[key]}\n")


def config_hash(config: dict[str, object]) -> str:
    """Short digest identifying a configuration, for replay checks."""
    canon = "\n".join(f"{k}={config[k]!r}" for k in sorted(config))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
