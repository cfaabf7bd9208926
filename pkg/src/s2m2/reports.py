"""Report emission: a fixed-width text table plus a JSON-lines record stream.

Wall-clock fields never enter the table or the record stream; they go to a
separate ``<stem>.timing.jsonl`` file so the main outputs are byte-stable.
"""

from __future__ import annotations

import json
from pathlib import Path

TIMING_KEYS = ("wall_ms",)
FORMATS = ("table", "jsonl")


def split_timing(record: dict) -> tuple[dict, dict]:
    stable = {k: v for k, v in record.items() if k not in TIMING_KEYS}
    timing = {k: v for k, v in record.items() if k in TIMING_KEYS}
    return stable, timing


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, (list, tuple)):
        return " ".join(_cell(v) for v in value)
    return str(value)


def format_table(records: list[dict], columns: list[str] | None = None) -> str:
    """Left-aligned text table over ``columns`` (default: every key, in first-seen order)."""
    if not records:
        return ""
    if columns is None:
        columns = list(dict.fromkeys(k for r in records for k in r if k not in TIMING_KEYS))
    rows = [[_cell(r.get(c, "")) for c in columns] for r in records]
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def format_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r) + "\n" for r in records)


def mean_ci(mean: float, ci: float) -> str:
    """Accuracy in percent as 'mean ± ci95', two decimals."""
    return f"{100.0 * mean:.2f} ± {100.0 * ci:.2f}"


def emit_report(records: list[dict], out_dir, stem: str, formats=FORMATS, table: str | None = None) -> list[Path]:
    """Write ``<stem>.txt`` and/or ``<stem>.jsonl`` (one line per record) under ``out_dir``.

    Timing fields are diverted to ``<stem>.timing.jsonl``. ``table`` replaces
    the default table rendering. Returns the written paths.
    """
    for f in formats:
        if f not in FORMATS:
            raise ValueError(f"unknown report format {f!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = [split_timing(r) for r in records]
    stable = [s for s, _ in pairs]
    written = []
    if "table" in formats:
        path = out_dir / f"{stem}.txt"
        path.write_text(table if table is not None else format_table(stable), encoding="utf-8")
        written.append(path)
    if "jsonl" in formats:
        path = out_dir / f"{stem}.jsonl"
        path.write_text(format_jsonl(stable), encoding="utf-8")
        written.append(path)
    if any(t for _, t in pairs):
        path = out_dir / f"{stem}.timing.jsonl"
        path.write_text(format_jsonl([t for _, t in pairs]), encoding="utf-8")
        written.append(path)
    return written
