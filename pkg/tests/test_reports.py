import json

import pytest
from hypothesis import given, settings, strategies as st

from s2m2.reports import emit_report, format_table, mean_ci, split_timing

RECORDS = [{"epoch": 1, "phase": 1, "loss": 1.25, "wall_ms": 310.2},
           {"epoch": 2, "phase": 2, "loss": 0.875, "val_acc": 0.5, "wall_ms": 290.0}]


def test_repeated_emission_identical_bytes(tmp_path):
    first = [p.read_bytes() for p in emit_report(RECORDS, tmp_path / "a", "r")]
    second = [p.read_bytes() for p in emit_report(RECORDS, tmp_path / "b", "r")]
    assert first == second


def test_timing_isolated(tmp_path):
    paths = {p.name: p for p in emit_report(RECORDS, tmp_path, "r")}
    assert set(paths) == {"r.txt", "r.jsonl", "r.timing.jsonl"}
    assert "wall_ms" not in paths["r.txt"].read_text()
    assert "wall_ms" not in paths["r.jsonl"].read_text()
    assert [json.loads(line) for line in paths["r.timing.jsonl"].read_text().splitlines()] == \
        [{"wall_ms": 310.2}, {"wall_ms": 290.0}]


def test_no_timing_file_without_timing(tmp_path):
    paths = emit_report([{"a": 1}], tmp_path, "r")
    assert [p.name for p in paths] == ["r.txt", "r.jsonl"]


@given(st.integers(0, 40))
@settings(max_examples=20, deadline=None)
def test_jsonl_one_line_per_record(n):
    import tempfile
    records = [{"task": t, "accuracy": t / 40} for t in range(n)]
    with tempfile.TemporaryDirectory() as d:
        (path,) = emit_report(records, d, "tasks", formats=("jsonl",))
        assert len(path.read_text().splitlines()) == n


def test_table_union_of_columns():
    text = format_table([{"a": 1}, {"a": 2, "b": 0.5}])
    header, rule, *rows = text.splitlines()
    assert header.split() == ["a", "b"]
    assert rows[1].split() == ["2", "0.5000"]


@pytest.mark.parametrize("mean, ci, text", [
    (0.5, 0.0196, "50.00 ± 1.96"),
    (0.64934, 0.0018, "64.93 ± 0.18"),
    (1.0, 0.0, "100.00 ± 0.00"),
])
def test_mean_ci_two_decimals(mean, ci, text):
    assert mean_ci(mean, ci) == text


def test_split_timing():
    assert split_timing({"x": 1, "wall_ms": 2}) == ({"x": 1}, {"wall_ms": 2})


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(RECORDS, tmp_path, "r", formats=("csv",))
