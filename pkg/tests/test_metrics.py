import pytest

from metrics import HEADER, emit_metrics, format_metrics, format_row
from orchestration import TrainReport
from protocol import AbortCode, RoundMetrics

ROWS = (RoundMetrics(0, 0.6931471805599453, 0.5, 12.3456), RoundMetrics(1, 0.5, 0.75, 10.0))


def test_rows_use_fixed_decimals():
    assert format_row(ROWS[0]) == "0,0.69314718,0.500000,12.346"
    assert format_row(ROWS[1], with_duration=False) == "1,0.50000000,0.750000"
    assert format_row(RoundMetrics(2, 0.1, float("nan"))) == "2,0.10000000,nan,0.000"


def test_completed_run_ends_with_the_digest():
    report = TrainReport(node="ps", rows=ROWS, params_digest=bytes(range(32)))
    lines = format_metrics(report).splitlines()
    assert lines[0] == HEADER == "round,loss,accuracy,duration_ms"
    assert len(lines) == 4
    assert lines[-1] == "# params_digest=" + bytes(range(32)).hex()


def test_aborted_run_ends_with_the_code():
    report = TrainReport(node="ps", rows=ROWS[:1], abort_code=int(AbortCode.TIMEOUT), abort_detail="late")
    assert format_metrics(report).splitlines()[-1] == "# ABORT 8"


def test_emit_writes_the_file(tmp_path):
    report = TrainReport(node="ps", rows=ROWS, params_digest=b"\x00" * 32)
    path = emit_metrics(report, tmp_path / "metrics.csv")
    assert path.read_text(encoding="utf-8") == format_metrics(report)
    with pytest.raises(OSError):
        emit_metrics(report, tmp_path / "missing" / "metrics.csv")
