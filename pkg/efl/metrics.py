"""
TrainReport as CSV: round,loss,accuracy,duration_ms with fixed decimals, then
a trailing comment line with the final params digest, or `# ABORT <code>` for
a run that stopped early.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable

from orchestration import TrainReport
from protocol import RoundMetrics

logger = logging.getLogger(__name__)

HEADER = "round,loss,accuracy,duration_ms"


def format_row(row: RoundMetrics, with_duration: bool = True) -> str:
    line = f"{row.round},{row.loss:.8f},{row.accuracy:.6f}"
    return f"{line},{row.duration_ms:.3f}" if with_duration else line


def format_rows(rows: Iterable[RoundMetrics], with_duration: bool = True) -> list[str]:
    return [format_row(row, with_duration) for row in rows]


def format_metrics(report: TrainReport) -> str:
    lines = [HEADER, *format_rows(report.rows)]
    if report.aborted:
        lines.append(f"# ABORT {report.abort_code}")
    else:
        lines.append(f"# params_digest={report.params_digest.hex()}")
    return "\n".join(lines) + "\n"


def emit_metrics(report: TrainReport, path) -> Path:
    """Write the report CSV; OSError propagates for unwritable paths."""
    path = Path(path)
    path.write_text(format_metrics(report), encoding="utf-8")
    logger.info("wrote %d metric rows to %s", len(report.rows), path)
    return path
