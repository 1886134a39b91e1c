"""Render results files as a sorted text table plus a machine-readable record file.

Numbers are carried as the exact strings found in the inputs, so the table
never re-rounds anything.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .downstream import RESULT_COLUMNS
from .errors import DataError, ParseError
from .fileio import atomic_write_text


@dataclass(frozen=True)
class ReportRow:
    m: int
    n: int
    accuracy: str
    train_time: str
    param_count: str


@dataclass(frozen=True)
class ResultRow:
    config_hash: str
    m: int
    n: int
    seed: int
    train_acc: str
    test_acc: str
    wall_time: str


def _check_float(path, line_no, name, text) -> str:
    try:
        float(text)
    except ValueError:
        raise ParseError(path, line_no, f"{name} is not a number: {text!r}") from None
    return text


def read_results(path) -> list[ResultRow]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing results file {path}")
    rows = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(RESULT_COLUMNS):
            raise ParseError(path, line_no, f"expected {len(RESULT_COLUMNS)} fields, got {len(parts)}")
        chash, m, n, seed, train_acc, test_acc, wall = parts
        try:
            m_i, n_i, seed_i = int(m), int(n), int(seed)
        except ValueError:
            raise ParseError(path, line_no, "m, n and seed must be integers") from None
        rows.append(ResultRow(chash, m_i, n_i, seed_i, _check_float(path, line_no, "train_acc", train_acc),
                              _check_float(path, line_no, "test_acc", test_acc),
                              _check_float(path, line_no, "wall_time", wall)))
    return rows


def render_table(rows) -> str:
    """Fixed-width text table of dataclass rows, sorted by (m, n) with a stable tie order."""
    if not rows:
        raise DataError("nothing to report: no result rows")
    names = [f.name for f in fields(rows[0])]
    ordered = sorted(rows, key=lambda r: (r.m, r.n))
    cells = [names] + [[str(getattr(r, k)) for k in names] for r in ordered]
    widths = [max(len(row[i]) for row in cells) for i in range(len(names))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report_records(path, rows, config_hash: str | None = None) -> None:
    if not rows:
        raise DataError("nothing to report: no result rows")
    names = [f.name for f in fields(rows[0])]
    head = "# mmq-report v1" + (f" config_hash={config_hash}" if config_hash else "")
    lines = [head, "# " + "\t".join(names)]
    for r in sorted(rows, key=lambda r: (r.m, r.n)):
        lines.append("\t".join(str(getattr(r, k)) for k in names))
    atomic_write_text(path, "\n".join(lines) + "\n")


def report_render(paths, out_table=None, out_records=None) -> str:
    """Merge results files; returns the rendered table and optionally writes both outputs."""
    rows = [row for p in paths for row in read_results(p)]
    table = render_table(rows)
    if out_table is not None:
        atomic_write_text(out_table, table)
    if out_records is not None:
        write_report_records(out_records, rows)
    return table
