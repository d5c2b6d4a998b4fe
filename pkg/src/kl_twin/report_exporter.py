"""Report exporter: writes an ErrorReport as CSV, JSON or a formatted .xlsx file."""

from __future__ import annotations
import csv
import json
import logging
from pathlib import Path
from typing import Iterable, Literal

from openpyxl import Workbook
from openpyxl.worksheet.worksheet import Worksheet
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from .errors import InvalidArgumentError
from .harness import ProfileRecord
from .models import ErrorReport, ErrorRow

log = logging.getLogger(__name__)

ReportFormat = Literal["csv", "json", "xlsx"]

# Published values are reproduced when measured / expected is within this factor
TOLERANCE_FACTOR = 3.0

# Column definitions: (header label, attribute on ErrorRow, width, number format)
_COLUMNS: list[tuple[str, str, int, str | None]] = [
    ("Experiment",  "experiment",     14, None),
    ("Condition",   "condition",      16, None),
    ("Method",      "method",         14, None),
    ("sigma2_y",    "sigma2_y",       10, "0.0#"),
    ("alpha",       "alpha",           8, "0.0#"),
    ("beta",        "beta",            8, "0.0#"),
    ("gamma",       "gamma",           8, "0.0##"),
    ("N_train_t",   "n_train_target", 10, "0"),
    ("Mean error",  "mean_error",     14, "0.00E+00"),
    ("Std error",   "std_error",      14, "0.00E+00"),
    ("Samples",     "n_samples",       9, "0"),
    ("Seed",        "seed",            9, "0"),
    ("Expected",    "expected",       14, "0.00E+00"),
    ("Ratio",       "ratio",          10, "0.00"),
]

# Ratio bands: within tolerance, too small, too large
_BAND_FILL = {"within": "D9EAD3", "below": "FCE4D6", "above": "F4CCCC"}
_BLOCK_SHADES = ("FFFFFF", "F3F3F3")
_INK = "1C2833"
_GRID = Side(style="hair", color="A6ACAF")


def _row_values(row: ErrorRow) -> list[object]:
    return [getattr(row, attr) for _, attr, _, _ in _COLUMNS]


def ratio_band(ratio: float | None) -> str | None:
    """'within', 'below' or 'above' the x TOLERANCE_FACTOR band; None without a published value."""
    if ratio is None:
        return None
    if ratio < 1 / TOLERANCE_FACTOR:
        return "below"
    return "above" if ratio > TOLERANCE_FACTOR else "within"


# ── CSV / JSON ────────────────────────────────────────────────────────────────

def write_csv(report: ErrorReport, path: Path) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([attr for _, attr, _, _ in _COLUMNS])
        for row in report.rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in _row_values(row)])
    return path


def write_json(report: ErrorReport, path: Path) -> Path:
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2), encoding="utf-8")
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ── XLSX ──────────────────────────────────────────────────────────────────────

def write_xlsx(report: ErrorReport, path: Path) -> Path:
    """
    One sheet "Errors": caption in row 1, header in row 2, one row per ErrorRow.
    Rows of the same experiment share a shade; the Ratio cell is filled by its band.
    """
    wb = Workbook()
    ws: Worksheet = wb.worksheets[0]
    ws.title = "Errors"
    n_cols = len(_COLUMNS)
    frame = Border(bottom=_GRID)

    ws.merge_cells(start_row=1, start_column=1, end_row=1, end_column=n_cols)
    caption = ws.cell(row=1, column=1, value=f"Relative errors: {report.experiment} ({report.created})")
    caption.font = Font(bold=True, size=12, color=_INK)
    caption.alignment = Alignment(horizontal="left", vertical="center")

    for col_idx, (label, _, width, _) in enumerate(_COLUMNS, start=1):
        cell = ws.cell(row=2, column=col_idx, value=label)
        cell.font = Font(bold=True, size=10, color=_INK)
        cell.alignment = Alignment(horizontal="center", wrap_text=True)
        cell.border = Border(top=Side(style="thin", color=_INK), bottom=Side(style="thin", color=_INK))
        ws.column_dimensions[get_column_letter(col_idx)].width = width

    block, previous = -1, None
    for row_idx, row in enumerate(report.rows, start=3):
        if row.experiment != previous:
            block, previous = block + 1, row.experiment
        shade = PatternFill("solid", fgColor=_BLOCK_SHADES[block % 2])
        for col_idx, ((_, attr, _, number_format), value) in enumerate(zip(_COLUMNS, _row_values(row)), start=1):
            cell = ws.cell(row=row_idx, column=col_idx, value=value)
            cell.font = Font(size=10, color=_INK)
            cell.border = frame
            cell.fill = shade
            if number_format is not None:
                cell.number_format = number_format
        band = ratio_band(row.ratio)
        if band is not None:
            ws.cell(row=row_idx, column=n_cols).fill = PatternFill("solid", fgColor=_BAND_FILL[band])

    last_data_row = 2 + len(report.rows)
    ws.auto_filter.ref = f"A2:{get_column_letter(n_cols)}{last_data_row}"
    ws.freeze_panes = "A3"

    bands = [ratio_band(r.ratio) for r in report.rows if r.ratio is not None]
    note = ws.cell(
        row=last_data_row + 2,
        column=1,
        value=f"Rows: {len(report.rows)}  |  within x{TOLERANCE_FACTOR:g}: {bands.count('within')}/{len(bands)}",
    )
    note.font = Font(italic=True, size=9, color="7F8C8D")

    wb.save(path)
    return path


# ── Entry points ──────────────────────────────────────────────────────────────

def export(report: ErrorReport, out_dir: Path, fmt: ReportFormat = "csv", stem: str | None = None) -> list[Path]:
    """
    Write the report in fmt and always a JSON mirror next to it; returns the written paths.
    """
    if fmt not in ("csv", "json", "xlsx"):
        raise InvalidArgumentError(f"unknown report format {fmt!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"report_{report.experiment}"
    paths = [write_json(report, out_dir / f"{stem}.json")]
    if fmt == "csv":
        paths.insert(0, write_csv(report, out_dir / f"{stem}.csv"))
    elif fmt == "xlsx":
        paths.insert(0, write_xlsx(report, out_dir / f"{stem}.xlsx"))
    for p in paths:
        log.info("wrote %s", p)
    return paths


def export_profiles(profiles: Iterable[ProfileRecord], path: Path) -> Path:
    """Long-format CSV of reference/prediction profiles: one line per (record, x)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["experiment", "condition", "method", "n_train_target", "time", "x", "reference", "prediction"])
        for p in profiles:
            for x, ref, pred in zip(p.x, p.reference, p.prediction):
                writer.writerow([p.experiment, p.condition, p.method, p.n_train_target,
                                 repr(p.time), repr(x), repr(ref), repr(pred)])
    return path
