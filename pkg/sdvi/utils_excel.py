"""
Excel export utilities.

Functions for generating a workbook report of a fitted run.
"""
import math
from io import BytesIO
from typing import Any, Dict, List, Optional

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter


HEADER_FILL = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
HEADER_FONT = Font(bold=True, color="FFFFFF", size=11)
HEADER_ALIGNMENT = Alignment(horizontal="center", vertical="center")
BORDER = Border(left=Side(style="thin"), right=Side(style="thin"), top=Side(style="thin"),
                bottom=Side(style="thin"))


def _cell_value(value: Any) -> Any:
    # xlsx has no representation for inf/nan
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if value is None:
        return "-"
    return value


def _write_table(ws, headers: List[str], rows: List[List[Any]], start_row: int, widths: List[int]) -> int:
    for col_num, header in enumerate(headers, 1):
        cell = ws.cell(row=start_row, column=col_num, value=header)
        cell.fill = HEADER_FILL
        cell.font = HEADER_FONT
        cell.alignment = HEADER_ALIGNMENT
        cell.border = BORDER
    row_num = start_row + 1
    for row in rows:
        for col_num, value in enumerate(row, 1):
            cell = ws.cell(row=row_num, column=col_num, value=_cell_value(value))
            cell.border = BORDER
            if isinstance(value, float) and math.isfinite(value):
                cell.number_format = "0.0000"
                cell.alignment = Alignment(horizontal="right")
        row_num += 1
    for col_num, width in enumerate(widths, 1):
        ws.column_dimensions[get_column_letter(col_num)].width = width
    ws.row_dimensions[start_row].height = 20
    return row_num


def generate_run_xlsx(result: Dict[str, Any], ledger: List[Dict[str, Any]],
                      eval_rows: Optional[List[Dict[str, Any]]] = None) -> bytes:
    """
    Generate Excel report of a fitted run.

    Args:
        result: Contents of result.json
        ledger: Successive-halving ledger rows
        eval_rows: Optional metric/value rows from eval_metrics.csv

    Returns:
        Excel file as bytes
    """
    wb = Workbook()
    ws = wb.active
    ws.title = "Summary"

    ws.merge_cells("A1:F1")
    title_cell = ws["A1"]
    title_cell.value = f"SDVI run report - {result.get('model', '')}"
    title_cell.font = Font(bold=True, size=14)
    title_cell.alignment = Alignment(horizontal="center", vertical="center")
    ws.row_dimensions[1].height = 25

    ws.cell(row=3, column=1, value="Global ELBO:").font = Font(bold=True)
    ws.cell(row=3, column=2, value=_cell_value(result.get("global_elbo"))).font = Font(bold=True)
    ws.cell(row=4, column=1, value="SLPs:").font = Font(bold=True)
    ws.cell(row=4, column=2, value=len(result.get("slps", [])))

    if eval_rows:
        _write_table(ws, ["Metric", "Value"], [[r["metric"], r["value"]] for r in eval_rows], 6, [30, 30])
    else:
        for col_num, width in enumerate([30, 30], 1):
            ws.column_dimensions[get_column_letter(col_num)].width = width

    slp_ws = wb.create_sheet(title="SLPs")
    rows = []
    for slp in result.get("slps", []):
        estimate = slp.get("estimate", {})
        rows.append([
            slp["index"],
            slp.get("summary", ""),
            slp.get("weight"),
            estimate.get("value"),
            estimate.get("std_error"),
            slp.get("acceptance_rate"),
            len(slp.get("path", [])),
        ])
    _write_table(slp_ws, ["SLP", "Structure", "Weight", "Local ELBO", "Std. error", "Acceptance", "Sites"],
                 rows, 1, [8, 40, 12, 14, 12, 12, 8])

    ledger_ws = wb.create_sheet(title="Ledger")
    headers = ["run", "phase", "slp_index", "iterations", "cumulative_iterations", "surrogate_elbo", "score",
               "active"]
    _write_table(ledger_ws, headers, [[_coerce(row.get(h)) for h in headers] for row in ledger], 1,
                 [8, 8, 10, 12, 22, 16, 12, 8])

    output = BytesIO()
    wb.save(output)
    output.seek(0)
    return output.getvalue()


def _coerce(value: Any) -> Any:
    """CSV cells come back as strings; numeric ones are restored."""
    if not isinstance(value, str):
        return value
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value
