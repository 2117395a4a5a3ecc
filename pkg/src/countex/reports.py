"""CSV emitters for evaluation outputs.

All floats go through the 17-significant-digit formatter, newlines are always
'\n', and rows follow input order, so identical runs produce byte-identical
files.
"""

from __future__ import annotations

from .heads import LossBreakdown
from .jsonio import format_float
from .training import EvalReport

CURVE_HEADER = "step,L_cls,L_loc,L_den,L_share,L_div,total"


def _write_lines(path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_eval_csv(reports: list[EvalReport], path) -> None:
    lines = ["metric,value,modality_mask,tau,seed"]
    for report in reports:
        for metric, value in (("mae", report.mae), ("rmse", report.rmse), ("nae", report.nae)):
            lines.append(
                f"{metric},{format_float(value)},{report.modality_mask},"
                f"{format_float(report.tau)},{report.seed}"
            )
    _write_lines(path, lines)


def write_per_scene_csv(report: EvalReport, path) -> None:
    lines = ["scene_id,gt,pred"]
    for scene_id, gt, pred in report.per_scene:
        lines.append(f"{scene_id},{gt},{pred}")
    _write_lines(path, lines)


def write_curve_csv(curve: list[LossBreakdown], path) -> None:
    lines = [CURVE_HEADER]
    for step, row in enumerate(curve):
        vals = row.as_row()
        lines.append(
            f"{step}," + ",".join(format_float(vals[k]) for k in CURVE_HEADER.split(",")[1:])
        )
    _write_lines(path, lines)


def write_predictions_csv(rows: list[tuple[str, int, float, float, float]], path) -> None:
    lines = ["scene_id,query_index,row,col,score"]
    for scene_id, q, r, c, s in rows:
        lines.append(f"{scene_id},{q},{format_float(r)},{format_float(c)},{format_float(s)}")
    _write_lines(path, lines)
