"""Text and CSV rendering of segmentation reports.

Two layouts, chosen automatically: a grouped table with a Dataset column
(rows are dataset/model pairs, repeated dataset cells left blank) and a
flat model-only table when every row shares one dataset label. Columns
are always mIoU, mAcc, mDice with two-decimal percent values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import InputError
from .metrics import SegReport, format_percent

COLUMNS = ("mIoU", "mAcc", "mDice")


@dataclass(frozen=True)
class ReportRow:
    """One table row; metric values are percentages."""

    dataset: str
    model: str
    miou: float
    macc: float
    mdice: float

    @classmethod
    def from_report(cls, report: SegReport) -> "ReportRow":
        return cls(
            dataset=report.dataset,
            model=report.model,
            miou=report.mean_iou * 100,
            macc=report.mean_acc * 100,
            mdice=report.mean_dice * 100,
        )

    def cells(self) -> tuple[str, str, str]:
        return (format_percent(self.miou), format_percent(self.macc), format_percent(self.mdice))


def _render(headers: list[str], body: list[list[str]]) -> str:
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
    def line(cells: list[str]) -> str:
        return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(headers), sep] + [line(row) for row in body]) + "\n"


def render_table(rows: Sequence[ReportRow]) -> str:
    """Render rows in the published comparison style."""
    if not rows:
        raise InputError("no rows to render")
    datasets = {r.dataset for r in rows}
    grouped = len(datasets) > 1 or (len(datasets) == 1 and next(iter(datasets)) != "")
    body: list[list[str]] = []
    if grouped and len(datasets) > 1:
        previous = object()
        for row in rows:
            label = row.dataset if row.dataset != previous else ""
            body.append([label, row.model, *row.cells()])
            previous = row.dataset
        return _render(["Dataset", "Model", *COLUMNS], body)
    if grouped:
        for row in rows:
            body.append([row.dataset, row.model, *row.cells()])
        return _render(["Dataset", "Model", *COLUMNS], body)
    for row in rows:
        body.append([row.model, *row.cells()])
    return _render(["Model", *COLUMNS], body)


def render_csv(rows: Sequence[ReportRow]) -> str:
    """Delimited form of the same table; dataset column always present."""
    if not rows:
        raise InputError("no rows to render")
    lines = ["dataset,model,miou,macc,mdice"]
    for row in rows:
        lines.append(",".join([row.dataset, row.model, *row.cells()]))
    return "\n".join(lines) + "\n"


def write_report_files(report: SegReport, out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    """Write report.json / report.csv / report.txt (and a score-curve PNG)
    into ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    row = ReportRow.from_report(report)
    paths = {
        "json": out / "report.json",
        "csv": out / "report.csv",
        "txt": out / "report.txt",
    }
    report.save_json(paths["json"])
    paths["csv"].write_text(render_csv([row]))
    paths["txt"].write_text(render_table([row]))
    if figures:
        from .figures import save_score_curve

        paths["figure"] = out / "scores.png"
        save_score_curve(report, paths["figure"])
    return paths
