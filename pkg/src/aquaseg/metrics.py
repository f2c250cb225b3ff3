"""DSC / mIoU evaluation and Table-style comparison reports.

Scores are computed at original image resolution against the full-resolution
ground truth, with unperturbed tight boxes as evaluation prompts.  Per-task
means are reported as percentages; a baseline's rows can be ingested from CSV
to fill the comparison and improvement columns.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoder import binarize, upsample_logits
from .errors import ValidationError
from .prompts import tight_box


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return int(np.logical_and(p, g).sum()), int(p.sum()), int(g.sum())


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity 2|P & G| / (|P| + |G|); both empty -> 1.0."""
    inter, n_p, n_g = _counts(pred, gt)
    if n_p == 0 and n_g == 0:
        return 1.0
    return 2.0 * inter / (n_p + n_g)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Jaccard index |P & G| / |P | G|; both empty -> 1.0."""
    inter, n_p, n_g = _counts(pred, gt)
    union = n_p + n_g - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class MetricsRow:
    """Per-task means (percent, full precision) over a test split."""

    task: str
    mean_dsc: float
    mean_iou: float
    n_samples: int


@dataclass
class TargetScore:
    image_id: str
    class_code: str
    dsc: float
    iou: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    baseline: list[MetricsRow] | None = None
    iou_mode: str = "foreground"
    metadata: dict = field(default_factory=dict)


def evaluate(
    pipeline,
    test_keys: list[tuple[str, str]],
    embeddings,
    data,
    task_order: list[str],
    iou_mode: str = "foreground",
) -> tuple[list[MetricsRow], list[TargetScore]]:
    """Score every test target and aggregate per task.

    ``data`` provides ``resized_mask(key)``, ``original_mask(key)``, and
    ``original_size(image_id)``.  ``iou_mode`` is "foreground" (IoU of the
    foreground class, the default reading) or "macro" (mean of foreground and
    background IoU).  Aggregation order is fixed, so results do not depend on
    any evaluation parallelism.
    """
    if iou_mode not in ("foreground", "macro"):
        raise ValidationError(f"iou_mode must be 'foreground' or 'macro', got {iou_mode!r}")

    rank = {code: i for i, code in enumerate(task_order)}
    unknown = sorted({k[1] for k in test_keys} - set(rank))
    if unknown:
        raise ValidationError(f"test keys reference unknown tasks: {unknown}")

    scores: list[TargetScore] = []
    for image_id, code in sorted(test_keys, key=lambda k: (rank[k[1]], k[0])):
        resized = data.resized_mask((image_id, code))
        logits = pipeline.predict_logits(embeddings.grid(image_id), tight_box(resized))
        pred = binarize(upsample_logits(logits, data.original_size(image_id)))
        gt = data.original_mask((image_id, code))
        if iou_mode == "foreground":
            sample_iou = iou(pred, gt)
        else:
            sample_iou = 0.5 * (iou(pred, gt) + iou(1 - pred, 1 - gt))
        scores.append(TargetScore(image_id, code, dsc(pred, gt), sample_iou))

    rows = []
    for code in task_order:
        task_scores = [s for s in scores if s.class_code == code]
        if not task_scores:
            continue
        rows.append(
            MetricsRow(
                task=code,
                mean_dsc=100.0 * float(np.mean([s.dsc for s in task_scores])),
                mean_iou=100.0 * float(np.mean([s.iou for s in task_scores])),
                n_samples=len(task_scores),
            )
        )
    return rows, scores


def relative_improvement(new: float, old: float) -> float | None:
    """100 * (new - old) / old, or None (rendered blank) when old <= 0."""
    if old <= 0:
        return None
    return 100.0 * (new - old) / old


def _round2(x: float) -> float:
    return float(f"{x:.2f}")


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.2f}"


def _report_table(
    rows: list[MetricsRow], baseline_rows: list[MetricsRow] | None
) -> tuple[list[str], list[list[str]]]:
    if baseline_rows is None:
        header = ["Task", "DSC", "IoU"]
        cells = [[r.task, _fmt(r.mean_dsc), _fmt(r.mean_iou)] for r in rows]
    else:
        base = {r.task: r for r in baseline_rows}
        if sorted(base) != sorted(r.task for r in rows):
            raise ValidationError(
                f"baseline tasks {sorted(base)} do not match report tasks "
                f"{sorted(r.task for r in rows)}"
            )
        header = ["Task", "DSC_new", "DSC_base", "DSC_improve", "IoU_new", "IoU_base", "IoU_improve"]
        cells = []
        for r in rows:
            b = base[r.task]
            cells.append([
                r.task,
                _fmt(r.mean_dsc), _fmt(b.mean_dsc), _fmt(relative_improvement(r.mean_dsc, b.mean_dsc)),
                _fmt(r.mean_iou), _fmt(b.mean_iou), _fmt(relative_improvement(r.mean_iou, b.mean_iou)),
            ])

    # Summary means are taken over the printed two-decimal values, so a reader
    # re-doing the column arithmetic lands on the same numbers.
    summary = ["MEAN"]
    for col in range(1, len(header)):
        printed = [float(row[col]) for row in cells if row[col] != ""]
        summary.append(_fmt(_round2(float(np.mean(printed)))) if printed else "")
    return header, cells + [summary]


def render_report(
    rows: list[MetricsRow],
    baseline_rows: list[MetricsRow] | None = None,
    fmt: str = "csv",
) -> str:
    """Render the comparison table; byte-deterministic for identical inputs."""
    if fmt not in ("csv", "markdown"):
        raise ValidationError(f"report format must be 'csv' or 'markdown', got {fmt!r}")
    header, table = _report_table(rows, baseline_rows)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(table)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(row) + " |" for row in table]
    return "\n".join(lines) + "\n"


def load_baseline_csv(path: str | Path) -> list[MetricsRow]:
    """Read baseline rows from a CSV with columns task,dsc,iou."""
    path = Path(path)
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"task", "dsc", "iou"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValidationError(
                f"{path}: baseline CSV must have columns task,dsc,iou, got {reader.fieldnames}"
            )
        for line in reader:
            rows.append(MetricsRow(line["task"], float(line["dsc"]), float(line["iou"]), 0))
    if not rows:
        raise ValidationError(f"{path}: baseline CSV has no rows")
    return rows


@dataclass
class AuditCell:
    label: str
    computed: float
    printed: float

    @property
    def delta(self) -> float:
        return abs(self.computed - self.printed)


@dataclass
class AuditResult:
    matched: list[AuditCell]
    deviating: list[AuditCell]
    tolerance: float
    mean_printed: float

    def text(self) -> str:
        lines = [
            f"improvement audit: {len(self.matched)}/{len(self.matched) + len(self.deviating)} "
            f"cells within +/-{self.tolerance}",
            f"mean of printed improvements: {self.mean_printed:.2f}",
        ]
        for cell in self.deviating:
            lines.append(
                f"  DEVIATES {cell.label}: computed {cell.computed:.2f} vs printed "
                f"{cell.printed:.2f} (|delta| = {cell.delta:.2f})"
            )
        return "\n".join(lines)


def audit_improvements(
    cells: list[tuple[str, float, float, float]],
    tolerance: float = 0.3,
) -> AuditResult:
    """Check published (new, old, printed improvement) triples.

    Each cell is (label, new, old, printed).  A cell matches when the
    recomputed relative improvement, rounded to two decimals, lands within
    ``tolerance`` of the printed value; the rest are reported, not matched.
    """
    matched, deviating = [], []
    for label, new, old, printed in cells:
        value = relative_improvement(new, old)
        if value is None:
            raise ValidationError(f"audit cell {label}: baseline {old} is not positive")
        cell = AuditCell(label, _round2(value), printed)
        (matched if cell.delta <= tolerance else deviating).append(cell)
    mean_printed = _round2(float(np.mean([c[3] for c in cells])))
    return AuditResult(matched, deviating, tolerance, mean_printed)
