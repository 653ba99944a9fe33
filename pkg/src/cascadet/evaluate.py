"""Detection/classification evaluation: matching, confusion counts, metrics.

Detections are matched to ground truth per frame by greedy IoU assignment
in descending face-score order. The face task counts TP/FP/FN (TN is fixed
at 0: pure detection has no true-negative unit); the mask task scores label
agreement over matched pairs with Mask as the positive class. Metrics are
percentages; a zero denominator yields None ("undefined"), never a number.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .classifier import MaskLabel
from .detector import BoundingBox, iou
from .pipeline import Detection

DEFAULT_IOU_THRESHOLD = 0.5
UNDEFINED = "undefined"


@dataclass(frozen=True)
class GroundTruthEntry:
    frame_index: int
    box: BoundingBox
    label: MaskLabel


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")


@dataclass(frozen=True)
class Metrics:
    """Percentages, or None where the denominator is zero."""
    precision: float | None
    recall: float | None
    accuracy: float | None


@dataclass(frozen=True)
class EvalReport:
    face_counts: ConfusionCounts
    mask_counts: ConfusionCounts
    face: Metrics
    mask: Metrics


@dataclass(frozen=True)
class BaselineRow:
    """A comparison row shipped from published literature, not measured."""
    name: str
    face: Metrics | None = None
    mask: Metrics | None = None


# Published comparison figures, shipped as data for report rendering.
LITERATURE_BASELINES: tuple[BaselineRow, ...] = (
    BaselineRow(
        name="Reference MTCNN+MobileNetV2 pipeline",
        face=Metrics(precision=94.50, recall=86.38, accuracy=81.84),
        mask=Metrics(precision=84.39, recall=80.92, accuracy=81.74)),
    BaselineRow(
        name="Cascaded framework for mask detection",
        mask=Metrics(precision=None, recall=87.8, accuracy=86.6)),
    BaselineRow(
        name="RetinaFaceMask with MobileNet",
        face=Metrics(precision=83.0, recall=95.6, accuracy=None),
        mask=Metrics(precision=82.3, recall=89.1, accuracy=None)),
)


def match_detections(detections: list[Detection],
                     truths: list[GroundTruthEntry],
                     iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                     ) -> tuple[ConfusionCounts, ConfusionCounts]:
    """Greedy per-frame matching; returns (face counts, mask counts).

    Within a frame, detections are visited in descending face score (ties:
    stable original order); each claims the unmatched truth with the highest
    IoU at or above the threshold. Input list order never affects the
    result.
    """
    frames = sorted({d.frame_index for d in detections}
                    | {t.frame_index for t in truths})
    face_tp = face_fp = face_fn = 0
    mask_tp = mask_tn = mask_fp = mask_fn = 0
    for frame in frames:
        dets = [d for d in detections if d.frame_index == frame]
        dets.sort(key=lambda d: -d.face_score)
        gts = [t for t in truths if t.frame_index == frame]
        taken = [False] * len(gts)
        for det in dets:
            det_box = BoundingBox(det.x1, det.y1, det.x2, det.y2)
            best, best_iou = None, 0.0
            for gi, gt in enumerate(gts):
                if taken[gi]:
                    continue
                overlap = iou(det_box, gt.box)
                if overlap >= iou_threshold and overlap > best_iou:
                    best, best_iou = gi, overlap
            if best is None:
                face_fp += 1
                continue
            taken[best] = True
            face_tp += 1
            truth_label = gts[best].label
            if det.label is MaskLabel.MASK and truth_label is MaskLabel.MASK:
                mask_tp += 1
            elif det.label is MaskLabel.NO_MASK and truth_label is MaskLabel.NO_MASK:
                mask_tn += 1
            elif det.label is MaskLabel.MASK:
                mask_fp += 1
            else:
                mask_fn += 1
        face_fn += taken.count(False)
    return (ConfusionCounts(tp=face_tp, fp=face_fp, fn=face_fn),
            ConfusionCounts(tp=mask_tp, tn=mask_tn, fp=mask_fp, fn=mask_fn))


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def compute_metrics(counts: ConfusionCounts) -> Metrics:
    """Precision TP/(TP+FP), recall TP/(TP+FN), accuracy
    (TP+TN)/(TP+TN+FP+FN), each as a percentage or None when undefined."""
    return Metrics(
        precision=_ratio(counts.tp, counts.tp + counts.fp),
        recall=_ratio(counts.tp, counts.tp + counts.fn),
        accuracy=_ratio(counts.tp + counts.tn,
                        counts.tp + counts.tn + counts.fp + counts.fn))


def evaluate(detections: list[Detection], truths: list[GroundTruthEntry],
             iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> EvalReport:
    face_counts, mask_counts = match_detections(detections, truths, iou_threshold)
    return EvalReport(face_counts=face_counts, mask_counts=mask_counts,
                      face=compute_metrics(face_counts),
                      mask=compute_metrics(mask_counts))


def _fmt(value: float | None) -> str:
    return UNDEFINED if value is None else f"{value:.2f}%"


def _row_cells(face: Metrics | None, mask: Metrics | None) -> list[str]:
    cells = []
    for metrics in (face, mask):
        if metrics is None:
            cells += [UNDEFINED] * 3
        else:
            cells += [_fmt(metrics.precision), _fmt(metrics.recall),
                      _fmt(metrics.accuracy)]
    return cells


def render_report(report: EvalReport,
                  baselines: tuple[BaselineRow, ...] = ()) -> str:
    """Aligned plain-text comparison table; baseline rows are marked as
    literature values rather than measurements."""
    header = ["Approach", "Face P", "Face R", "Face A",
              "Mask P", "Mask R", "Mask A"]
    rows = [["This run (measured)"] + _row_cells(report.face, report.mask)]
    for baseline in baselines:
        rows.append([f"{baseline.name} [literature]"]
                    + _row_cells(baseline.face, baseline.mask))
    widths = [max(len(header[i]), *(len(row[i]) for row in rows))
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i])
                               for i, cell in enumerate(row)))
    fc, mc = report.face_counts, report.mask_counts
    lines.append("")
    lines.append(f"Face counts: TP={fc.tp} FP={fc.fp} FN={fc.fn} TN={fc.tn}")
    lines.append(f"Mask counts: TP={mc.tp} FP={mc.fp} FN={mc.fn} TN={mc.tn}")
    return "\n".join(lines)


def render_csv(report: EvalReport,
               baselines: tuple[BaselineRow, ...] = ()) -> str:
    """CSV rows: header, one measured row, one row per baseline."""
    def csv_cell(value: float | None) -> str:
        return UNDEFINED if value is None else f"{value:.4f}"

    def csv_row(name: str, face: Metrics | None, mask: Metrics | None,
                source: str) -> str:
        cells = [name]
        for metrics in (face, mask):
            if metrics is None:
                cells += [UNDEFINED] * 3
            else:
                cells += [csv_cell(metrics.precision), csv_cell(metrics.recall),
                          csv_cell(metrics.accuracy)]
        return ",".join(cells + [source])

    lines = ["approach,face_precision,face_recall,face_accuracy,"
             "mask_precision,mask_recall,mask_accuracy,source"]
    lines.append(csv_row("This run", report.face, report.mask, "measured"))
    for baseline in baselines:
        lines.append(csv_row(baseline.name, baseline.face, baseline.mask,
                             "literature"))
    return "\n".join(lines) + "\n"


def load_detection_log(path: str | Path) -> list[Detection]:
    """Detections from a JSONL log written by the pipeline."""
    detections = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            detections.append(Detection(
                frame_index=int(obj["frame"]),
                x1=int(obj["x1"]), y1=int(obj["y1"]),
                x2=int(obj["x2"]), y2=int(obj["y2"]),
                label=MaskLabel(obj["label"]),
                confidence=float(obj["confidence"]),
                face_score=float(obj["face_score"])))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad detection record: {exc}")
    return detections


def load_ground_truth(path: str | Path) -> list[GroundTruthEntry]:
    """Ground truth JSONL: objects with frame, x1, y1, x2, y2, label."""
    truths = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            truths.append(GroundTruthEntry(
                frame_index=int(obj["frame"]),
                box=BoundingBox(float(obj["x1"]), float(obj["y1"]),
                                float(obj["x2"]), float(obj["y2"])),
                label=MaskLabel(obj["label"])))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad ground-truth record: {exc}")
    return truths
