"""Frame-level and segmental evaluation for action/phase segmentation.

Frame metrics: accuracy plus per-class precision/recall/Jaccard macro-
averaged over classes present in the ground truth. Segmental metrics:
edit score (normalized Levenshtein over segment label strings) and F1 at
IoU overlap thresholds, with greedy max-IoU matching and at most one match
per ground-truth segment. No boundary relaxation anywhere.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

F1_THRESHOLDS = (10, 25, 50)  # percent overlap


@dataclass(frozen=True)
class Segment:
    label: int
    start: int  # inclusive frame index
    end: int    # exclusive

    def __len__(self) -> int:
        return self.end - self.start


def segments_from_labels(labels) -> list[Segment]:
    """Maximal runs of equal labels, in temporal order."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot segment an empty label sequence")
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    return [Segment(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


@dataclass
class ClassScores:
    precision: float
    recall: float
    jaccard: float


@dataclass
class FrameMetrics:
    accuracy: float
    per_class: dict[int, ClassScores]
    precision: float  # macro over classes present in gt
    recall: float
    jaccard: float


def _ratio(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def frame_metrics(pred, gt) -> FrameMetrics:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"length mismatch: pred {pred.shape} vs gt {gt.shape}")
    accuracy = 100.0 * float((pred == gt).mean())
    per_class = {}
    for c in sorted(np.unique(gt).tolist()):
        tp = int(((pred == c) & (gt == c)).sum())
        fp = int(((pred == c) & (gt != c)).sum())
        fn = int(((pred != c) & (gt == c)).sum())
        per_class[c] = ClassScores(
            precision=_ratio(tp, tp + fp),
            recall=_ratio(tp, tp + fn),
            jaccard=_ratio(tp, tp + fp + fn),
        )
    scores = list(per_class.values())
    return FrameMetrics(
        accuracy=accuracy,
        per_class=per_class,
        precision=float(np.mean([s.precision for s in scores])),
        recall=float(np.mean([s.recall for s in scores])),
        jaccard=float(np.mean([s.jaccard for s in scores])),
    )


def _levenshtein(a: list[int], b: list[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] if x == y else 1 + min(prev[j - 1], prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def edit_score(pred_segments: list[Segment], gt_segments: list[Segment]) -> float:
    """100 * (1 - Levenshtein(pred labels, gt labels) / max(len, len))."""
    if not pred_segments or not gt_segments:
        raise DataError("edit_score needs nonempty segment lists")
    dist = _levenshtein([s.label for s in pred_segments], [s.label for s in gt_segments])
    return 100.0 * (1.0 - dist / max(len(pred_segments), len(gt_segments)))


def _segment_iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


def _overlap_counts(pred_segments, gt_segments, tau: float) -> tuple[int, int, int]:
    """(tp, fp, fn) under greedy max-IoU matching, one match per gt segment."""
    matched = [False] * len(gt_segments)
    tp = fp = 0
    for ps in pred_segments:
        ious = [_segment_iou(ps, gs) if ps.label == gs.label else 0.0 for gs in gt_segments]
        best = int(np.argmax(ious)) if ious else 0
        if ious and ious[best] >= tau and not matched[best]:
            tp += 1
            matched[best] = True
        else:
            fp += 1
    fn = matched.count(False)
    return tp, fp, fn


def f1_at_overlap(pred, gt, threshold: float) -> tuple[float, float, float]:
    """(precision, recall, f1) in percent at one IoU threshold."""
    if not 0.0 < threshold <= 1.0:
        raise DataError(f"overlap threshold must be in (0, 1], got {threshold}")
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"length mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp, fp, fn = _overlap_counts(segments_from_labels(pred), segments_from_labels(gt), threshold)
    return _f1_from_counts(tp, fp, fn)


def _f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_avg(f10: float, f25: float, f50: float) -> float:
    """Arithmetic mean of the three overlap F1 scores."""
    return (f10 + f25 + f50) / 3.0


def confusion_matrix(pred, gt, num_classes: int, normalize: bool = False) -> np.ndarray:
    """counts[gt][pred]; normalized rows sum to 1, all-zero rows stay zero."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"length mismatch: pred {pred.shape} vs gt {gt.shape}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (gt, pred), 1)
    if not normalize:
        return counts
    sums = counts.sum(axis=1, keepdims=True)
    out = np.zeros_like(counts, dtype=np.float64)
    np.divide(counts, sums, out=out, where=sums > 0)
    return out


@dataclass
class EvalReport:
    """All metrics for one video (or a pooled aggregate when video_id is None)."""

    accuracy: float
    precision: float
    recall: float
    jaccard: float
    edit: float
    f1_at: dict[int, float]
    f1_avg: float
    per_class: dict[int, ClassScores]
    confusion: np.ndarray
    f1_counts: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    video_id: str | None = None


def evaluate_video(pred, gt, num_classes: int, video_id: str | None = None) -> EvalReport:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    fm = frame_metrics(pred, gt)
    pred_segs = segments_from_labels(pred)
    gt_segs = segments_from_labels(gt)
    f1_at = {}
    f1_counts = {}
    for thresh in F1_THRESHOLDS:
        tp, fp, fn = _overlap_counts(pred_segs, gt_segs, thresh / 100.0)
        f1_counts[thresh] = (tp, fp, fn)
        f1_at[thresh] = _f1_from_counts(tp, fp, fn)[2]
    return EvalReport(
        accuracy=fm.accuracy,
        precision=fm.precision,
        recall=fm.recall,
        jaccard=fm.jaccard,
        edit=edit_score(pred_segs, gt_segs),
        f1_at=f1_at,
        f1_avg=f1_avg(f1_at[10], f1_at[25], f1_at[50]),
        per_class=fm.per_class,
        confusion=confusion_matrix(pred, gt, num_classes),
        f1_counts=f1_counts,
        video_id=video_id,
    )


def _scalar_metrics(report: EvalReport) -> dict[str, float]:
    out = {
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "jaccard": report.jaccard,
        "edit": report.edit,
        "f1_avg": report.f1_avg,
    }
    for thresh in F1_THRESHOLDS:
        out[f"f1@{thresh}"] = report.f1_at[thresh]
    return out


def aggregate(reports: list[EvalReport], mode: str = "overall"):
    """Combine per-video reports.

    mode "per_video": mean and population std of each scalar metric, as a
    dict of "<metric>_mean"/"<metric>_std".
    mode "overall": an EvalReport recomputed from pooled frame and segment
    counts (edit, which has no count form, is the per-video mean).
    """
    if not reports:
        raise DataError("aggregate needs at least one report")
    if mode == "per_video":
        keys = _scalar_metrics(reports[0]).keys()
        rows = [_scalar_metrics(r) for r in reports]
        summary = {}
        for key in keys:
            values = np.array([row[key] for row in rows])
            summary[f"{key}_mean"] = float(values.mean())
            summary[f"{key}_std"] = float(values.std())  # population std
        return summary
    if mode != "overall":
        raise DataError(f"unknown aggregate mode {mode!r}")
    confusion = np.sum([r.confusion for r in reports], axis=0)
    tp_c = np.diag(confusion)
    gt_c = confusion.sum(axis=1)
    pred_c = confusion.sum(axis=0)
    per_class = {}
    for c in np.flatnonzero(gt_c).tolist():
        tp = int(tp_c[c])
        per_class[c] = ClassScores(
            precision=_ratio(tp, int(pred_c[c])),
            recall=_ratio(tp, int(gt_c[c])),
            jaccard=_ratio(tp, int(pred_c[c] + gt_c[c] - tp)),
        )
    scores = list(per_class.values())
    f1_at = {}
    f1_counts = {}
    for thresh in F1_THRESHOLDS:
        tp = sum(r.f1_counts[thresh][0] for r in reports)
        fp = sum(r.f1_counts[thresh][1] for r in reports)
        fn = sum(r.f1_counts[thresh][2] for r in reports)
        f1_counts[thresh] = (tp, fp, fn)
        f1_at[thresh] = _f1_from_counts(tp, fp, fn)[2]
    return EvalReport(
        accuracy=_ratio(int(tp_c.sum()), int(confusion.sum())),
        precision=float(np.mean([s.precision for s in scores])),
        recall=float(np.mean([s.recall for s in scores])),
        jaccard=float(np.mean([s.jaccard for s in scores])),
        edit=float(np.mean([r.edit for r in reports])),
        f1_at=f1_at,
        f1_avg=f1_avg(f1_at[10], f1_at[25], f1_at[50]),
        per_class=per_class,
        confusion=confusion,
        f1_counts=f1_counts,
        video_id=None,
    )


def report_lines(report: EvalReport, prefix: str = "") -> list[str]:
    """Stable "metric<TAB>value" lines for one report."""
    lines = []
    for key, value in _scalar_metrics(report).items():
        lines.append(f"{prefix}{key}\t{value:.4f}")
    for c, s in sorted(report.per_class.items()):
        lines.append(f"{prefix}precision_{c}\t{s.precision:.4f}")
        lines.append(f"{prefix}recall_{c}\t{s.recall:.4f}")
        lines.append(f"{prefix}jaccard_{c}\t{s.jaccard:.4f}")
    C = report.confusion.shape[0]
    for i in range(C):
        for j in range(C):
            lines.append(f"{prefix}confusion_{i}_{j}\t{int(report.confusion[i, j])}")
    return lines


# 16-color palette for ribbon plots, indexed by class id. Fixed so a class
# keeps its color across runs.
RIBBON_PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (196, 156, 148),
)


def emit_ribbon(sequences: list[tuple[str, np.ndarray]], path, band_height: int = 16):
    """Write a binary PPM (P6): one horizontal band per named sequence, one
    pixel column per frame, colored by class id."""
    if not sequences:
        raise DataError("emit_ribbon needs at least one sequence")
    lengths = {len(np.asarray(seq)) for _, seq in sequences}
    if len(lengths) != 1:
        raise DataError(f"ribbon sequences differ in length: {sorted(lengths)}")
    width = lengths.pop()
    if width == 0:
        raise DataError("ribbon sequences are empty")
    palette = np.asarray(RIBBON_PALETTE, dtype=np.uint8)
    height = band_height * len(sequences)
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    for i, (_, seq) in enumerate(sequences):
        seq = np.asarray(seq)
        if seq.min() < 0 or seq.max() >= len(palette):
            raise DataError(f"class ids must be in [0, {len(palette)}) for the default palette")
        pixels[i * band_height:(i + 1) * band_height, :, :] = palette[seq][None, :, :]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
