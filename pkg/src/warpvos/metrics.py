"""Region (J) and boundary (F) segmentation scores, DAVIS protocol.

J is plain intersection-over-union of binary masks.  F extracts boundary
pixels (foreground pixels with a 4-neighbor outside the mask or on the
image edge), matches them bidirectionally within a pixel tolerance
proportional to the image diagonal, and reports the harmonic mean of
boundary precision and recall.  The fast path uses an exact Euclidean
distance transform; a brute-force all-pairs oracle verifies it on small
fixtures.  Scores are averaged per object over its evaluated frames, then
across objects.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import ShapeError

DEFAULT_TOLERANCE_FRACTION = 0.008  # of the image diagonal


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbor outside the mask or on the edge."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    inner = padded[1:-1, 2:] & padded[1:-1, :-2] & padded[2:, 1:-1] & padded[:-2, 1:-1]
    return m & ~inner


def pixel_tolerance(shape: tuple[int, int], fraction: float = DEFAULT_TOLERANCE_FRACTION) -> int:
    return int(np.ceil(fraction * np.sqrt(shape[0] ** 2 + shape[1] ** 2)))


def j_score(pred: np.ndarray, gt: np.ndarray, object_id: int) -> float:
    """Intersection-over-union; both-empty counts as a correct absence (1.0)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"extent mismatch: {pred.shape} vs {gt.shape}")
    p = pred == object_id
    g = gt == object_id
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def f_score(
    pred: np.ndarray,
    gt: np.ndarray,
    object_id: int,
    tolerance: int | None = None,
    tolerance_fraction: float = DEFAULT_TOLERANCE_FRACTION,
) -> float:
    """Boundary F-measure with distance-transform matching (exact EDT)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"extent mismatch: {pred.shape} vs {gt.shape}")
    theta = pixel_tolerance(pred.shape, tolerance_fraction) if tolerance is None else tolerance
    pb = boundary_pixels(pred == object_id)
    gb = boundary_pixels(gt == object_id)
    np_, ng = pb.sum(), gb.sum()
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = (dist_to_gt[pb] <= theta).sum() / np_
    recall = (dist_to_pred[gb] <= theta).sum() / ng
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def f_score_bruteforce(pred: np.ndarray, gt: np.ndarray, object_id: int, tolerance: int) -> float:
    """All-pairs distance-threshold oracle (use on small masks only)."""
    pb = np.argwhere(boundary_pixels(pred == object_id))
    gb = np.argwhere(boundary_pixels(gt == object_id))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    d2 = ((pb[:, None, :] - gb[None, :, :]) ** 2).sum(axis=-1)
    matched_pred = (d2.min(axis=1) <= tolerance**2).sum()
    matched_gt = (d2.min(axis=0) <= tolerance**2).sum()
    precision = matched_pred / len(pb)
    recall = matched_gt / len(gb)
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class FrameScore:
    sequence: str
    object_id: int
    frame: int
    j: float
    f: float

    def to_json(self) -> dict:
        return {"sequence": self.sequence, "object": self.object_id, "frame": self.frame, "J": self.j, "F": self.f}


@dataclass
class ScoreReport:
    per_object: dict[tuple[str, int], dict[str, float]] = field(default_factory=dict)
    mean_j: float = 0.0
    mean_f: float = 0.0

    @property
    def j_and_f(self) -> float:
        return (self.mean_j + self.mean_f) / 2.0

    def to_json(self) -> dict:
        return {
            "J": self.mean_j,
            "F": self.mean_f,
            "J&F": self.j_and_f,
            "objects": {
                f"{seq}/{obj}": scores for (seq, obj), scores in sorted(self.per_object.items())
            },
        }


def score_sequence(
    pred_labels: list[np.ndarray],
    gt_labels: list[np.ndarray],
    first_annotation: dict[int, int],
    sequence: str = "seq",
    tolerance_fraction: float = DEFAULT_TOLERANCE_FRACTION,
) -> list[FrameScore]:
    """Per-object per-frame scores; frames before an object's first
    annotation are excluded from its evaluation."""
    if len(pred_labels) != len(gt_labels):
        raise ShapeError(f"{sequence}: {len(pred_labels)} predictions vs {len(gt_labels)} ground-truth frames")
    records = []
    for oid, first in sorted(first_annotation.items()):
        for t in range(first, len(gt_labels)):
            records.append(
                FrameScore(
                    sequence,
                    oid,
                    t,
                    j_score(pred_labels[t], gt_labels[t], oid),
                    f_score(pred_labels[t], gt_labels[t], oid, tolerance_fraction=tolerance_fraction),
                )
            )
    return records


def aggregate(records: list[FrameScore]) -> ScoreReport:
    """Object means over evaluated frames, then dataset means over objects."""
    if not records:
        raise ValueError("no scores to aggregate")
    by_obj: dict[tuple[str, int], list[FrameScore]] = {}
    for r in records:
        by_obj.setdefault((r.sequence, r.object_id), []).append(r)
    report = ScoreReport()
    for key, rs in by_obj.items():
        report.per_object[key] = {
            "J": float(np.mean([r.j for r in rs])),
            "F": float(np.mean([r.f for r in rs])),
            "frames": len(rs),
        }
    report.mean_j = float(np.mean([v["J"] for v in report.per_object.values()]))
    report.mean_f = float(np.mean([v["F"] for v in report.per_object.values()]))
    return report


def write_reports(records: list[FrameScore], report: ScoreReport, out_path, csv_path=None) -> None:
    """Summary JSON at ``out_path``; JSON-lines next to it; optional CSV."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    jsonl = out_path.with_suffix(".jsonl")
    with open(jsonl, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["sequence", "object", "frame", "J", "F"])
            for r in records:
                writer.writerow([r.sequence, r.object_id, r.frame, f"{r.j:.6f}", f"{r.f:.6f}"])
