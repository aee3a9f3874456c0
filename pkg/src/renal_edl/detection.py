"""Per-slice detection boxes: merging into 3D VoIs, IoU and average precision.

Boxes file format (CSV, header required)::

    slice_z,x_min,y_min,x_max,y_max,confidence

``confidence`` may be left empty or the column omitted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .volume import Box3D

BOX_FIELDS = ["slice_z", "x_min", "y_min", "x_max", "y_max", "confidence"]


@dataclass(frozen=True)
class Box2D:
    slice_z: int
    min: tuple[float, float]
    max: tuple[float, float]
    confidence: float | None = None

    def __post_init__(self):
        lo, hi = tuple(self.min), tuple(self.max)
        if len(lo) != 2 or len(hi) != 2 or lo[0] > hi[0] or lo[1] > hi[1]:
            raise ValidationError(f"invalid 2D box {lo}-{hi}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)


def merge_slices(boxes: Iterable[Box2D]) -> Box3D:
    boxes = list(boxes)
    if not boxes:
        raise ValidationError("cannot merge an empty list of boxes")
    lo_x = min(b.min[0] for b in boxes)
    lo_y = min(b.min[1] for b in boxes)
    hi_x = max(b.max[0] for b in boxes)
    hi_y = max(b.max[1] for b in boxes)
    zs = [b.slice_z for b in boxes]
    return Box3D((lo_x, lo_y, min(zs)), (hi_x, hi_y, max(zs)))


def _extents(box) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(box, Box2D):
        return np.asarray(box.min, dtype=float), np.asarray(box.max, dtype=float)
    return np.asarray(box.min_voxel, dtype=float), np.asarray(box.max_voxel, dtype=float)


def iou(a, b) -> float:
    """Intersection over union with continuous extents (``max - min`` per axis).

    2D boxes on different slices do not overlap.  Degenerate (zero-measure)
    boxes compare as 1.0 when identical and 0.0 otherwise.
    """
    if type(a) is not type(b):
        raise ValidationError("iou needs two boxes of the same kind")
    if isinstance(a, Box2D) and a.slice_z != b.slice_z:
        return 0.0
    alo, ahi = _extents(a)
    blo, bhi = _extents(b)
    inter = np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0.0, None))
    union = np.prod(ahi - alo) + np.prod(bhi - blo) - inter
    if union <= 0:
        return 1.0 if np.array_equal(alo, blo) and np.array_equal(ahi, bhi) else 0.0
    return float(inter / union)


def average_precision(
    preds: Sequence[tuple[object, float]] | Sequence[Box2D],
    truths: Sequence,
    iou_threshold: float = 0.5,
) -> float:
    """All-point interpolated AP with greedy matching by descending confidence.

    ``preds`` holds ``(box, confidence)`` pairs, or :class:`Box2D` objects
    carrying their own confidence.  Each prediction claims the unmatched
    truth it overlaps most; it counts as a hit when that IoU reaches
    ``iou_threshold``.
    """
    if len(truths) == 0:
        raise ValidationError("average precision is undefined without ground-truth boxes")
    scored = []
    for p in preds:
        if isinstance(p, Box2D):
            if p.confidence is None:
                raise ValidationError("prediction box lacks a confidence")
            scored.append((p, p.confidence))
        else:
            scored.append((p[0], float(p[1])))
    if not scored:
        return 0.0
    order = sorted(range(len(scored)), key=lambda i: -scored[i][1])
    matched = [False] * len(truths)
    hits = np.zeros(len(scored))
    for rank, i in enumerate(order):
        box = scored[i][0]
        best, best_j = -1.0, -1
        for j, t in enumerate(truths):
            if matched[j]:
                continue
            o = iou(box, t)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_threshold:
            matched[best_j] = True
            hits[rank] = 1.0
    tp = np.cumsum(hits)
    recall = tp / len(truths)
    precision = tp / np.arange(1, len(scored) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def read_boxes(path) -> list[Box2D]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(BOX_FIELDS[:5]) <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain {', '.join(BOX_FIELDS[:5])}")
        boxes = []
        for line, row in enumerate(reader, start=2):
            try:
                conf = row.get("confidence")
                boxes.append(
                    Box2D(
                        int(row["slice_z"]),
                        (float(row["x_min"]), float(row["y_min"])),
                        (float(row["x_max"]), float(row["y_max"])),
                        float(conf) if conf not in (None, "") else None,
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{line}: {exc}") from exc
    return boxes


def write_boxes(boxes: Iterable[Box2D], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BOX_FIELDS)
        for b in boxes:
            writer.writerow(
                [b.slice_z, _fmt(b.min[0]), _fmt(b.min[1]), _fmt(b.max[0]), _fmt(b.max[1]),
                 "" if b.confidence is None else repr(float(b.confidence))]
            )


def _fmt(x) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))
