"""Cohort manifests, stratified folds and the synthetic cohort generator.

Manifest format: JSON Lines, one object per subject::

    {"id": "syn-0001", "label": 0, "volume_path": "volumes/syn-0001.json",
     "boxes_path": "boxes/syn-0001.csv"}

``boxes_path`` may be null or absent.  Relative paths resolve against the
manifest's directory.  Any further keys are kept in ``extra``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detection import Box2D
from .errors import ConfigurationError, ValidationError
from .volume import Volume3D

CLASS_NAMES = ("ccRCC", "pRCC", "chRCC")
DEFAULT_PROPORTIONS = (0.59, 0.16, 0.25)
DIFFICULTIES = ("easy", "medium", "hard")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    label: int
    volume_path: Path
    boxes_path: Path | None = None
    extra: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]


def load_manifest(path, num_classes: int = 3) -> list[SubjectRecord]:
    path = Path(path)
    base = path.parent
    records: list[SubjectRecord] = []
    seen: set[str] = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in ("id", "label", "volume_path") if k not in obj]
            if missing:
                raise ValidationError(f"{path}:{lineno}: missing field(s) {missing}")
            sid = str(obj.pop("id"))
            if sid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate subject id {sid!r}")
            seen.add(sid)
            try:
                label = int(obj.pop("label"))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: subject {sid!r} has a non-integer label") from exc
            if not 0 <= label < num_classes:
                raise ValidationError(f"{path}:{lineno}: subject {sid!r} has label {label}, expected 0..{num_classes - 1}")
            vol = base / obj.pop("volume_path")
            boxes = obj.pop("boxes_path", None)
            records.append(SubjectRecord(sid, label, vol, base / boxes if boxes else None, obj))
    return records


def write_manifest(records: Sequence[SubjectRecord], path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p)
        try:
            return p.resolve().relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with path.open("w") as fh:
        for r in records:
            obj = {"id": r.id, "label": r.label, "volume_path": rel(r.volume_path),
                   "boxes_path": rel(r.boxes_path) if r.boxes_path else None}
            obj.update(r.extra)
            fh.write(json.dumps(obj) + "\n")


def class_counts(records, num_classes: int = 3) -> np.ndarray:
    labels = [r.label if isinstance(r, SubjectRecord) else int(r) for r in records]
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)[:num_classes]


def stratified_kfold(
    records: Sequence[SubjectRecord],
    k: int = 5,
    seed: int = 0,
    num_classes: int = 3,
    strict: bool = True,
) -> list[FoldSplit]:
    """Seeded stratified k-fold split.

    Members of each class are shuffled and dealt round-robin onto the folds;
    the dealing position carries over from one class to the next, so both
    per-class and total validation sizes differ by at most one across folds.

    With ``strict`` (the default) every class must have at least ``k``
    members, so that no training split can lose a class.  ``strict=False``
    only requires ``k`` records in total and leaves some folds without a
    small class in their validation set.
    """
    if k < 2:
        raise ValidationError("k must be >= 2")
    counts = class_counts(records, num_classes)
    if not strict and len(records) < k:
        raise ConfigurationError(f"{k}-fold split needs at least {k} subjects, got {len(records)}")
    if strict and np.any(counts < k):
        raise ConfigurationError(
            f"stratified {k}-fold split needs >= {k} subjects per class; class counts are {counts.tolist()}"
        )
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    pos = 0
    for c in range(num_classes):
        members = [r.id for r in records if r.label == c]
        for sid in (members[i] for i in rng.permutation(len(members))):
            fold_of[sid] = pos % k
            pos += 1
    splits = []
    for f in range(k):
        val = tuple(r.id for r in records if fold_of[r.id] == f)
        train = tuple(r.id for r in records if fold_of[r.id] != f)
        splits.append(FoldSplit(f, train, val))
    return splits


# ---------------------------------------------------------------------------
# synthetic cohorts


def largest_remainder(n: int, proportions: Sequence[float]) -> np.ndarray:
    p = np.asarray(proportions, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
        raise ValidationError(f"proportions must be non-negative and sum to 1, got {list(proportions)}")
    quotas = n * p
    counts = np.floor(quotas).astype(np.int64)
    short = n - int(counts.sum())
    # Stable sort keeps the lower class index first among equal remainders.
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


@dataclass(frozen=True)
class _ClassLook:
    mean_hu: float
    radius_mm: float
    texture_sd: float


# Enhancement, size and heterogeneity loosely follow the subtypes' usual CT
# appearance: ccRCC bright and heterogeneous, pRCC small and hypoenhancing,
# chRCC large and fairly homogeneous.
CLASS_LOOKS = (
    _ClassLook(mean_hu=150.0, radius_mm=8.0, texture_sd=25.0),
    _ClassLook(mean_hu=0.0, radius_mm=5.0, texture_sd=6.0),
    _ClassLook(mean_hu=85.0, radius_mm=10.5, texture_sd=12.0),
)

# noise sd (HU), per-subject mean jitter sd (HU), relative radius jitter sd
_DIFFICULTY = {
    "easy": (8.0, 6.0, 0.06),
    "medium": (30.0, 40.0, 0.22),
    "hard": (50.0, 60.0, 0.32),
}

BACKGROUND_HU = 35.0
SYNTH_SPACING = (1.0, 1.0, 2.0)


@dataclass(frozen=True)
class SyntheticSubject:
    id: str
    label: int
    volume: Volume3D
    boxes: list[Box2D]


def _make_subject(sid: str, label: int, difficulty: str, side: int, rng: np.random.Generator) -> SyntheticSubject:
    noise_sd, jitter_sd, radius_sd = _DIFFICULTY[difficulty]
    look = CLASS_LOOKS[label]
    sx, sy, sz = SYNTH_SPACING
    nx = ny = side
    nz = max(1, int(round(side * sx / sz)))
    # physical voxel-center coordinates, z outermost
    z = np.arange(nz)[:, None, None] * sz
    y = np.arange(ny)[None, :, None] * sy
    x = np.arange(nx)[None, None, :] * sx
    extent = np.array([(nx - 1) * sx, (ny - 1) * sy, (nz - 1) * sz])
    center = extent / 2.0 + rng.uniform(-2.0, 2.0, size=3)
    scale = max(0.3, 1.0 + radius_sd * rng.standard_normal())
    radii = look.radius_mm * scale * rng.uniform(0.9, 1.1, size=3)
    r2 = ((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((z - center[2]) / radii[2]) ** 2
    mask = r2 <= 1.0
    if not mask.any():
        idx = tuple(int(round(c / s)) for c, s in zip(center[::-1], (sz, sy, sx)))
        mask[idx] = True
    values = BACKGROUND_HU + 10.0 * rng.standard_normal(mask.shape)
    mean = look.mean_hu + jitter_sd * rng.standard_normal()
    values[mask] = mean + look.texture_sd * rng.standard_normal(int(mask.sum()))
    values += noise_sd * rng.standard_normal(mask.shape)
    boxes = []
    for zi in range(nz):
        sl = mask[zi]
        if sl.any():
            ys, xs = np.nonzero(sl)
            boxes.append(Box2D(zi, (int(xs.min()), int(ys.min())), (int(xs.max()), int(ys.max())), 1.0))
    return SyntheticSubject(sid, label, Volume3D(values.astype(np.float32), SYNTH_SPACING), boxes)


def generate_synthetic_cohort(
    n: int,
    proportions: Sequence[float] = DEFAULT_PROPORTIONS,
    difficulty: str = "easy",
    side: int = 32,
    seed: int = 0,
    id_prefix: str = "syn",
) -> list[SyntheticSubject]:
    """Ellipsoidal-lesion CT cohort standing in for clinical data.

    Volumes are in HU on a 1 x 1 x 2 mm grid with per-slice tight boxes
    around the lesion.  Class counts follow ``proportions`` by largest
    remainder; everything is a pure function of the arguments.
    """
    if n < 15:
        raise ValidationError(f"synthetic cohort needs n >= 15, got {n}")
    if difficulty not in _DIFFICULTY:
        raise ValidationError(f"difficulty must be one of {DIFFICULTIES}")
    if side < 8:
        raise ValidationError("side must be >= 8")
    counts = largest_remainder(n, proportions)
    ss = np.random.SeedSequence(seed)
    label_seed, *subject_seeds = ss.spawn(n + 1)
    labels = np.repeat(np.arange(len(counts)), counts)
    labels = labels[np.random.default_rng(label_seed).permutation(n)]
    width = max(4, len(str(n)))
    return [
        _make_subject(f"{id_prefix}-{i:0{width}d}", int(labels[i]), difficulty, side, np.random.default_rng(subject_seeds[i]))
        for i in range(n)
    ]
