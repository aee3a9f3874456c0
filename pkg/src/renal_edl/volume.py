"""CT-style volume preprocessing and the on-disk volume format.

Values are held as a numpy array indexed ``[z, y, x]`` (z outermost), while
dims, spacings and box corners are written ``(x, y, z)``.

On disk a volume is a JSON sidecar plus a raw payload::

    {"format": "rcc-edl-volume", "version": 1, "dims": [nx, ny, nz],
     "spacing_mm": [sx, sy, sz], "dtype": "f32le", "order": "z-outermost",
     "data": "<name>.raw"}

The payload is ``nx*ny*nz`` little-endian float32 values, x varying fastest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

CT_WINDOW_WIDTH = 300.0
CT_WINDOW_LEVEL = 40.0


@dataclass(frozen=True)
class Volume3D:
    values: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 1:
            raise ValidationError(f"volume values must be a non-empty 3D array, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing_mm}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned box, corners as ``(x, y, z)``; inclusive when used as voxel indices."""

    min_voxel: tuple
    max_voxel: tuple

    def __post_init__(self):
        lo, hi = tuple(self.min_voxel), tuple(self.max_voxel)
        if len(lo) != 3 or len(hi) != 3:
            raise ValidationError("Box3D corners need three coordinates")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValidationError(f"Box3D min {lo} exceeds max {hi}")
        object.__setattr__(self, "min_voxel", lo)
        object.__setattr__(self, "max_voxel", hi)

    @classmethod
    def full(cls, volume: Volume3D) -> "Box3D":
        nx, ny, nz = volume.dims
        return cls((0, 0, 0), (nx - 1, ny - 1, nz - 1))


def window_normalize(v: Volume3D, width: float = CT_WINDOW_WIDTH, level: float = CT_WINDOW_LEVEL) -> Volume3D:
    """Clip to ``level +/- width/2`` and map that interval onto [0, 1]."""
    if not width > 0:
        raise ValidationError(f"window width must be positive, got {width}")
    lo = level - width / 2.0
    out = (np.clip(v.values, lo, lo + width) - lo) / width
    return Volume3D(np.clip(out, 0.0, 1.0), v.spacing_mm)


def _resampled_length(n: int, spacing: float, target: float) -> int:
    # Half-up rounding of the physical extent measured in target steps.
    return int(math.floor((n - 1) * spacing / target + 0.5)) + 1


def _interp_axis(arr: np.ndarray, axis: int, positions: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    if n == 1:
        return np.repeat(arr, len(positions), axis=axis)
    pos = np.clip(positions, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    frac = pos - i0
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(pos)
    frac = frac.reshape(shape)
    out = a0 + frac * (a1 - a0)
    # Guard against one-ulp overshoot so the result stays inside the source range.
    return np.clip(out, np.minimum(a0, a1), np.maximum(a0, a1))


def resample_isotropic(v: Volume3D, target_mm: float = 1.0) -> Volume3D:
    """Trilinear resampling onto a ``target_mm`` isotropic grid.

    Voxel ``i`` sits at physical coordinate ``i * spacing`` on both grids;
    samples past the source extent take the border value.
    """
    if not target_mm > 0:
        raise ValidationError(f"target spacing must be positive, got {target_mm}")
    out = v.values
    # values axes are (z, y, x); spacing is (sx, sy, sz)
    for axis, spacing in ((0, v.spacing_mm[2]), (1, v.spacing_mm[1]), (2, v.spacing_mm[0])):
        n = out.shape[axis]
        m = _resampled_length(n, spacing, target_mm)
        positions = np.arange(m) * (target_mm / spacing)
        out = _interp_axis(out, axis, positions)
    return Volume3D(out, (target_mm, target_mm, target_mm))


def clip_box(box: Box3D, dims: tuple[int, int, int]) -> Box3D:
    lo = [max(0, int(math.floor(a))) for a in box.min_voxel]
    hi = [min(d - 1, int(math.ceil(b))) for b, d in zip(box.max_voxel, dims)]
    if any(a > b for a, b in zip(lo, hi)):
        raise ValidationError(f"box {box.min_voxel}-{box.max_voxel} does not intersect volume of dims {dims}")
    return Box3D(tuple(lo), tuple(hi))


def _center_fit(arr: np.ndarray, side: int) -> np.ndarray:
    out = arr
    for axis in range(3):
        m = out.shape[axis]
        if m > side:
            start = (m - side) // 2
            out = np.take(out, np.arange(start, start + side), axis=axis)
        elif m < side:
            before = (side - m) // 2
            pad = [(0, 0)] * 3
            pad[axis] = (before, side - m - before)
            out = np.pad(out, pad)
    return out


def crop(v: Volume3D, box: Box3D, pad_to_side: int) -> Volume3D:
    """Extract the inclusive box (clipped to bounds) and center it in a cube.

    Axes shorter than ``pad_to_side`` are zero-padded around the center;
    longer ones are center-cropped.
    """
    if pad_to_side < 1:
        raise ValidationError("pad_to_side must be >= 1")
    b = clip_box(box, v.dims)
    (x0, y0, z0), (x1, y1, z1) = b.min_voxel, b.max_voxel
    sub = v.values[z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1]
    return Volume3D(_center_fit(sub, pad_to_side), v.spacing_mm)


def rescale_box(box: Box3D, spacing_mm, target_mm: float = 1.0) -> Box3D:
    """Express a voxel box on the grid produced by :func:`resample_isotropic`."""
    lo = tuple(int(math.floor(a * s / target_mm)) for a, s in zip(box.min_voxel, spacing_mm))
    hi = tuple(int(math.ceil(b * s / target_mm)) for b, s in zip(box.max_voxel, spacing_mm))
    return Box3D(lo, hi)


# ---------------------------------------------------------------------------
# file format


def save_volume(v: Volume3D, path) -> Path:
    """Write ``<path>.json`` and ``<path>.raw``; returns the sidecar path."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    raw_path = path.with_suffix(".raw")
    header = {
        "format": "rcc-edl-volume",
        "version": 1,
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "dtype": "f32le",
        "order": "z-outermost",
        "data": raw_path.name,
    }
    raw_path.write_bytes(np.ascontiguousarray(v.values, dtype="<f4").tobytes())
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(header, indent=2) + "\n")
    return sidecar


def load_volume(path) -> Volume3D:
    sidecar = Path(path)
    if sidecar.suffix != ".json":
        sidecar = sidecar.with_suffix(".json")
    try:
        header = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{sidecar}: malformed volume descriptor ({exc})") from exc
    if header.get("dtype") != "f32le":
        raise ValidationError(f"{sidecar}: unsupported dtype {header.get('dtype')!r}")
    nx, ny, nz = (int(d) for d in header["dims"])
    raw = (sidecar.parent / header["data"]).read_bytes()
    if len(raw) != 4 * nx * ny * nz:
        raise ValidationError(f"{sidecar}: payload has {len(raw)} bytes, expected {4 * nx * ny * nz}")
    values = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx)
    return Volume3D(values, tuple(header["spacing_mm"]))
