"""Volume/mask data model, file I/O, resampling, patch sampling, rotation.

Conventions used throughout the package:
  * arrays are indexed [x, y, z]
  * the physical position of voxel index i along an axis is origin + i * spacing
  * on disk a volume is a `<name>.raw` little-endian float32 blob in
    x-fastest order plus a `<name>.vol.json` sidecar header
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    EmptyMask,
    InvalidSpacing,
    IOFailure,
    MissingHeader,
    NonFiniteData,
    ShapeMismatch,
)

Triple = tuple[float, float, float]


class Modality(str, Enum):
    CT = "CT"
    PET = "PET"
    PROB = "PROB"
    OTHER = "OTHER"


class Interp(str, Enum):
    TRILINEAR = "TRILINEAR"
    NEAREST = "NEAREST"


@dataclass
class Volume:
    """3D scalar grid with physical voxel spacing (mm) and a modality tag."""

    data: np.ndarray  # float32, shape (x, y, z)
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)
    modality: Modality = Modality.OTHER

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.modality = Modality(self.modality)
        if any(s <= 0 for s in self.spacing):
            raise InvalidSpacing(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def validate_finite(self) -> "Volume":
        if not np.isfinite(self.data).all():
            raise NonFiniteData("volume contains NaN or Inf")
        return self


@dataclass
class Mask:
    """Binary grid aligned to a Volume."""

    data: np.ndarray  # bool, shape (x, y, z)
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"mask data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(s <= 0 for s in self.spacing):
            raise InvalidSpacing(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())


class PatchKind(str, Enum):
    POSITIVE = "POSITIVE"
    NEGATIVE = "NEGATIVE"


@dataclass
class PatchSample:
    channels: list[np.ndarray]          # float32 sub-grids, equal shapes
    label: np.ndarray                   # bool sub-grid, same shape
    center: tuple[int, int, int]        # voxel index in the source grid
    kind: PatchKind


@dataclass
class CaseManifest:
    """Paths for one patient case. Paths are absolute after loading."""

    case_id: str
    rtct: str
    diag_ct: str
    pet: str
    gtv_mask: str
    pet_reg: str | None = None
    true_field: str | None = None


# --------------------------------------------------------------------------
# file format

def _base_path(path) -> Path:
    p = Path(path)
    if p.suffix == ".raw":
        p = p.with_suffix("")
    return p


def save_volume(vol: Volume, path) -> None:
    """Write `<path>.raw` + `<path>.vol.json`; load_volume inverts this."""
    base = _base_path(path)
    header = {
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "modality": vol.modality.value,
        "dtype": "f32le",
    }
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(base.with_suffix(".raw"), "wb") as f:
            f.write(np.asfortranarray(vol.data.astype("<f4")).tobytes(order="F"))
        with open(str(base) + ".vol.json", "w") as f:
            json.dump(header, f, indent=2, sort_keys=True)
    except OSError as e:
        raise IOFailure(f"cannot write volume {base}: {e}") from e


def load_volume(path) -> Volume:
    """Read a volume pair written by save_volume."""
    base = _base_path(path)
    header_path = Path(str(base) + ".vol.json")
    if not header_path.exists():
        raise MissingHeader(f"no sidecar header {header_path}")
    try:
        with open(header_path) as f:
            header = json.load(f)
        shape = tuple(int(n) for n in header["shape"])
        spacing = tuple(header["spacing"])
        origin = tuple(header.get("origin", (0.0, 0.0, 0.0)))
        modality = Modality(header.get("modality", "OTHER"))
        dtype = header.get("dtype", "f32le")
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise MissingHeader(f"malformed header {header_path}: {e}") from e
    if dtype != "f32le":
        raise MissingHeader(f"unsupported dtype {dtype!r} in {header_path}")
    raw_path = base.with_suffix(".raw")
    if not raw_path.exists():
        raise IOFailure(f"raw blob missing: {raw_path}")
    blob = np.fromfile(raw_path, dtype="<f4")
    if blob.size != int(np.prod(shape)):
        raise ShapeMismatch(
            f"{raw_path}: header shape {shape} implies {int(np.prod(shape))} "
            f"elements, blob holds {blob.size}"
        )
    data = np.ascontiguousarray(blob.reshape(shape, order="F"))
    vol = Volume(data=data, spacing=spacing, origin=origin, modality=modality)
    return vol.validate_finite()


def save_mask(mask: Mask, path) -> None:
    """Masks are stored as float 0.0/1.0 volumes."""
    save_volume(
        Volume(mask.data.astype(np.float32), mask.spacing, mask.origin, Modality.OTHER),
        path,
    )


def load_mask(path) -> Mask:
    vol = load_volume(path)
    return Mask(vol.data > 0.5, vol.spacing, vol.origin)


def save_manifest(cases: Sequence[CaseManifest], path) -> None:
    """Dataset manifest: JSON list of case records, paths relative to the file."""
    path = Path(path)
    root = path.parent.resolve()

    def rel(p):
        if p is None:
            return None
        p = Path(p).resolve()
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p)

    records = []
    for c in cases:
        d = asdict(c)
        for k in ("rtct", "diag_ct", "pet", "gtv_mask", "pet_reg", "true_field"):
            d[k] = rel(d[k])
        records.append(d)
    try:
        with open(path, "w") as f:
            json.dump({"cases": records}, f, indent=2, sort_keys=True)
    except OSError as e:
        raise IOFailure(f"cannot write manifest {path}: {e}") from e


def load_manifest(path, check_exists: bool = True) -> list[CaseManifest]:
    path = Path(path)
    if not path.exists():
        raise MissingHeader(f"manifest not found: {path}")
    with open(path) as f:
        payload = json.load(f)
    root = path.parent.resolve()

    def absolute(p):
        if p is None:
            return None
        q = Path(p)
        return str(q if q.is_absolute() else root / q)

    cases = []
    ids = set()
    for rec in payload["cases"]:
        case = CaseManifest(
            case_id=rec["case_id"],
            rtct=absolute(rec["rtct"]),
            diag_ct=absolute(rec["diag_ct"]),
            pet=absolute(rec["pet"]),
            gtv_mask=absolute(rec["gtv_mask"]),
            pet_reg=absolute(rec.get("pet_reg")),
            true_field=absolute(rec.get("true_field")),
        )
        if case.case_id in ids:
            raise ShapeMismatch(f"duplicate case_id {case.case_id!r} in {path}")
        ids.add(case.case_id)
        if check_exists:
            for key in ("rtct", "diag_ct", "pet", "gtv_mask", "pet_reg"):
                p = getattr(case, key)
                if p is not None and not Path(p + ".vol.json").exists():
                    raise MissingHeader(f"case {case.case_id}: missing {key} at {p}")
        cases.append(case)
    return cases


def grid_points(shape, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Physical coordinates (mm) of every voxel center, shape (x, y, z, 3)."""
    axes = [
        origin[a] + np.arange(shape[a], dtype=np.float64) * spacing[a]
        for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


# --------------------------------------------------------------------------
# resampling

def resample(vol: Volume, target_spacing: Triple, interp: Interp = Interp.TRILINEAR) -> Volume:
    """Resample onto target spacing; out shape = ceil(shape * spacing / target)."""
    target = tuple(float(t) for t in target_spacing)
    if any(t <= 0 for t in target):
        raise InvalidSpacing(f"target spacing must be positive, got {target}")
    data = _resample_array(
        vol.data, vol.spacing, target, order=1 if interp == Interp.TRILINEAR else 0
    )
    return Volume(data, target, vol.origin, vol.modality)


def resample_mask(mask: Mask, target_spacing: Triple) -> Mask:
    """Nearest-neighbour resampling, binarity preserved."""
    target = tuple(float(t) for t in target_spacing)
    if any(t <= 0 for t in target):
        raise InvalidSpacing(f"target spacing must be positive, got {target}")
    data = _resample_array(mask.data.astype(np.float32), mask.spacing, target, order=0)
    return Mask(data > 0.5, target, mask.origin)


def _resample_array(data, spacing, target, order):
    in_shape = np.array(data.shape, dtype=np.float64)
    ratio = in_shape * np.array(spacing) / np.array(target)
    out_shape = tuple(int(n) for n in np.ceil(ratio - 1e-6))
    if data.shape == out_shape and tuple(spacing) == tuple(target):
        return data.copy()
    coords = [
        np.arange(out_shape[a], dtype=np.float64) * target[a] / spacing[a]
        for a in range(3)
    ]
    grid = np.meshgrid(*coords, indexing="ij")
    out = ndimage.map_coordinates(
        data.astype(np.float32), np.stack(grid), order=order, mode="nearest"
    )
    return out.reshape(out_shape)


# --------------------------------------------------------------------------
# patches

def extract_patch(channels: Sequence[np.ndarray], center, size) -> list[np.ndarray]:
    """Crop an exact-size window around `center` from each channel.

    Regions outside the source are zero-filled; `center` maps to the patch
    voxel at size // 2 on each axis.
    """
    shapes = {tuple(np.shape(c)) for c in channels}
    if len(shapes) != 1:
        raise ShapeMismatch(f"channels disagree on shape: {sorted(shapes)}")
    src_shape = shapes.pop()
    size = tuple(int(s) for s in size)
    center = tuple(int(c) for c in center)
    out = []
    src_sl, dst_sl = [], []
    for a in range(3):
        start = center[a] - size[a] // 2
        lo = max(start, 0)
        hi = min(start + size[a], src_shape[a])
        src_sl.append(slice(lo, max(hi, lo)))
        dst_sl.append(slice(lo - start, max(hi, lo) - start))
    for ch in channels:
        patch = np.zeros(size, dtype=np.asarray(ch).dtype)
        patch[tuple(dst_sl)] = np.asarray(ch)[tuple(src_sl)]
        out.append(patch)
    return out


def sample_training_patches(
    case: CaseManifest,
    count: int,
    positive_fraction: float,
    size,
    seed: int,
    channels: Sequence[np.ndarray] | None = None,
    label: np.ndarray | None = None,
) -> list[PatchSample]:
    """Draw `count` patches: round(count * positive_fraction) centered inside
    the GTV, the rest centered uniformly over the volume.

    Pure function of its arguments; channel grids default to the case RTCT.
    """
    if channels is None:
        channels = [load_volume(case.rtct).data]
    if label is None:
        label = load_mask(case.gtv_mask).data
    label = np.asarray(label).astype(bool)
    shapes = {tuple(np.shape(c)) for c in channels} | {label.shape}
    if len(shapes) != 1:
        raise ShapeMismatch(f"channels/label disagree on shape: {sorted(shapes)}")

    n_pos = int(round(count * positive_fraction))
    n_neg = count - n_pos
    rng = np.random.default_rng(seed)

    centers: list[tuple[tuple[int, int, int], PatchKind]] = []
    if n_pos > 0:
        fg = np.argwhere(label)
        if fg.size == 0:
            raise EmptyMask("positive patches requested from an empty GTV mask")
        rows = rng.integers(0, len(fg), size=n_pos)
        centers += [(tuple(int(v) for v in fg[r]), PatchKind.POSITIVE) for r in rows]
    for _ in range(n_neg):
        c = tuple(int(rng.integers(0, label.shape[a])) for a in range(3))
        centers.append((c, PatchKind.NEGATIVE))

    patches = []
    for center, kind in centers:
        chans = extract_patch(channels, center, size)
        (lab,) = extract_patch([label], center, size)
        patches.append(PatchSample(channels=chans, label=lab, center=center, kind=kind))
    return patches


def rotate_xy(patch: PatchSample, angle: float) -> PatchSample:
    """Rotate every channel and the label about the patch z-axis center.

    Channels use linear interpolation, the label nearest-neighbour, so the
    label stays binary. Output shape is unchanged.
    """
    if angle == 0.0:
        return PatchSample(
            channels=[c.copy() for c in patch.channels],
            label=patch.label.copy(),
            center=patch.center,
            kind=patch.kind,
        )
    chans = [
        ndimage.rotate(c, angle, axes=(0, 1), reshape=False, order=1,
                       mode="constant", cval=0.0)
        for c in patch.channels
    ]
    lab = ndimage.rotate(patch.label.astype(np.uint8), angle, axes=(0, 1),
                         reshape=False, order=0, mode="constant", cval=0)
    return PatchSample(channels=chans, label=lab.astype(bool),
                       center=patch.center, kind=patch.kind)


# --------------------------------------------------------------------------
# intensity normalization (declared in the train config, applied by fusion)

def normalize_ct(data: np.ndarray, clip_hu: float = 1000.0) -> np.ndarray:
    """Clip to [-clip_hu, clip_hu] and scale to [-1, 1]."""
    return (np.clip(data, -clip_hu, clip_hu) / clip_hu).astype(np.float32)


def normalize_pet(data: np.ndarray) -> np.ndarray:
    """Z-score per volume; a constant volume maps to all zeros."""
    mu = float(data.mean())
    sd = float(data.std())
    if sd == 0.0:
        return np.zeros_like(data, dtype=np.float32)
    return ((data - mu) / sd).astype(np.float32)
