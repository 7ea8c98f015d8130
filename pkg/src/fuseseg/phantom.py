"""Synthetic patient generator: paired planning CT, misaligned diagnostic
CT + PET, ground-truth tumor masks, and the exact deformation relating the
two frames.

The phantom reproduces the contrast regimes the pipeline is built around:
the tumor is barely visible in CT (wall contrast on the order of the noise),
glows in PET, and is surrounded by PET-hot distractors with no CT correlate,
half of them sitting directly on the esophagus tube.

All tissue is rendered analytically: a volume in the diagnostic frame is the
planning-frame scene evaluated at y + psi(y), where psi is the per-case
misalignment (global translation plus a smooth random B-spline warp).  The
inverse of psi is recovered to sub-voxel accuracy by fixed-point iteration
and shipped with the case as the registration ground truth.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidSpec, IOFailure
from .register import ControlGrid, DeformationField, dense_displacement, save_field
from .volio import (
    CaseManifest,
    Mask,
    Modality,
    Volume,
    grid_points,
    save_manifest,
    save_mask,
    save_volume,
)

Triple = tuple[float, float, float]


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, tissue values, and corruption knobs for one dataset."""

    grid_shape: tuple[int, int, int] = (96, 96, 48)
    spacing: Triple = (1.0, 1.0, 2.5)

    body_center_mm: Triple = (48.0, 48.0, 60.0)
    body_radii_mm: Triple = (42.0, 38.0, 57.0)
    body_hu: float = 40.0
    air_hu: float = -1000.0

    lung_centers_mm: tuple = ((28.0, 44.0, 62.0), (68.0, 44.0, 62.0))
    lung_radii_mm: tuple = ((13.0, 16.0, 40.0), (13.0, 16.0, 40.0))
    lung_hu: float = -800.0

    esoph_center_xy_mm: tuple[float, float] = (48.0, 56.0)
    esoph_radius_mm: float = 4.5
    esoph_wall_hu: float = 30.0

    gtv_radius_xy_mm: tuple[float, float] = (7.0, 11.0)
    gtv_radius_z_mm: tuple[float, float] = (12.0, 20.0)
    gtv_center_z_mm: tuple[float, float] = (48.0, 72.0)
    gtv_center_xy_jitter_mm: float = 3.0
    gtv_ct_contrast: float = 15.0

    ct_noise_sigma: float = 10.0

    pet_background_uptake: float = 1.0
    pet_lung_uptake: float = 0.2
    pet_gtv_uptake: float = 5.0
    pet_noise_sigma: float = 0.05
    pet_blur_sigma_mm: float = 4.0

    distractor_count: int = 4
    distractor_uptake: float = 5.0
    distractor_radius_mm: float = 6.0

    misalignment_max_mm: float = 8.0
    misalign_control_spacing_mm: float = 32.0
    translation_max_mm: float = 10.0

    def extent_mm(self) -> np.ndarray:
        return (np.asarray(self.grid_shape) - 1) * np.asarray(self.spacing)

    def validate(self) -> "PhantomSpec":
        if any(n < 8 for n in self.grid_shape):
            raise InvalidSpec(f"grid too small: {self.grid_shape}")
        if any(s <= 0 for s in self.spacing):
            raise InvalidSpec(f"spacing must be positive: {self.spacing}")
        radii = (
            list(self.body_radii_mm)
            + [r for lung in self.lung_radii_mm for r in lung]
            + [self.esoph_radius_mm, self.distractor_radius_mm]
            + list(self.gtv_radius_xy_mm)
            + list(self.gtv_radius_z_mm)
        )
        if any(r <= 0 for r in radii):
            raise InvalidSpec("all radii must be positive")
        lo = np.asarray(self.body_center_mm) - np.asarray(self.body_radii_mm)
        hi = np.asarray(self.body_center_mm) + np.asarray(self.body_radii_mm)
        if (lo < 0).any() or (hi > self.extent_mm()).any():
            raise InvalidSpec("body ellipsoid leaves the grid")
        if self.gtv_radius_xy_mm[0] > self.gtv_radius_xy_mm[1] or \
           self.gtv_radius_z_mm[0] > self.gtv_radius_z_mm[1]:
            raise InvalidSpec("GTV radius ranges must be (lo, hi)")
        # jittered GTV center must still intersect the tube
        if self.gtv_center_xy_jitter_mm * np.sqrt(2.0) >= \
           self.esoph_radius_mm + self.gtv_radius_xy_mm[0]:
            raise InvalidSpec("GTV xy jitter breaks tube intersection")
        if self.distractor_count < 0:
            raise InvalidSpec("distractor_count must be >= 0")
        for name in ("ct_noise_sigma", "pet_noise_sigma", "pet_blur_sigma_mm",
                     "misalignment_max_mm", "translation_max_mm"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be >= 0")
        if self.misalign_control_spacing_mm < 2.0 * max(self.spacing):
            raise InvalidSpec("misalignment control spacing too fine for the grid")
        return self


def save_spec(spec: PhantomSpec, path) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(spec), fh, indent=1)
    except OSError as exc:
        raise IOFailure(f"cannot write spec {path}: {exc}") from exc


def spec_from_dict(raw: dict) -> PhantomSpec:
    def tup(v):
        return tuple(tup(x) for x in v) if isinstance(v, list) else v

    known = {f.name for f in dataclasses.fields(PhantomSpec)}
    unknown = set(raw) - known
    if unknown:
        raise InvalidSpec(f"unknown phantom fields: {sorted(unknown)}")
    return PhantomSpec(**{k: tup(v) for k, v in raw.items()}).validate()


def load_spec(path) -> PhantomSpec:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise IOFailure(f"cannot read spec {path}: {exc}") from exc
    return spec_from_dict(raw)


@dataclass
class CaseGeometry:
    """Per-case randomized scene parameters, kept for oracle checks."""

    gtv_center_mm: np.ndarray          # (3,)
    gtv_radii_mm: np.ndarray           # (3,)
    distractors_mm: np.ndarray         # (n, 3) sphere centers
    translation_mm: np.ndarray         # (3,) global part of psi
    warp: ControlGrid | None           # smooth part of psi, None when zero


@dataclass
class PhantomCase:
    rtct: Volume
    diag_ct: Volume
    pet: Volume
    gtv_mask: Mask
    true_field: DeformationField       # diagnostic -> planning frame
    geometry: CaseGeometry


# --------------------------------------------------------------------------
# analytic scene

def _in_ellipsoid(points, center, radii) -> np.ndarray:
    d = (np.asarray(points, dtype=np.float64) - np.asarray(center)) / np.asarray(radii)
    return (d * d).sum(axis=-1) <= 1.0


def _body_z_halfspan(spec: PhantomSpec, x: float, y: float) -> float:
    cx, cy, cz = spec.body_center_mm
    rx, ry, rz = spec.body_radii_mm
    s = 1.0 - ((x - cx) / rx) ** 2 - ((y - cy) / ry) ** 2
    return rz * np.sqrt(max(s, 0.0))


def render_ct(spec: PhantomSpec, geom: CaseGeometry, points: np.ndarray) -> np.ndarray:
    """Noise-free CT (HU) at arbitrary physical points, shape points[..., 0]."""
    p = np.asarray(points, dtype=np.float64)
    out = np.full(p.shape[:-1], spec.air_hu, dtype=np.float64)
    body = _in_ellipsoid(p, spec.body_center_mm, spec.body_radii_mm)
    out[body] = spec.body_hu
    for center, radii in zip(spec.lung_centers_mm, spec.lung_radii_mm):
        out[body & _in_ellipsoid(p, center, radii)] = spec.lung_hu
    ex, ey = spec.esoph_center_xy_mm
    tube = (p[..., 0] - ex) ** 2 + (p[..., 1] - ey) ** 2 <= spec.esoph_radius_mm ** 2
    out[body & tube] = spec.esoph_wall_hu
    gtv = _in_ellipsoid(p, geom.gtv_center_mm, geom.gtv_radii_mm)
    out[body & gtv] = spec.esoph_wall_hu + spec.gtv_ct_contrast
    return out


def render_pet(spec: PhantomSpec, geom: CaseGeometry, points: np.ndarray) -> np.ndarray:
    """Noise-free, unblurred uptake at arbitrary physical points.

    Distractors are PET-only: they leave render_ct untouched.
    """
    p = np.asarray(points, dtype=np.float64)
    out = np.zeros(p.shape[:-1], dtype=np.float64)
    body = _in_ellipsoid(p, spec.body_center_mm, spec.body_radii_mm)
    out[body] = spec.pet_background_uptake
    for center, radii in zip(spec.lung_centers_mm, spec.lung_radii_mm):
        out[body & _in_ellipsoid(p, center, radii)] = spec.pet_lung_uptake
    gtv = _in_ellipsoid(p, geom.gtv_center_mm, geom.gtv_radii_mm)
    out[body & gtv] = spec.pet_gtv_uptake
    r = spec.distractor_radius_mm
    for center in geom.distractors_mm:
        hot = body & _in_ellipsoid(p, center, (r, r, r))
        out[hot] = np.maximum(out[hot], spec.distractor_uptake)
    return out


def gtv_mask_of(spec: PhantomSpec, geom: CaseGeometry) -> Mask:
    pts = grid_points(spec.grid_shape, spec.spacing)
    return Mask(_in_ellipsoid(pts, geom.gtv_center_mm, geom.gtv_radii_mm), spec.spacing)


# --------------------------------------------------------------------------
# per-case randomization

def _draw_geometry(spec: PhantomSpec, rng: np.random.Generator) -> CaseGeometry:
    rxy = rng.uniform(*spec.gtv_radius_xy_mm)
    rz = rng.uniform(*spec.gtv_radius_z_mm)
    cz = rng.uniform(*spec.gtv_center_z_mm)
    jitter = rng.uniform(-spec.gtv_center_xy_jitter_mm, spec.gtv_center_xy_jitter_mm, 2)
    center = np.array([spec.esoph_center_xy_mm[0] + jitter[0],
                       spec.esoph_center_xy_mm[1] + jitter[1], cz])
    radii = np.array([rxy, rxy, rz])
    # the tumor must live strictly inside the body
    span = _body_z_halfspan(spec, center[0], center[1])
    if abs(cz - spec.body_center_mm[2]) + rz >= span:
        raise InvalidSpec(
            "GTV z range reaches the body boundary; shrink gtv_center_z_mm or radii"
        )

    distractors = _place_distractors(spec, rng, center, radii)
    translation = _draw_translation(spec, rng)
    warp = _draw_warp(spec, rng)
    return CaseGeometry(center, radii, distractors, translation, warp)


def _draw_translation(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    direction = rng.normal(size=3)
    direction /= max(np.linalg.norm(direction), 1e-12)
    return direction * spec.translation_max_mm


def _draw_warp(spec: PhantomSpec, rng: np.random.Generator) -> ControlGrid | None:
    grid = ControlGrid.for_volume(
        spec.grid_shape, spec.spacing, (0.0, 0.0, 0.0), spec.misalign_control_spacing_mm
    )
    coeff = rng.normal(size=grid.coefficients.shape)
    if spec.misalignment_max_mm == 0.0:
        return None
    grid.coefficients = coeff
    dense = dense_displacement(grid, spec.grid_shape, spec.spacing)
    peak = float(np.sqrt((dense * dense).sum(axis=-1)).max())
    grid.coefficients = coeff * (spec.misalignment_max_mm / max(peak, 1e-12))
    return grid


def _place_distractors(spec, rng, gtv_center, gtv_radii) -> np.ndarray:
    n = spec.distractor_count
    if n == 0:
        return np.zeros((0, 3))
    keepout = 2.0 * float(gtv_radii.max())
    pad = spec.distractor_radius_mm + 2.0
    n_tube = (n + 1) // 2
    ex, ey = spec.esoph_center_xy_mm
    cz_body = spec.body_center_mm[2]
    span = _body_z_halfspan(spec, ex, ey) - pad
    z_lo, z_hi = cz_body - span, cz_body + span
    # allowed tube segments: the z interval minus a keepout window on the GTV
    segs = [
        (z_lo, min(z_hi, gtv_center[2] - keepout)),
        (max(z_lo, gtv_center[2] + keepout), z_hi),
    ]
    segs = [(a, b) for a, b in segs if b > a]
    total = sum(b - a for a, b in segs)
    if total <= 0:
        raise InvalidSpec("no room on the tube for distractors outside the GTV keepout")
    centers = []
    for _ in range(n_tube):
        u = rng.uniform(0.0, total)
        for a, b in segs:
            if u <= b - a:
                centers.append(np.array([ex, ey, a + u]))
                break
            u -= b - a
    body_c = np.asarray(spec.body_center_mm)
    body_r = np.asarray(spec.body_radii_mm) - pad
    for _ in range(n - n_tube):
        for _attempt in range(1000):
            cand = body_c + rng.uniform(-1.0, 1.0, 3) * body_r
            if not _in_ellipsoid(cand, body_c, body_r):
                continue
            if np.linalg.norm(cand - gtv_center) < keepout:
                continue
            in_lung = any(
                _in_ellipsoid(cand, c, np.asarray(r) + pad)
                for c, r in zip(spec.lung_centers_mm, spec.lung_radii_mm)
            )
            if in_lung:
                continue
            if any(np.linalg.norm(cand - c) < 2 * spec.distractor_radius_mm
                   for c in centers):
                continue
            centers.append(cand)
            break
        else:
            raise InvalidSpec("could not place off-tube distractors; spec too crowded")
    return np.stack(centers)


# --------------------------------------------------------------------------
# misalignment field and its inverse

def psi_dense(spec: PhantomSpec, geom: CaseGeometry) -> np.ndarray:
    """Diagnostic-frame displacement psi on the grid, (x,y,z,3) mm."""
    out = np.broadcast_to(
        geom.translation_mm, tuple(spec.grid_shape) + (3,)
    ).astype(np.float64).copy()
    if geom.warp is not None:
        out += dense_displacement(geom.warp, spec.grid_shape, spec.spacing)
    return out


def invert_field(psi: np.ndarray, spacing, iterations: int = 15) -> np.ndarray:
    """Solve tau(x) + psi(x + tau(x)) = 0 by fixed-point iteration.

    psi is sampled with trilinear interpolation (edge-clamped), which is
    accurate because the field is far smoother than the voxel grid.
    """
    sp = np.asarray(spacing, dtype=np.float64)
    tau = -psi.copy()
    pts = grid_points(psi.shape[:3], spacing)
    for _ in range(iterations):
        q = ((pts + tau) / sp).transpose(3, 0, 1, 2)
        sampled = np.stack(
            [ndimage.map_coordinates(psi[..., c], q, order=1, mode="nearest")
             for c in range(3)],
            axis=-1,
        )
        new = -sampled
        if float(np.abs(new - tau).max()) < 1e-4:
            tau = new
            break
        tau = new
    return tau


# --------------------------------------------------------------------------
# generation

def generate_case(spec: PhantomSpec, seed: int) -> PhantomCase:
    """One deterministic synthetic patient.

    The planning CT carries fresh noise; the diagnostic CT and PET are the
    same scene rendered at misaligned positions with their own noise draws.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    geom = _draw_geometry(spec, rng)
    shape, spacing = spec.grid_shape, spec.spacing
    pts = grid_points(shape, spacing)

    ct_clean = render_ct(spec, geom, pts)
    rtct = Volume(
        ct_clean + rng.normal(0.0, spec.ct_noise_sigma, shape),
        spacing, modality=Modality.CT,
    )

    psi = psi_dense(spec, geom)
    diag_pts = pts + psi
    diag_clean = render_ct(spec, geom, diag_pts)
    diag_ct = Volume(
        diag_clean + rng.normal(0.0, spec.ct_noise_sigma, shape),
        spacing, modality=Modality.CT,
    )

    pet_raw = render_pet(spec, geom, diag_pts)
    pet_raw = pet_raw + rng.normal(0.0, spec.pet_noise_sigma, shape)
    sigma_vox = [spec.pet_blur_sigma_mm / s for s in spacing]
    pet = Volume(
        ndimage.gaussian_filter(pet_raw, sigma=sigma_vox),
        spacing, modality=Modality.PET,
    )

    mask = gtv_mask_of(spec, geom)
    if mask.count() == 0:
        raise InvalidSpec("GTV rendered to zero voxels; radii below grid resolution")

    tau = invert_field(psi, spacing)
    true_field = DeformationField(tau.astype(np.float32), spacing)
    return PhantomCase(rtct, diag_ct, pet, mask, true_field, geom)


def generate_dataset(spec: PhantomSpec, n_cases: int, seed: int, out_dir) -> Path:
    """Write n_cases phantoms (per-case seed = seed + index); return manifest path."""
    if n_cases < 1:
        raise InvalidSpec(f"n_cases must be >= 1, got {n_cases}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out}: {exc}") from exc
    records = []
    for i in range(n_cases):
        case_id = f"case_{i:03d}"
        case = generate_case(spec, seed + i)
        cdir = out / case_id
        save_volume(case.rtct, cdir / "rtct")
        save_volume(case.diag_ct, cdir / "diag_ct")
        save_volume(case.pet, cdir / "pet")
        save_mask(case.gtv_mask, cdir / "gtv")
        save_field(case.true_field, cdir / "true_field")
        records.append(CaseManifest(
            case_id=case_id,
            rtct=str(cdir / "rtct"),
            diag_ct=str(cdir / "diag_ct"),
            pet=str(cdir / "pet"),
            gtv_mask=str(cdir / "gtv"),
            true_field=str(cdir / "true_field"),
        ))
    manifest = out / "manifest.json"
    save_manifest(records, manifest)
    save_spec(spec, out / "phantom_spec.json")
    return manifest
