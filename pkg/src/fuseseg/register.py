"""Diagnostic-to-planning CT alignment: lung mass-center rigid initialization
followed by coarse-to-fine cubic B-spline free-form deformation, then
application of the recovered field to the PET volume.

Conventions:
  * a displacement field u assigns each fixed-grid voxel a vector in mm and
    warping reads output(x) = moving(x + u(x))  (pull-back)
  * control nodes sit at origin + (i - 1) * control_spacing, so node index 1
    is at the volume origin and one node of margin surrounds the extent
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    EmptyMask,
    InvalidConfig,
    IOFailure,
    MissingHeader,
    NoLungFound,
    NonFiniteData,
    OutOfExtent,
    ShapeMismatch,
)
from .volio import (
    CaseManifest,
    Interp,
    Mask,
    Modality,
    Volume,
    grid_points,
    load_volume,
    save_volume,
)


class Similarity(str, Enum):
    NCC = "NCC"
    MSE = "MSE"


# --------------------------------------------------------------------------
# cubic B-spline machinery

def _bspline_weights(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline basis at fractional offset t in [0, 1), (..., 4)."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    w = np.empty(t.shape + (4,), dtype=np.float64)
    w[..., 0] = (1.0 - t) ** 3 / 6.0
    w[..., 1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w[..., 2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w[..., 3] = t3 / 6.0
    return w


@dataclass
class ControlGrid:
    """Displacement coefficients (mm) on a regular node lattice covering a
    fixed volume with a one-node margin on every side."""

    control_spacing: tuple[float, float, float]  # mm per axis
    origin: tuple[float, float, float]           # fixed volume origin, mm
    coefficients: np.ndarray                     # (Nx, Ny, Nz, 3) mm

    def __post_init__(self):
        self.control_spacing = tuple(float(s) for s in self.control_spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.ndim != 4 or self.coefficients.shape[-1] != 3:
            raise ShapeMismatch(
                f"coefficients must be (Nx,Ny,Nz,3), got {self.coefficients.shape}"
            )
        if not np.isfinite(self.coefficients).all():
            raise NonFiniteData("control coefficients contain NaN or Inf")

    @property
    def node_counts(self) -> tuple[int, int, int]:
        return self.coefficients.shape[:3]

    @classmethod
    def for_volume(cls, shape, spacing, origin, control_spacing) -> "ControlGrid":
        """Zero-coefficient grid sized so every voxel center has full 4^3 support."""
        control_spacing = tuple(float(s) for s in np.broadcast_to(control_spacing, 3))
        for a in range(3):
            if control_spacing[a] < 2.0 * spacing[a]:
                raise InvalidConfig(
                    f"control spacing {control_spacing[a]} < 2x voxel spacing "
                    f"{spacing[a]} on axis {a}"
                )
        counts = tuple(
            int(np.floor((shape[a] - 1) * spacing[a] / control_spacing[a])) + 4
            for a in range(3)
        )
        return cls(control_spacing, tuple(origin), np.zeros(counts + (3,)))


def _node_coords(points, grid: ControlGrid, clamp: bool):
    """Map physical points onto grid index space: base node + basis weights.

    Returns (base (...,3) int, weights list of three (...,4) arrays).  With
    clamp=True, out-of-extent points reuse the nearest boundary span and the
    basis polynomials extrapolate (their sum is identically 1 for any t).
    """
    p = np.asarray(points, dtype=np.float64)
    counts = grid.node_counts
    base = np.empty(p.shape, dtype=np.int64)
    weights = []
    for a in range(3):
        u = (p[..., a] - grid.origin[a]) / grid.control_spacing[a] + 1.0
        b = np.floor(u).astype(np.int64) - 1
        if clamp:
            b = np.clip(b, 0, counts[a] - 4)
        elif ((b < 0) | (b + 3 > counts[a] - 1)).any():
            raise OutOfExtent(f"point outside supported B-spline extent on axis {a}")
        base[..., a] = b
        weights.append(_bspline_weights(u - (b + 1)))
    return base, weights


def bspline_displacement(grid: ControlGrid, point, clamp: bool = False) -> np.ndarray:
    """Tensor-product cubic B-spline displacement (mm) at physical point(s).

    Accepts a single (3,) point or an (..., 3) array.  Points outside the
    grid's supported extent raise OutOfExtent unless clamp=True.
    """
    p = np.asarray(point, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    base, weights = _node_coords(p, grid, clamp)
    out = np.zeros(p.shape, dtype=np.float64)
    c = grid.coefficients
    for i in range(4):
        for j in range(4):
            for k in range(4):
                w = weights[0][..., i] * weights[1][..., j] * weights[2][..., k]
                out += w[..., None] * c[base[..., 0] + i, base[..., 1] + j, base[..., 2] + k]
    return out[0] if single else out


def _axis_weight_matrix(n_vox: int, spacing: float, delta: float, n_nodes: int) -> np.ndarray:
    """Dense (n_vox, n_nodes) matrix: row v holds the 4 basis weights of voxel v."""
    u = np.arange(n_vox, dtype=np.float64) * spacing / delta + 1.0
    fl = np.floor(u)
    base = fl.astype(np.int64) - 1
    w = _bspline_weights(u - fl)
    mat = np.zeros((n_vox, n_nodes), dtype=np.float64)
    rows = np.arange(n_vox)
    for i in range(4):
        mat[rows, base + i] = w[:, i]
    return mat


def _weight_matrices(grid: ControlGrid, shape, spacing):
    return [
        _axis_weight_matrix(shape[a], spacing[a], grid.control_spacing[a], grid.node_counts[a])
        for a in range(3)
    ]


def dense_displacement(grid: ControlGrid, shape, spacing, mats=None) -> np.ndarray:
    """Evaluate the spline on every voxel of a grid, separably. (x,y,z,3) mm."""
    mats = mats if mats is not None else _weight_matrices(grid, shape, spacing)
    return _dense_displacement(grid.coefficients, *mats)


def _dense_displacement(coefficients, wx, wy, wz):
    out = np.einsum("xi,ijkc->xjkc", wx, coefficients)
    out = np.einsum("yj,xjkc->xykc", wy, out)
    out = np.einsum("zk,xykc->xyzc", wz, out)
    return out


def _scatter_to_nodes(gvec, wx, wy, wz):
    """Adjoint of _dense_displacement: voxel gradients -> node gradients."""
    out = np.einsum("xi,xyzc->iyzc", wx, gvec)
    out = np.einsum("yj,iyzc->ijzc", wy, out)
    out = np.einsum("zk,ijzc->ijkc", wz, out)
    return out


@dataclass
class DeformationField:
    """Per-voxel displacement vectors (mm) on the fixed grid."""

    data: np.ndarray  # (x, y, z, 3) float32 mm
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ShapeMismatch(f"field must be (x,y,z,3), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteData("deformation field contains NaN or Inf")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]


_COMPONENTS = ("dx", "dy", "dz")


def save_field(fld: DeformationField, path) -> None:
    """Three x-fastest float32 component blobs plus one shared json header."""
    base = Path(str(path))
    header = {
        "shape": list(fld.shape),
        "spacing": list(fld.spacing),
        "origin": list(fld.origin),
        "dtype": "f32le",
        "components": [f"{base.name}.{c}.raw" for c in _COMPONENTS],
    }
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        for a, comp in enumerate(_COMPONENTS):
            with open(base.parent / f"{base.name}.{comp}.raw", "wb") as fh:
                fh.write(fld.data[..., a].astype("<f4").tobytes(order="F"))
        with open(base.parent / f"{base.name}.field.json", "w") as fh:
            json.dump(header, fh, indent=1)
    except OSError as exc:
        raise IOFailure(f"cannot write field {base}: {exc}") from exc


def load_field(path) -> DeformationField:
    base = Path(str(path))
    header_path = base.parent / f"{base.name}.field.json"
    if not header_path.exists():
        raise MissingHeader(f"no field header at {header_path}")
    with open(header_path) as fh:
        header = json.load(fh)
    shape = tuple(int(n) for n in header["shape"])
    comps = []
    try:
        for name in header["components"]:
            raw = np.fromfile(base.parent / name, dtype="<f4")
            if raw.size != int(np.prod(shape)):
                raise ShapeMismatch(
                    f"component {name}: {raw.size} values, header says {shape}"
                )
            comps.append(raw.reshape(shape, order="F"))
    except OSError as exc:
        raise IOFailure(f"cannot read field {base}: {exc}") from exc
    data = np.stack(comps, axis=-1)
    return DeformationField(data, tuple(header["spacing"]), tuple(header["origin"]))


# --------------------------------------------------------------------------
# rigid initialization

LUNG_HU_THRESHOLD = -400.0


def lung_mask(ct: Volume) -> Mask:
    """Threshold surrogate for a learned lung segmenter.

    Air-valued voxels (< -400 HU) are labeled; components touching the grid
    border (ambient air) are dropped and the two largest remaining components
    are kept, lightly closed.
    """
    air = ct.data < LUNG_HU_THRESHOLD
    labels, n = ndimage.label(air)
    if n == 0:
        raise NoLungFound("no sub-threshold voxels")
    border = np.zeros_like(air)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    touching = np.unique(labels[border & air])
    sizes = ndimage.sum_labels(air, labels, index=np.arange(1, n + 1))
    for lab in touching:
        if lab > 0:
            sizes[lab - 1] = 0
    order = np.argsort(sizes)[::-1]
    keep = [int(order[i]) + 1 for i in range(min(2, len(order))) if sizes[order[i]] > 0]
    if not keep:
        raise NoLungFound("all candidate components touch the volume border")
    out = np.isin(labels, keep)
    out = ndimage.binary_closing(out, structure=ndimage.generate_binary_structure(3, 1))
    return Mask(out, ct.spacing, ct.origin)


def mass_center(mask: Mask, spacing) -> np.ndarray:
    """Spacing-weighted centroid of foreground voxels, physical mm."""
    if mask.count() == 0:
        raise EmptyMask("mass center of an empty mask")
    idx = np.argwhere(mask.data)
    return np.asarray(mask.origin) + idx.mean(axis=0) * np.asarray(spacing, dtype=np.float64)


@dataclass
class RigidInit:
    translation: np.ndarray  # (3,) mm
    fallback: bool           # True when lung masking failed on either input


def _intensity_centroid(ct: Volume) -> np.ndarray:
    w = np.clip(ct.data.astype(np.float64) + 1000.0, 0.0, None)
    total = w.sum()
    if total <= 0:
        w = np.ones_like(w)
        total = w.size
    pts = grid_points(ct.shape, ct.spacing, ct.origin)
    return (w[..., None] * pts).reshape(-1, 3).sum(axis=0) / total


def rigid_init(fixed_ct: Volume, moving_ct: Volume) -> RigidInit:
    """Translation aligning lung mass centers: center(fixed) - center(moving).

    Falls back to intensity-weighted whole-volume centroids when lung masking
    fails on either input, and flags that it did.
    """
    try:
        cf = mass_center(lung_mask(fixed_ct), fixed_ct.spacing)
        cm = mass_center(lung_mask(moving_ct), moving_ct.spacing)
        return RigidInit(cf - cm, fallback=False)
    except NoLungFound:
        cf = _intensity_centroid(fixed_ct)
        cm = _intensity_centroid(moving_ct)
        return RigidInit(cf - cm, fallback=True)


# --------------------------------------------------------------------------
# warping

def _trilinear(data: np.ndarray, q: np.ndarray, pad_value: float, want_grad: bool):
    """Sample `data` at fractional voxel coords q (..., 3).

    Returns (values, grad) where grad is d(value)/dq (zero outside the grid
    and wherever the sample is padded); grad is None unless requested.
    """
    shape = data.shape
    valid = np.ones(q.shape[:-1], dtype=bool)
    idx0 = np.empty(q.shape[:-1] + (3,), dtype=np.int64)
    frac = np.empty_like(q)
    for a in range(3):
        qa = q[..., a]
        valid &= (qa >= 0.0) & (qa <= shape[a] - 1)
        i0 = np.clip(np.floor(qa), 0, max(shape[a] - 2, 0)).astype(np.int64)
        idx0[..., a] = i0
        frac[..., a] = qa - i0
    x0, y0, z0 = idx0[..., 0], idx0[..., 1], idx0[..., 2]
    x1 = np.minimum(x0 + 1, shape[0] - 1)
    y1 = np.minimum(y0 + 1, shape[1] - 1)
    z1 = np.minimum(z0 + 1, shape[2] - 1)
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    c000 = data[x0, y0, z0]
    c100 = data[x1, y0, z0]
    c010 = data[x0, y1, z0]
    c110 = data[x1, y1, z0]
    c001 = data[x0, y0, z1]
    c101 = data[x1, y0, z1]
    c011 = data[x0, y1, z1]
    c111 = data[x1, y1, z1]

    c00 = c000 * gx + c100 * fx
    c10 = c010 * gx + c110 * fx
    c01 = c001 * gx + c101 * fx
    c11 = c011 * gx + c111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    values = np.where(valid, c0 * gz + c1 * fz, pad_value)

    if not want_grad:
        return values, None

    dx = ((c100 - c000) * gy + (c110 - c010) * fy) * gz \
        + ((c101 - c001) * gy + (c111 - c011) * fy) * fz
    dy = (c10 - c00) * gz + (c11 - c01) * fz
    dz = c1 - c0
    grad = np.stack([dx, dy, dz], axis=-1)
    grad[~valid] = 0.0
    return values, grad


def warp_volume(
    vol: Volume,
    fld: DeformationField,
    interp: Interp = Interp.TRILINEAR,
    pad_value: float = 0.0,
) -> Volume:
    """Pull-back warp: output(x) = vol(x + field(x)), pad outside the extent."""
    if vol.data.shape != fld.shape:
        raise ShapeMismatch(
            f"volume {vol.data.shape} vs field {fld.shape}: warp assumes a shared grid"
        )
    pts = grid_points(fld.shape, fld.spacing, fld.origin) + fld.data
    q = (pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    if interp == Interp.NEAREST:
        qr = np.round(q).astype(np.int64)
        valid = np.all((qr >= 0) & (qr < np.asarray(vol.data.shape)), axis=-1)
        qc = np.clip(qr, 0, np.asarray(vol.data.shape) - 1)
        out = np.where(valid, vol.data[qc[..., 0], qc[..., 1], qc[..., 2]], pad_value)
    else:
        out, _ = _trilinear(vol.data.astype(np.float64), q, pad_value, want_grad=False)
    return Volume(out.astype(np.float32), fld.spacing, fld.origin, vol.modality)


# --------------------------------------------------------------------------
# deformable registration

@dataclass
class RegParams:
    """Coarse-to-fine schedule plus similarity/regularizer knobs."""

    downsample_factors: tuple[int, ...] = (4, 2, 1)
    control_spacings_mm: tuple[float, ...] = (32.0, 16.0, 8.0)
    similarity: Similarity = Similarity.NCC
    bending_weight: float = 0.01
    steps_per_level: tuple[int, ...] = (80, 40, 16)
    step_size_mm: float = 2.0

    def __post_init__(self):
        n = len(self.downsample_factors)
        if not (len(self.control_spacings_mm) == len(self.steps_per_level) == n):
            raise InvalidConfig("per-level parameter lists must have equal length")
        if n == 0:
            raise InvalidConfig("at least one pyramid level required")
        if list(self.downsample_factors) != sorted(self.downsample_factors, reverse=True):
            raise InvalidConfig("downsample factors must go coarse to fine")
        if list(self.control_spacings_mm) != sorted(self.control_spacings_mm, reverse=True):
            raise InvalidConfig("control spacings must go coarse to fine")
        if self.bending_weight < 0:
            raise InvalidConfig("bending_weight must be >= 0")


def _downsample(vol: Volume, factor: int) -> Volume:
    if factor == 1:
        return vol
    sm = ndimage.gaussian_filter(vol.data.astype(np.float64), sigma=factor / 2.0)
    data = sm[::factor, ::factor, ::factor]
    spacing = tuple(s * factor for s in vol.spacing)
    return Volume(data.astype(np.float32), spacing, vol.origin, vol.modality)


def _similarity_and_grad(fixed: np.ndarray, warped: np.ndarray, kind: Similarity):
    """Dissimilarity in [0, 2] and its gradient w.r.t. the warped image."""
    f = fixed.astype(np.float64)
    w = warped.astype(np.float64)
    if kind == Similarity.MSE:
        diff = w - f
        scale = 1.0 / f.size
        return float((diff * diff).sum() * scale), 2.0 * scale * diff
    fh = f - f.mean()
    wh = w - w.mean()
    a = float((fh * wh).sum())
    b = float((wh * wh).sum())
    c = float((fh * fh).sum())
    if b < 1e-12 or c < 1e-12:
        return 1.0, np.zeros_like(w)
    ncc = a / np.sqrt(b * c)
    # d(ncc)/dw = (fh - (a/b) wh) / sqrt(b c); mean-shift terms vanish
    grad = -(fh - (a / b) * wh) / np.sqrt(b * c)
    return 1.0 - ncc, grad


def _bending_energy_and_grad(coefficients: np.ndarray):
    """Mean squared second difference of the coefficient lattice, all axes.

    Zero for any affine (in particular constant) coefficient field, so pure
    translations are never penalized.
    """
    c = coefficients
    n = c[..., 0].size
    energy = 0.0
    grad = np.zeros_like(c)
    for axis in range(3):
        if c.shape[axis] < 3:
            continue
        sl = [slice(None)] * 4
        sl_lo, sl_mid, sl_hi = list(sl), list(sl), list(sl)
        sl_lo[axis] = slice(None, -2)
        sl_mid[axis] = slice(1, -1)
        sl_hi[axis] = slice(2, None)
        d = c[tuple(sl_lo)] - 2.0 * c[tuple(sl_mid)] + c[tuple(sl_hi)]
        energy += float((d * d).sum())
        grad[tuple(sl_lo)] += 2.0 * d
        grad[tuple(sl_mid)] -= 4.0 * d
        grad[tuple(sl_hi)] += 2.0 * d
    return energy / n, grad / n


class _LevelProblem:
    """Objective/gradient of one pyramid level, coefficients as the unknowns."""

    def __init__(self, fixed: Volume, moving: Volume, init_shift: np.ndarray,
                 grid: ControlGrid, params: RegParams):
        self.fixed = fixed.data.astype(np.float64)
        self.moving = moving.data.astype(np.float64)
        self.spacing = np.asarray(fixed.spacing)
        self.origin = np.asarray(fixed.origin)
        self.mov_origin = np.asarray(moving.origin)
        self.init_shift = init_shift
        self.grid = grid
        self.params = params
        self.pad = float(self.moving.min())
        self.mats = _weight_matrices(grid, fixed.data.shape, fixed.spacing)
        self.base_pts = grid_points(fixed.data.shape, fixed.spacing, fixed.origin)

    def displacement(self, coeff: np.ndarray) -> np.ndarray:
        return _dense_displacement(coeff, *self.mats) - self.init_shift

    def objective(self, coeff: np.ndarray, want_grad: bool):
        disp = self.displacement(coeff)
        q = (self.base_pts + disp - self.mov_origin) / self.spacing
        warped, gq = _trilinear(self.moving, q, self.pad, want_grad)
        sim, dsim_dw = _similarity_and_grad(self.fixed, warped, self.params.similarity)
        bend, dbend = _bending_energy_and_grad(coeff)
        value = sim + self.params.bending_weight * bend
        if not want_grad:
            return value, None
        gvec = dsim_dw[..., None] * (gq / self.spacing)
        grad = _scatter_to_nodes(gvec, *self.mats)
        grad += self.params.bending_weight * dbend
        return value, grad


def _optimize_level(problem: _LevelProblem, steps: int, step0: float):
    coeff = problem.grid.coefficients.copy()
    value, grad = problem.objective(coeff, want_grad=True)
    trace = [value]
    step = step0
    for _ in range(steps):
        gnorm = float(np.abs(grad).max())
        if gnorm < 1e-12:
            break
        direction = -grad / gnorm  # largest component moves step mm
        accepted = False
        trial = step
        for _ in range(20):
            cand = coeff + trial * direction
            cand_val, _ = problem.objective(cand, want_grad=False)
            if cand_val < value - 1e-12:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            break
        coeff = cand
        value = cand_val
        step = min(trial * 2.0, step0 * 4.0)
        trace.append(value)
        _, grad = problem.objective(coeff, want_grad=True)
    return coeff, trace


@dataclass
class RegResult:
    """Dense recovered field plus the per-level optimization record."""

    field: DeformationField
    diagnostics: dict = field(default_factory=dict)


def register_ffd(
    fixed: Volume,
    moving: Volume,
    init: np.ndarray,
    params: RegParams | None = None,
) -> RegResult:
    """Coarse-to-fine B-spline registration of moving onto fixed.

    `init` is the rigid translation (mm) from rigid_init; the returned dense
    field composes it with the optimized spline, so
    warp_volume(moving, result.field) approximates fixed.  Non-convergence is
    not an error: the best coefficients seen are returned, with the objective
    trace in diagnostics.
    """
    params = params or RegParams()
    if tuple(fixed.spacing) != tuple(moving.spacing):
        raise InvalidConfig(
            f"register_ffd expects equal spacings, got {fixed.spacing} vs {moving.spacing}"
        )
    init = np.asarray(init, dtype=np.float64)
    levels = []
    prev_grid: ControlGrid | None = None
    for factor, cs_mm, steps in zip(
        params.downsample_factors, params.control_spacings_mm, params.steps_per_level
    ):
        fx = _downsample(fixed, factor)
        mv = _downsample(moving, factor)
        grid = ControlGrid.for_volume(fx.data.shape, fx.spacing, fx.origin, cs_mm)
        if prev_grid is not None:
            # seed from the coarser solution: sample its field at our nodes
            nodes = grid_points(
                grid.node_counts,
                grid.control_spacing,
                tuple(np.asarray(grid.origin) - np.asarray(grid.control_spacing)),
            )
            grid.coefficients = bspline_displacement(prev_grid, nodes, clamp=True)
        problem = _LevelProblem(fx, mv, init, grid, params)
        coeff, trace = _optimize_level(problem, steps, params.step_size_mm)
        grid.coefficients = coeff
        prev_grid = grid
        levels.append({
            "factor": factor,
            "control_spacing_mm": cs_mm,
            "objective": trace,
            "converged": len(trace) < steps + 1,
        })
    final_mats = _weight_matrices(prev_grid, fixed.data.shape, fixed.spacing)
    dense = _dense_displacement(prev_grid.coefficients, *final_mats) - init
    fld = DeformationField(dense.astype(np.float32), fixed.spacing, fixed.origin)
    return RegResult(fld, {"levels": levels, "init_translation_mm": init.tolist()})


def register_case(
    case: CaseManifest,
    params: RegParams | None = None,
    out_path=None,
) -> Volume:
    """Full per-case pipeline: rigid init, FFD on the CT pair, warp the PET.

    The PET is assumed hardware co-registered to the diagnostic CT, so the
    CT-derived field transfers directly.  When out_path is given the result
    is saved there and the manifest record's pet_reg is updated.
    """
    fixed = load_volume(case.rtct)
    moving = load_volume(case.diag_ct)
    pet = load_volume(case.pet)
    rigid = rigid_init(fixed, moving)
    result = register_ffd(fixed, moving, rigid.translation, params)
    pet_reg = warp_volume(pet, result.field, Interp.TRILINEAR, pad_value=0.0)
    pet_reg.modality = Modality.PET
    result.diagnostics["rigid_fallback"] = rigid.fallback
    if out_path is not None:
        save_volume(pet_reg, out_path)
        case.pet_reg = str(out_path)
        diag_path = Path(str(out_path)).with_suffix(".reg.json")
        try:
            with open(diag_path, "w") as fh:
                json.dump(result.diagnostics, fh, indent=1)
        except OSError as exc:
            raise IOFailure(f"cannot write diagnostics {diag_path}: {exc}") from exc
    return pet_reg
