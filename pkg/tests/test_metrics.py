import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from fuseseg import metrics
from fuseseg.errors import EmptyMask, NoRecords, ShapeMismatch
from fuseseg.metrics import (
    AggregateReport,
    MetricsRecord,
    aggregate,
    asd,
    dsc,
    evaluate_case,
    fmt_mean_std,
    hausdorff,
    report_lines,
    surface_voxels,
)
from fuseseg.volio import Mask


def mask_of(arr, spacing=(1.0, 1.0, 1.0)):
    return Mask(np.asarray(arr, dtype=bool), spacing)


def random_mask(seed, shape=(16, 16, 16), p=0.5, spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    return Mask(rng.random(shape) < p, spacing)


# ------------------------------------------------------------------- oracle
# Everything below re-derives the metrics from first principles, independent
# of the KD-tree implementation path.

def oracle_surface(mask):
    data = mask.data
    out = []
    nx, ny, nz = data.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not data[x, y, z]:
                    continue
                border = False
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    u, v, w = x + dx, y + dy, z + dz
                    if not (0 <= u < nx and 0 <= v < ny and 0 <= w < nz):
                        border = True
                        break
                    if not data[u, v, w]:
                        border = True
                        break
                if border:
                    out.append((x, y, z))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def oracle_distances(a, b, spacing):
    """All-pairs HD and directed ASD (a->b surface distances)."""
    sp = np.asarray(spacing, dtype=np.float64)
    pa = oracle_surface(a) * sp
    pb = oracle_surface(b) * sp
    diff = pa[:, None, :] - pb[None, :, :]
    dmat = np.sqrt((diff ** 2).sum(axis=2))
    d_ab = dmat.min(axis=1)
    d_ba = dmat.min(axis=0)
    hd = max(d_ab.max(), d_ba.max())
    return hd, d_ab.mean()


def oracle_dsc(a, b):
    inter = int(np.logical_and(a.data, b.data).sum())
    na, nb = int(a.data.sum()), int(b.data.sum())
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


# ---------------------------------------------------------------------- dsc

def test_dsc_identical():
    m = random_mask(0)
    assert dsc(m, m) == 1.0


def test_dsc_disjoint():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, 0, 0] = True
    b[3, 3, 3] = True
    assert dsc(mask_of(a), mask_of(b)) == 0.0


def test_dsc_shifted_cube():
    a = np.zeros((10, 10, 10), bool)
    b = np.zeros((10, 10, 10), bool)
    a[2:6, 2:6, 2:6] = True
    b[4:8, 2:6, 2:6] = True
    assert dsc(mask_of(a), mask_of(b)) == pytest.approx(2 * 32 / (64 + 64))


def test_dsc_both_empty():
    z = mask_of(np.zeros((4, 4, 4), bool))
    assert dsc(z, z) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dsc(mask_of(np.zeros((4, 4, 4))), mask_of(np.zeros((5, 4, 4))))


@settings(max_examples=25, deadline=None)
@given(sa=st.integers(0, 100), sb=st.integers(0, 100))
def test_dsc_symmetry(sa, sb):
    a, b = random_mask(sa), random_mask(sb)
    assert dsc(a, b) == dsc(b, a)


# ------------------------------------------------------------------ surface

def test_surface_solid_cube_shell():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    surf = surface_voxels(mask_of(m))
    assert len(surf) == 26  # all of the 3x3x3 cube but its center
    assert (2, 2, 2) not in {tuple(v) for v in surf}


def test_surface_single_voxel():
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    surf = surface_voxels(mask_of(m))
    assert [tuple(v) for v in surf] == [(1, 1, 1)]


def test_surface_empty():
    assert surface_voxels(mask_of(np.zeros((3, 3, 3), bool))).shape == (0, 3)


def test_surface_grid_boundary_counts_as_background():
    m = np.ones((3, 3, 3), bool)
    surf = surface_voxels(mask_of(m))
    assert len(surf) == 26  # only the (1,1,1) center is interior


# -------------------------------------------------------------- hd and asd

def test_hausdorff_identical_zero():
    m = random_mask(1, p=0.3)
    assert hausdorff(m, m, m.spacing) == 0.0


def test_hausdorff_single_voxels_x():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, 0, 0] = True
    b[3, 0, 0] = True
    assert hausdorff(mask_of(a), mask_of(b), (1, 1, 2.5)) == pytest.approx(3.0)


def test_hausdorff_single_voxels_z():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, 0, 0] = True
    b[0, 0, 2] = True
    assert hausdorff(mask_of(a), mask_of(b), (1, 1, 2.5)) == pytest.approx(5.0)


def test_hausdorff_empty_raises():
    a = mask_of(np.zeros((3, 3, 3), bool))
    b = random_mask(0, (3, 3, 3))
    with pytest.raises(EmptyMask):
        hausdorff(a, b, (1, 1, 1))


def test_asd_identical_zero():
    m = random_mask(2, p=0.4)
    assert asd(m, m, m.spacing) == 0.0


def test_asd_dilated_by_one():
    gt = np.zeros((10, 10, 10), bool)
    gt[3:7, 3:7, 3:7] = True
    pred = ndimage.binary_dilation(gt)  # 6-connected structuring element
    assert asd(mask_of(pred), mask_of(gt), (1, 1, 1)) == pytest.approx(1.0)


def test_asd_single_voxel_distance():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[1, 2, 3] = True
    b[5, 2, 3] = True
    assert asd(mask_of(a), mask_of(b), (2, 1, 1)) == pytest.approx(8.0)


@settings(max_examples=15, deadline=None)
@given(sa=st.integers(0, 50), sb=st.integers(51, 100))
def test_hausdorff_symmetry(sa, sb):
    a, b = random_mask(sa, (8, 8, 8)), random_mask(sb, (8, 8, 8))
    assert hausdorff(a, b, (1, 1.5, 2.0)) == hausdorff(b, a, (1, 1.5, 2.0))


def test_scale_law():
    a, b = random_mask(7, (10, 10, 10), 0.3), random_mask(8, (10, 10, 10), 0.3)
    h1 = hausdorff(a, b, (1, 1, 1))
    h3 = hausdorff(a, b, (3, 3, 3))
    s1 = asd(a, b, (1, 1, 1))
    s3 = asd(a, b, (3, 3, 3))
    assert h3 == pytest.approx(3 * h1)
    assert s3 == pytest.approx(3 * s1)
    assert dsc(a, b) == dsc(a, b)


def test_oracle_equivalence_small():
    for seed in range(5):
        a = random_mask(seed, (12, 12, 12), 0.4, (1.0, 1.0, 2.5))
        b = random_mask(seed + 100, (12, 12, 12), 0.4, (1.0, 1.0, 2.5))
        hd_o, asd_o = oracle_distances(a, b, a.spacing)
        assert dsc(a, b) == oracle_dsc(a, b)
        assert hausdorff(a, b, a.spacing) == pytest.approx(hd_o, abs=1e-9)
        assert asd(a, b, a.spacing) == pytest.approx(asd_o, abs=1e-9)


# ---------------------------------------------------------------- case eval

def test_evaluate_perfect():
    m = random_mask(3, p=0.3)
    rec = evaluate_case(m, m, "c")
    assert (rec.dsc, rec.hd_mm, rec.asd_mm) == (1.0, 0.0, 0.0)
    assert not rec.empty_prediction


def test_evaluate_empty_prediction():
    gt = random_mask(4, p=0.3)
    pred = mask_of(np.zeros(gt.shape, bool))
    rec = evaluate_case(pred, gt, "c")
    assert rec.dsc == 0.0
    assert rec.hd_mm is None and rec.asd_mm is None
    assert rec.empty_prediction and not rec.empty_ground_truth


def test_evaluate_matches_oracle():
    pred = random_mask(11, (16, 16, 16), 0.45, (1, 1, 2.5))
    gt = random_mask(12, (16, 16, 16), 0.45, (1, 1, 2.5))
    rec = evaluate_case(pred, gt, "c")
    hd_o, asd_o = oracle_distances(pred, gt, gt.spacing)
    assert rec.dsc == oracle_dsc(pred, gt)
    assert rec.hd_mm == pytest.approx(hd_o, abs=1e-9)
    assert rec.asd_mm == pytest.approx(asd_o, abs=1e-9)


# -------------------------------------------------------------- aggregation

def rec(case, d, h=1.0, a=1.0):
    return MetricsRecord(case, d, h, a)


def test_aggregate_single_record_zero_std():
    rep = aggregate([rec("a", 0.8)])
    mean, std, n = rep.mean_std("dsc")
    assert (mean, std, n) == (0.8, 0.0, 1)


def test_aggregate_mean():
    rep = aggregate([rec("a", 0.6), rec("b", 0.8)])
    mean, _, _ = rep.mean_std("dsc")
    assert mean == pytest.approx(0.700)


def test_aggregate_skips_undefined():
    rep = aggregate([rec("a", 0.5, None, None), rec("b", 0.7, 2.0, 1.0)])
    assert rep.mean_std("hd_mm") == (2.0, 0.0, 1)
    assert rep.undefined_count("hd_mm") == 1


def test_aggregate_no_records():
    with pytest.raises(NoRecords):
        aggregate([])


def test_fold_breakdown():
    rep = aggregate([rec("a", 0.6), rec("b", 0.8)], fold_map={"a": 0, "b": 1})
    assert rep.folds() == [0, 1]
    assert rep.fold_report(0).mean_std("dsc")[0] == 0.6


def test_formatting_precision():
    assert fmt_mean_std(0.7641, 0.1339, 3).startswith("0.764±")
    assert fmt_mean_std(47.13, 55.98, 1) == "47.1±56.0"


def test_report_lines_layout():
    rep = aggregate([rec("a", 0.6, 3.0, 1.5)], stream="CT")
    lines = report_lines([rep])
    assert any("population" in l for l in lines)
    assert any(l.startswith("CT") and "0.600" in l for l in lines)
