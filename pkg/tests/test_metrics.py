import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from airwayquant.errors import AirwayQuantError, GeometryMismatchError
from airwayquant.metrics import (Centerline, centerline_recall, dice, evaluate, mask_volume,
                                 point_spacing_ok, read_centerlines_csv, write_centerlines_csv)
from airwayquant.volume_io import make_mask

masks = hnp.arrays(np.bool_, (5, 5, 5))


def test_dice_examples():
    a = np.zeros((10, 10, 10), bool)
    a[:1] = True  # 100 voxels
    b = np.zeros_like(a)
    b[0, :8] = True
    b[1, :2] = True  # 100 voxels, 80 shared
    assert dice(make_mask(a), make_mask(a)) == 1.0
    assert dice(make_mask(a), make_mask(b)) == pytest.approx(0.8)
    c = np.zeros_like(a)
    c[5:6] = True
    assert dice(make_mask(a), make_mask(c)) == 0.0
    empty = make_mask(np.zeros((3, 3, 3)))
    assert dice(empty, empty) == 1.0
    with pytest.raises(GeometryMismatchError):
        dice(empty, make_mask(np.zeros((3, 3, 4))))


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    d = dice(make_mask(a), make_mask(b))
    assert d == dice(make_mask(b), make_mask(a))
    assert 0.0 <= d <= 1.0
    if a.any():
        assert dice(make_mask(a), make_mask(a)) == 1.0


def test_mask_volume_examples():
    m = np.zeros((10, 10, 10))
    assert mask_volume(make_mask(m)) == 0
    m[:] = 1
    assert mask_volume(make_mask(m)) == 1000.0
    assert mask_volume(make_mask(m, (0.7, 0.7, 1.0))) == pytest.approx(490.0)


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_mask_volume_additive(a, b):
    b = b & ~a
    sp = (0.5, 1.0, 2.0)
    assert mask_volume(make_mask(a | b, sp)) == pytest.approx(mask_volume(make_mask(a, sp)) + mask_volume(make_mask(b, sp)))


def _four_branches():
    lines = []
    for i, y in enumerate((2.0, 5.0, 8.0, 11.0)):
        pts = np.stack([np.linspace(2.0, 10.0, 17), np.full(17, y), np.full(17, 4.0)], axis=1)
        lines.append(Centerline(pts, i, "R1"))
    return lines


def test_recall_examples():
    lines = _four_branches()
    full = np.zeros((14, 14, 8), bool)
    for c in lines:
        idx = np.rint(c.points).astype(int)
        full[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    assert centerline_recall(lines, make_mask(full)) == 1.0
    assert centerline_recall(lines, make_mask(np.zeros_like(full))) == 0.0
    missing = full.copy()
    missing[:, 11, :] = False
    assert centerline_recall(lines, make_mask(missing)) == pytest.approx(0.75)
    with pytest.raises(AirwayQuantError):
        centerline_recall([], make_mask(full))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.bool_, (8, 8, 8), elements=st.booleans()), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_recall_monotone_in_tolerance(pred, t1, t2):
    rng = np.random.default_rng(0)
    lines = [Centerline(rng.uniform(0, 7, (30, 3)), 0)]
    lo, hi = sorted((t1, t2))
    grid = make_mask(pred, (1.0, 0.8, 1.3))
    assert centerline_recall(lines, grid, lo) <= centerline_recall(lines, grid, hi)


def test_small_tolerance_keeps_containing_voxel():
    # the point's containing voxel center is ~0.6 mm away, beyond a 0.3 mm tolerance
    m = np.zeros((4, 4, 4), dtype=bool)
    m[1, 1, 1] = True
    lines = [Centerline(np.array([[1.35, 1.35, 1.35]]), 0)]
    grid = make_mask(m)
    assert centerline_recall(lines, grid, 0.0) == 1.0
    assert centerline_recall(lines, grid, 0.3) == 1.0


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.bool_, (8, 8, 8)), hnp.arrays(np.bool_, (8, 8, 8)))
def test_recall_monotone_in_pred(a, extra):
    rng = np.random.default_rng(1)
    lines = [Centerline(rng.uniform(0, 7, (40, 3)), 0)]
    assert centerline_recall(lines, make_mask(a)) <= centerline_recall(lines, make_mask(a | extra))


def test_tolerance_reaches_neighbours():
    m = np.zeros((5, 5, 5), bool)
    m[3, 2, 2] = True
    line = [Centerline(np.array([[2.0, 2.0, 2.0]]), 0)]
    assert centerline_recall(line, make_mask(m), 0.0) == 0.0
    assert centerline_recall(line, make_mask(m), 1.0) == 1.0
    assert centerline_recall(line, make_mask(m, (2.0, 1.0, 1.0)), 1.0) == 0.0


def test_centerline_csv_round_trip(tmp_path):
    lines = _four_branches()
    path = tmp_path / "c.csv"
    write_centerlines_csv(lines, path)
    back = read_centerlines_csv(path)
    assert [c.branch_id for c in back] == [0, 1, 2, 3]
    assert all(np.array_equal(a.points, b.points) and b.region == "R1" for a, b in zip(lines, back))
    assert path.read_text().splitlines()[0] == "branch_id,region_code,x_mm,y_mm,z_mm"
    assert all(point_spacing_ok(c, 0.5) for c in back)


def test_evaluate_report():
    g = np.zeros((6, 6, 6), bool)
    g[1:5, 2, 2] = True
    line = [Centerline(np.array([[1.0, 2, 2], [2.0, 2, 2], [3.0, 2, 2], [4.0, 2, 2]]), 0, "R3")]
    rep = evaluate(make_mask(g), make_mask(g), line)
    assert rep.dice == 1.0 and rep.cl_recall == 1.0 and rep.gt_volume == 4.0
    assert rep.per_region == {"R3": {"cl_recall": 1.0}}
    empty = evaluate(make_mask(np.zeros_like(g)), make_mask(g), line)
    assert empty.dice == 0.0 and empty.cl_recall == 0.0
