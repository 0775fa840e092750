"""Segmentation evaluation: Dice, centerline recall and mask volumetrics."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import AirwayQuantError, GeometryMismatchError
from .volume_io import VoxelGrid, require_same_geometry


@dataclass
class Centerline:
    """Sampled axis of one branch; ``points`` is an (n, 3) array in mm."""

    points: np.ndarray
    branch_id: int
    region: Optional[str] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)


@dataclass
class EvalReport:
    dice: float
    cl_recall: float
    gt_volume: float
    pred_volume: float
    per_region: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def dice(pred: VoxelGrid, gt: VoxelGrid) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1."""
    if pred.dims != gt.dims:
        raise GeometryMismatchError(f"dice: dims {pred.dims} vs {gt.dims}")
    p = np.asarray(pred.data, dtype=bool)
    g = np.asarray(gt.data, dtype=bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def mask_volume(mask: VoxelGrid) -> float:
    return int(np.count_nonzero(mask.data)) * mask.voxel_volume


def _points_covered(points: np.ndarray, pred: VoxelGrid, tolerance: float) -> np.ndarray:
    fg = np.asarray(pred.data, dtype=bool)
    dims = np.array(pred.dims)
    spacing = np.array(pred.spacing)
    cont = pred.world_to_index(points)
    idx = np.rint(cont).astype(int)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    hit = np.zeros(len(points), dtype=bool)
    ii = idx[inside]
    hit[inside] = fg[ii[:, 0], ii[:, 1], ii[:, 2]]
    if tolerance <= 0:
        return hit
    # containing voxel, or any foreground voxel center within ``tolerance`` mm;
    # the union keeps recall monotone in the tolerance
    reach = np.ceil(tolerance / spacing).astype(int) + 1
    offsets = np.stack(
        np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    base = np.floor(cont).astype(int)
    for start in range(0, len(points), 512):
        b = base[start : start + 512]
        c = cont[start : start + 512]
        cand = b[:, None, :] + offsets[None, :, :]
        d2 = np.sum(((cand - c[:, None, :]) * spacing) ** 2, axis=-1)
        ok = np.all((cand >= 0) & (cand < dims), axis=-1) & (d2 <= tolerance * tolerance + 1e-9)
        cc = np.where(ok[..., None], cand, 0)
        vals = fg[cc[..., 0], cc[..., 1], cc[..., 2]] & ok
        hit[start : start + 512] |= vals.any(axis=1)
    return hit


def centerline_recall(gt_centerlines: Iterable[Centerline], pred: VoxelGrid, tolerance: float = 0.0) -> float:
    """Fraction of ground-truth centerline points covered by ``pred``.

    With ``tolerance == 0`` a point counts when its containing voxel is
    foreground; a positive tolerance also accepts any foreground voxel center
    within ``tolerance`` mm.
    """
    lines = list(gt_centerlines)
    if not lines or sum(len(c.points) for c in lines) == 0:
        raise AirwayQuantError("centerline recall needs at least one centerline point")
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    pts = np.concatenate([c.points for c in lines])
    return float(_points_covered(pts, pred, tolerance).mean())


def evaluate(pred: VoxelGrid, gt: VoxelGrid, centerlines: Iterable[Centerline], tolerance: float = 0.0) -> EvalReport:
    require_same_geometry(pred, gt)
    lines = list(centerlines)
    per_region: dict = {}
    by_region: dict = {}
    for c in lines:
        if c.region is not None:
            by_region.setdefault(c.region, []).append(c)
    for region, cls in sorted(by_region.items()):
        per_region[region] = {"cl_recall": centerline_recall(cls, pred, tolerance)}
    return EvalReport(
        dice=dice(pred, gt),
        cl_recall=centerline_recall(lines, pred, tolerance),
        gt_volume=mask_volume(gt),
        pred_volume=mask_volume(pred),
        per_region=per_region,
    )


# ---------------------------------------------------------------- CSV I/O ---

CENTERLINE_COLUMNS = ("branch_id", "region_code", "x_mm", "y_mm", "z_mm")


def write_centerlines_csv(centerlines: Iterable[Centerline], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CENTERLINE_COLUMNS)
        for c in centerlines:
            for x, y, z in c.points:
                w.writerow([c.branch_id, c.region or "", repr(float(x)), repr(float(y)), repr(float(z))])


def read_centerlines_csv(path) -> list[Centerline]:
    rows: dict[int, list] = {}
    regions: dict[int, Optional[str]] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CENTERLINE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise AirwayQuantError(f"{path}: centerline CSV missing columns {sorted(missing)}")
        for r in reader:
            bid = int(r["branch_id"])
            rows.setdefault(bid, []).append((float(r["x_mm"]), float(r["y_mm"]), float(r["z_mm"])))
            regions[bid] = r["region_code"] or None
    return [Centerline(np.array(pts), bid, regions[bid]) for bid, pts in rows.items()]


def point_spacing_ok(c: Centerline, step: float) -> bool:
    if len(c.points) < 2:
        return False
    gaps = np.linalg.norm(np.diff(c.points, axis=0), axis=1)
    return bool(np.all(gaps <= step + 1e-9 * max(1.0, step)))
