"""Synthetic bronchial-tree phantoms with exact ground truth.

A phantom is a binary tree of straight cylindrical branches. Generations 0
and 1 (trachea and main bronchi) form the hilum and carry no region code;
deeper branches carry one of the 18 segment codes, assigned by recursively
halving each side's code list at every bifurcation (right lung: R1..R10,
left lung: L1-2..L10). A branch whose list still holds several codes takes
the first one, so lobar-level bronchi are counted in a segment and every
intrapulmonary airway voxel belongs to exactly one segment.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, cKDTree

from .errors import GeometryMismatchError, TreeDepthError
from .metrics import Centerline
from .quant import HILUM, LABEL_OF, LEFT_SEGMENTS, RIGHT_SEGMENTS, lobe_label_map
from .volume_io import VoxelGrid, make_mask

log = logging.getLogger(__name__)

HU_LUMEN = -1000.0
HU_WALL = -100.0
HU_LUNG = -850.0
HU_BODY = 0.0

HILUM_GENERATIONS = 2  # generations 0 and 1


@dataclass
class BranchSpec:
    start: np.ndarray
    direction: np.ndarray
    length: float
    radius: float
    generation: int
    region: Optional[str] = None
    parent: Optional[int] = None
    codes: tuple = ()  # segment codes still reachable through this branch

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        self.direction = d / np.linalg.norm(d)
        if not (self.length > 0 and self.radius > 0):
            raise ValueError(f"branch needs positive length and radius, got L={self.length}, r={self.radius}")

    @property
    def end(self) -> np.ndarray:
        return self.start + self.length * self.direction

    @property
    def is_hilum(self) -> bool:
        return self.generation < HILUM_GENERATIONS


@dataclass
class TreeSpec:
    branches: list[BranchSpec]
    angle: float
    ratio: float

    def children(self, i: int) -> list[int]:
        return [j for j, b in enumerate(self.branches) if b.parent == i]

    def terminals(self) -> list[int]:
        parents = {b.parent for b in self.branches}
        return [i for i in range(len(self.branches)) if i not in parents]

    def translated(self, offset) -> "TreeSpec":
        offset = np.asarray(offset, dtype=float)
        out = []
        for b in self.branches:
            out.append(BranchSpec(b.start + offset, b.direction, b.length, b.radius,
                                  b.generation, b.region, b.parent, b.codes))
        return TreeSpec(out, self.angle, self.ratio)

    def extent(self, pad: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        lo = np.min([np.minimum(b.start, b.end) - b.radius for b in self.branches], axis=0)
        hi = np.max([np.maximum(b.start, b.end) + b.radius for b in self.branches], axis=0)
        return lo - pad, hi + pad


def _perpendicular(d: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = helper - d * np.dot(helper, d)
    return u / np.linalg.norm(u)


def generate_tree(depth: int, root_radius: float, root_length: float, ratio: float = 0.78,
                  angle: float = 35.0, jitter: float = 0.0, seed: int = 0,
                  min_radius: float | None = None, root_start=(0.0, 0.0, 0.0),
                  root_direction=(0.0, 0.0, -1.0), first_plane_deg: float = 0.0) -> TreeSpec:
    """Deterministic binary tree; every child has ``ratio`` times its parent's
    radius and (before jitter) length, and leaves at ``angle`` degrees from
    the parent axis. Bifurcation planes alternate between generations.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if not 0 < angle < 90:
        raise ValueError(f"angle must lie in (0, 90) degrees, got {angle}")
    deepest = root_radius * ratio ** (depth - 1)
    if min_radius is not None and deepest < min_radius:
        raise TreeDepthError(
            f"depth {depth} gives generation-{depth - 1} radius {deepest:.3f} mm < minimum {min_radius:.3f} mm"
        )
    rng = np.random.default_rng(seed)
    root_dir = np.asarray(root_direction, dtype=float)
    root_dir /= np.linalg.norm(root_dir)
    # first split plane contains the x axis (rotated by first_plane_deg about z),
    # so the main bronchi go left/right
    phi = math.radians(first_plane_deg)
    x_axis = np.array([math.cos(phi), math.sin(phi), 0.0])
    u0 = x_axis - root_dir * np.dot(x_axis, root_dir)
    u0 = u0 / np.linalg.norm(u0) if np.linalg.norm(u0) > 1e-9 else _perpendicular(root_dir)

    branches = [BranchSpec(root_start, root_dir, root_length, root_radius, 0, None, None, ())]
    planes = [u0]
    frontier = [0]
    for gen in range(1, depth):
        nxt = []
        for pi in frontier:
            parent = branches[pi]
            d = parent.direction
            u = planes[pi]
            if gen == 1:
                code_lists = [RIGHT_SEGMENTS, LEFT_SEGMENTS]
            else:
                codes = parent.codes
                half = (len(codes) + 1) // 2
                code_lists = [codes[:half] or codes, codes[half:] or codes]
            for side, sign in enumerate((-1.0, 1.0)):
                theta = math.radians(angle * (1.0 + jitter * rng.uniform(-1.0, 1.0)))
                length = parent.length * ratio * (1.0 + jitter * rng.uniform(-1.0, 1.0))
                cdir = math.cos(theta) * d + sign * math.sin(theta) * u
                cdir /= np.linalg.norm(cdir)
                codes = tuple(code_lists[side])
                region = codes[0] if gen >= HILUM_GENERATIONS else None
                child = BranchSpec(parent.end, cdir, length, parent.radius * ratio, gen,
                                   region, pi, codes)
                branches.append(child)
                nu = np.cross(cdir, u)
                planes.append(nu / np.linalg.norm(nu))
                nxt.append(len(branches) - 1)
        frontier = nxt
    return TreeSpec(branches, angle, ratio)


def analytic_branch_volume(branch: BranchSpec) -> float:
    return math.pi * branch.radius ** 2 * branch.length


def emit_centerlines(tree: TreeSpec, step: float) -> list[Centerline]:
    """Axis samples at most ``step`` mm apart, both ends included."""
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    out = []
    for i, b in enumerate(tree.branches):
        n = int(math.ceil(b.length / step - 1e-9)) + 1
        t = np.linspace(0.0, b.length, max(n, 2))
        pts = b.start[None, :] + t[:, None] * b.direction[None, :]
        out.append(Centerline(pts, i, b.region))
    return out


# ------------------------------------------------------------ rasterizing ---

@dataclass(frozen=True)
class Geometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def of(cls, grid: VoxelGrid) -> "Geometry":
        return cls(grid.dims, grid.spacing, grid.origin)

    def empty(self, dtype=np.uint8) -> VoxelGrid:
        return VoxelGrid(np.zeros(self.dims, dtype=dtype), self.spacing, self.origin)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)


def _block(geom: Geometry, lo_mm, hi_mm):
    sp, org = np.asarray(geom.spacing), np.asarray(geom.origin)
    lo = np.maximum(np.floor((np.asarray(lo_mm) - org) / sp).astype(int), 0)
    hi = np.minimum(np.ceil((np.asarray(hi_mm) - org) / sp).astype(int) + 1, np.asarray(geom.dims))
    if np.any(hi <= lo):
        return None
    sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    axes = [org[k] + sp[k] * np.arange(lo[k], hi[k]) for k in range(3)]
    return sl, axes


def _segment_geometry(b: BranchSpec, axes):
    """Axial coordinate t and squared perpendicular distance over a block."""
    dx = axes[0][:, None, None] - b.start[0]
    dy = axes[1][None, :, None] - b.start[1]
    dz = axes[2][None, None, :] - b.start[2]
    d = b.direction
    t = dx * d[0] + dy * d[1] + dz * d[2]
    r2 = dx * dx + dy * dy + dz * dz - t * t
    return t, np.maximum(r2, 0.0)


def _rasterize(tree: TreeSpec, geom: Geometry):
    """Airway mask plus, per foreground voxel, the index of the branch whose
    axis segment is nearest (-1 elsewhere)."""
    fg = np.zeros(geom.dims, dtype=bool)
    owner = np.full(geom.dims, -1, dtype=np.int32)
    best = np.full(geom.dims, np.inf)
    clipped = False
    lo_g, hi_g = np.asarray(geom.origin), geom.upper
    for i, b in enumerate(tree.branches):
        ends = np.stack([b.start, b.end])
        lo, hi = ends.min(axis=0) - b.radius, ends.max(axis=0) + b.radius
        if np.any(lo < lo_g) or np.any(hi > hi_g):
            clipped = True
        blk = _block(geom, lo, hi)
        if blk is None:
            continue
        sl, axes = blk
        t, r2 = _segment_geometry(b, axes)
        tc = np.clip(t, 0.0, b.length)
        d2 = r2 + (t - tc) ** 2
        inside = d2 <= b.radius * b.radius
        sub_best = best[sl]
        closer = inside & (d2 < sub_best)
        sub_best[closer] = d2[closer]
        owner[sl][closer] = i
        fg[sl] |= inside
    if clipped:
        log.warning("tree extends beyond the volume; rasterization clipped at the border")
    return fg, owner


def rasterize_tree(tree: TreeSpec, geometry: Geometry) -> VoxelGrid:
    """Voxel is foreground iff its center lies within ``radius`` of some
    branch's axis segment (end points included, so branches are capsules)."""
    fg, _ = _rasterize(tree, geometry)
    return make_mask(fg, geometry.spacing, geometry.origin)


def _capsule_surface_distance(tree: TreeSpec, geom: Geometry, which, reach: float) -> np.ndarray:
    """Min over selected branches of (distance to axis segment - radius), only
    evaluated within ``reach`` mm of each branch; inf elsewhere."""
    out = np.full(geom.dims, np.inf)
    for i in which:
        b = tree.branches[i]
        ends = np.stack([b.start, b.end])
        blk = _block(geom, ends.min(axis=0) - b.radius - reach, ends.max(axis=0) + b.radius + reach)
        if blk is None:
            continue
        sl, axes = blk
        t, r2 = _segment_geometry(b, axes)
        tc = np.clip(t, 0.0, b.length)
        dist = np.sqrt(r2 + (t - tc) ** 2) - b.radius
        np.minimum(out[sl], dist, out=out[sl])
    return out


# --------------------------------------------------------------- phantoms ---

@dataclass
class PhantomOutput:
    tree: TreeSpec
    intensity: VoxelGrid
    airway_gt: VoxelGrid
    lung_mask: VoxelGrid
    region_labels: VoxelGrid
    lobe_labels: VoxelGrid
    hilum_zone: VoxelGrid
    centerlines: list[Centerline]
    branch_table: list[dict] = field(default_factory=list)


@dataclass
class PhantomConfig:
    """Defaults give a depth-5 tree whose thinnest branch is 3 voxels in
    radius and fits a 96^3 volume at 1 mm spacing."""

    dims: tuple = (96, 96, 96)
    spacing: tuple = (1.0, 1.0, 1.0)
    depth: int = 5
    root_radius: float = 3.7
    root_length: float = 18.5
    ratio: float = 0.95
    angle: float = 30.0
    first_plane_deg: float = 0.0
    jitter: float = 0.0
    seed: int = 0
    lung_pad_mm: float = 3.0
    lung_gap_mm: float = 2.0
    hilum_margin_mm: float = 1.0
    top_margin_mm: float = 1.0
    noise_sd: float = 0.0
    centerline_step_mm: float = 0.5


def _side_of(tree: TreeSpec) -> list[int]:
    # 0: hilum, 1: right, 2: left (by which main bronchus a branch descends from)
    side = [0] * len(tree.branches)
    for i, b in enumerate(tree.branches):
        if b.generation == 1:
            side[i] = 1 if tree.children(b.parent).index(i) == 0 else 2
        elif b.generation > 1:
            side[i] = side[b.parent]
    return side


def place_tree(tree: TreeSpec, geom: Geometry, pad: float, top_margin: float) -> TreeSpec:
    """Center the tree (plus ``pad``) in x/y and hang the trachea so its top
    cap sits ``top_margin`` mm below the top (highest z) face."""
    lo, hi = tree.extent(pad)
    g_lo, g_hi = np.asarray(geom.origin), geom.upper
    offset = 0.5 * (g_lo + g_hi) - 0.5 * (lo + hi)
    root = tree.branches[0]
    offset[2] = (g_hi[2] - top_margin - root.radius) - root.start[2]
    moved = tree.translated(offset)
    lo, hi = moved.extent(pad)
    hi[2] = moved.extent(0.0)[1][2]
    if np.any(lo < g_lo) or np.any(hi > g_hi):
        log.warning("phantom tree plus lung padding does not fit the %s volume", geom.dims)
    return moved


def make_phantom(cfg: PhantomConfig | None = None, **overrides) -> PhantomOutput:
    cfg = cfg or PhantomConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    geom = Geometry(tuple(int(n) for n in cfg.dims), tuple(float(s) for s in cfg.spacing))
    tree = generate_tree(cfg.depth, cfg.root_radius, cfg.root_length, cfg.ratio, cfg.angle,
                         cfg.jitter, cfg.seed, min_radius=max(geom.spacing) / 2,
                         first_plane_deg=cfg.first_plane_deg)
    tree = place_tree(tree, geom, cfg.lung_pad_mm, cfg.top_margin_mm)
    return phantom_from_tree(tree, geom, cfg)


def _convex_hull_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels whose centers lie in the convex hull of ``mask``'s voxel centers."""
    pts = np.argwhere(mask)
    if len(pts) < 4:
        return mask.copy()
    hull = ConvexHull(pts)
    # hull facets as half-spaces  n.x + c <= 0
    eq = hull.equations
    lo, hi = pts.min(axis=0), pts.max(axis=0) + 1
    yz = np.stack(np.meshgrid(np.arange(lo[1], hi[1]), np.arange(lo[2], hi[2]), indexing="ij"), axis=-1)
    base = yz @ eq[:, 1:3].T + eq[:, 3]
    out = np.zeros_like(mask, dtype=bool)
    for x in range(lo[0], hi[0]):  # one slab at a time bounds the memory
        out[x, lo[1]:hi[1], lo[2]:hi[2]] = np.all(base + x * eq[:, 0] <= 1e-9, axis=-1)
    return out | mask


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


def phantom_from_tree(tree: TreeSpec, geom: Geometry, cfg: PhantomConfig) -> PhantomOutput:
    airway, owner = _rasterize(tree, geom)
    side = _side_of(tree)
    n = len(tree.branches)
    hilum_ids = [i for i in range(n) if tree.branches[i].generation < HILUM_GENERATIONS]
    right_ids = [i for i in range(n) if side[i] == 1 and tree.branches[i].generation >= HILUM_GENERATIONS]
    left_ids = [i for i in range(n) if side[i] == 2 and tree.branches[i].generation >= HILUM_GENERATIONS]

    pad, gap = cfg.lung_pad_mm, cfg.lung_gap_mm
    far = float(np.sum(np.asarray(geom.dims) * np.asarray(geom.spacing)))
    d_right = _capsule_surface_distance(tree, geom, right_ids, far)
    d_left = _capsule_surface_distance(tree, geom, left_ids, far)
    d_hilum = _capsule_surface_distance(tree, geom, hilum_ids, cfg.hilum_margin_mm)
    # hilum: closer to the trachea/main-bronchus surface than to any deeper branch
    hilum_zone = (d_hilum <= cfg.hilum_margin_mm) & (d_hilum < np.minimum(d_right, d_left))
    # each field is the convex hull of its padded branches; a band where the
    # two sides are within ``gap`` of equidistant keeps the fields apart
    with np.errstate(invalid="ignore"):  # inf - inf when a side has no branches
        right = _convex_hull_mask(d_right <= pad) & (d_left - d_right >= gap)
        left = _convex_hull_mask(d_left <= pad) & (d_right - d_left >= gap)
    body = np.zeros(geom.dims, dtype=bool)
    body[1:-1, 1:-1, 1:-1] = True  # one voxel of body on every face
    # stray voxels at the hilum seam would fragment the fields; keep one body per side
    lung = (_largest_component(right & body & ~hilum_zone)
            | _largest_component(left & body & ~hilum_zone))

    # labels: airway voxels take their branch's code, parenchyma the nearest terminal's
    branch_label = np.array([LABEL_OF[b.region] if b.region else HILUM for b in tree.branches], dtype=np.uint8)
    labels = np.zeros(geom.dims, dtype=np.uint8)
    terms = [i for i in tree.terminals() if tree.branches[i].region]
    parenchyma = lung & ~airway
    if terms and parenchyma.any():
        ends = np.array([tree.branches[i].end for i in terms])
        kd = cKDTree(ends)
        idx = np.argwhere(parenchyma)
        world = np.asarray(geom.origin) + idx * np.asarray(geom.spacing)
        _, nearest = kd.query(world)
        labels[parenchyma] = branch_label[np.array(terms)[nearest]]
    labels[airway] = branch_label[owner[airway]]

    intensity = synthesize_intensity(make_mask(airway, geom.spacing, geom.origin),
                                     make_mask(lung, geom.spacing, geom.origin),
                                     cfg.noise_sd, cfg.seed)
    table = []
    for i, b in enumerate(tree.branches):
        table.append({
            "branch_id": i, "region_code": b.region or "", "radius_mm": b.radius,
            "length_mm": b.length, "analytic_volume_mm3": analytic_branch_volume(b),
            "generation": b.generation, "parent_id": "" if b.parent is None else b.parent,
        })
    sp, org = geom.spacing, geom.origin
    return PhantomOutput(
        tree=tree,
        intensity=intensity,
        airway_gt=make_mask(airway, sp, org),
        lung_mask=make_mask(lung, sp, org),
        region_labels=VoxelGrid(labels, sp, org),
        lobe_labels=VoxelGrid(lobe_label_map(labels), sp, org),
        hilum_zone=make_mask(hilum_zone, sp, org),
        centerlines=emit_centerlines(tree, cfg.centerline_step_mm),
        branch_table=table,
    )


_FULL = ndimage.generate_binary_structure(3, 3)


def wall_shell(airway: np.ndarray) -> np.ndarray:
    """One-voxel shell around the lumen, closed under 26-connectivity."""
    a = np.asarray(airway, dtype=bool)
    return ndimage.binary_dilation(a, _FULL) & ~a


def synthesize_intensity(airway: VoxelGrid, lung: VoxelGrid, noise_sd: float = 0.0, seed: int = 0) -> VoxelGrid:
    """Piecewise-constant HU volume: lumen, airway wall, lung parenchyma and
    body, plus optional Gaussian noise."""
    if not airway.same_geometry(lung):
        raise GeometryMismatchError(f"airway {airway.dims} and lung {lung.dims} masks differ in geometry")
    a = np.asarray(airway.data, dtype=bool)
    out = np.full(airway.dims, HU_BODY, dtype=np.float64)
    out[np.asarray(lung.data, dtype=bool)] = HU_LUNG
    out[wall_shell(a)] = HU_WALL
    out[a] = HU_LUMEN
    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        out += rng.normal(0.0, noise_sd, size=out.shape)
    return airway.with_data(out.astype(np.float32))


def punch_wall_hole(intensity: VoxelGrid, airway: VoxelGrid, center_mm, radius_mm: float, hu: float) -> VoxelGrid:
    """Replace wall voxels within ``radius_mm`` of a point by ``hu``, opening a
    leak path from the lumen into whatever lies outside the wall."""
    data = np.array(intensity.data, dtype=np.float32)
    shell = wall_shell(airway.data)
    idx = np.argwhere(shell)
    world = np.asarray(intensity.origin) + idx * np.asarray(intensity.spacing)
    near = np.linalg.norm(world - np.asarray(center_mm), axis=1) <= radius_mm
    sel = idx[near]
    data[sel[:, 0], sel[:, 1], sel[:, 2]] = hu
    return intensity.with_data(data)


# ------------------------------------------------------------------ files ---

BRANCH_COLUMNS = ("branch_id", "region_code", "radius_mm", "length_mm", "analytic_volume_mm3",
                  "generation", "parent_id")


def write_branch_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BRANCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def read_branch_table(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({
                "branch_id": int(r["branch_id"]),
                "region_code": r["region_code"],
                "radius_mm": float(r["radius_mm"]),
                "length_mm": float(r["length_mm"]),
                "analytic_volume_mm3": float(r["analytic_volume_mm3"]),
                "generation": int(r["generation"]) if r.get("generation") not in (None, "") else None,
            })
    return out


def analytic_region_volumes(rows) -> dict[str, float]:
    """Summed analytic branch volume per region code (hilum branches skipped)."""
    out: dict[str, float] = {}
    for r in rows:
        code = r["region_code"]
        if code:
            out[code] = out.get(code, 0.0) + float(r["analytic_volume_mm3"])
    return out
