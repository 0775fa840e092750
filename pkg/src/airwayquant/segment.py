"""Classical lung and airway segmentation, plus a sliding-window harness for
voxel-probability predictors.

Any callable ``predictor(patch) -> VoxelGrid`` fits the harness. The patch is
the intensity window rescaled to [0, 1] and carries its world origin, so a
predictor can locate itself in the full volume. It must return probabilities
in [0, 1] with the patch's dims.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptyLungError, GeometryMismatchError, SeedError, UnboundedLeakError
from .volume_io import VoxelGrid, clip_normalize, make_mask

log = logging.getLogger(__name__)

Predictor = Callable[[VoxelGrid], VoxelGrid]

LUNG_THRESHOLD_HU = -500.0
GROW_START_HU = -950.0
GROW_MAX_HU = -300.0
GROW_STEP_HU = 10.0
EXPLOSION_RATIO = 1.5
SEED_HU = -900.0
SEED_TOP_FRACTION = 0.10
SEED_AREA_MM2 = (10.0, 1000.0)
DEFAULT_WINDOW = (96, 96, 96)
DEFAULT_OVERLAP = 0.5

_STRUCT = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, list[int]]:
    """Label connected foreground components.

    Labels run 1..n by decreasing size. Equal sizes are ordered by the
    smallest x-fastest linear index among each component's voxels. Returns the
    label array (int32, 0 = background) and the sizes in label order.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    data = mask.data if isinstance(mask, VoxelGrid) else mask
    fg = np.asarray(data).astype(bool)
    raw, n = ndimage.label(fg, structure=_STRUCT[connectivity])
    if n == 0:
        return np.zeros(fg.shape, dtype=np.int32), []
    flat = raw.ravel(order="F")
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    # first occurrence along the x-fastest scan is each component's minimum index
    order_f = np.flatnonzero(flat)
    labs, first = np.unique(flat[order_f], return_index=True)
    min_index = np.empty(n, dtype=np.int64)
    min_index[labs - 1] = order_f[first]
    rank = np.lexsort((min_index, -sizes))
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[rank + 1] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], [int(s) for s in sizes[rank]]


def _faces_touched(component: np.ndarray) -> int:
    count = 0
    for axis in range(component.ndim):
        lo = np.take(component, 0, axis=axis)
        hi = np.take(component, component.shape[axis] - 1, axis=axis)
        count += int(lo.any()) + int(hi.any())
    return count


def _fill_holes_axial(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for z in range(mask.shape[2]):
        if out[:, :, z].any():
            out[:, :, z] = ndimage.binary_fill_holes(out[:, :, z])
    return out


def segment_lung_coarse(intensity: VoxelGrid, threshold: float = LUNG_THRESHOLD_HU,
                        fill_holes: bool = True) -> VoxelGrid:
    """Both lung fields from a CT volume in HU.

    Air-like voxels (below ``threshold``) are grouped by 6-connectivity.
    Components touching two or more volume faces count as outside air and are
    dropped. The two largest survivors are kept, and with ``fill_holes`` their
    in-plane holes are filled slice by slice along z.
    """
    air = np.asarray(intensity.data) < threshold
    labels, sizes = connected_components(air, 6)
    kept: list[int] = []
    for lab in range(1, len(sizes) + 1):
        comp = labels == lab
        if _faces_touched(comp) >= 2:
            continue
        kept.append(lab)
        if len(kept) == 2:
            break
    if not kept:
        raise EmptyLungError(f"no air-like component below {threshold} HU inside the body")
    lung = np.isin(labels, kept)
    if fill_holes:
        lung = _fill_holes_axial(lung)
    return make_mask(lung, intensity.spacing, intensity.origin)


# ------------------------------------------------------------ region grow ---

@dataclass
class GrowthTrace:
    steps: list[tuple[float, int]] = field(default_factory=list)
    chosen: Optional[float] = None
    leakage: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("threshold_hu", "voxels"))
            for t, n in self.steps:
                w.writerow((repr(float(t)), n))


def _grow(intensity: np.ndarray, seed: tuple[int, int, int], t: float) -> np.ndarray:
    labels, _ = ndimage.label(intensity < t, structure=_STRUCT[26])
    return labels == labels[seed]


def region_grow_airway(intensity: VoxelGrid, seed, t_start: float = GROW_START_HU,
                       t_max: float = GROW_MAX_HU, t_step: float = GROW_STEP_HU,
                       explosion_ratio: float = EXPLOSION_RATIO) -> tuple[VoxelGrid, GrowthTrace]:
    """Airway lumen by 26-connected flood fill from ``seed`` at loosening thresholds.

    Voxels below ``t`` are grown for ``t = t_start, t_start + t_step, ...`` up
    to ``t_max``. The sweep stops when the grown volume jumps by more than
    ``explosion_ratio`` between consecutive thresholds, or when the growth
    reaches two or more faces of the volume; either sets ``trace.leakage``.
    The mask of the last threshold before the stop is returned.
    """
    if not t_start < t_max:
        raise ConfigError(f"t_start ({t_start}) must be below t_max ({t_max})")
    if t_step <= 0:
        raise ConfigError(f"t_step must be positive, got {t_step}")
    if explosion_ratio <= 1:
        raise ConfigError(f"explosion_ratio must exceed 1, got {explosion_ratio}")
    data = np.asarray(intensity.data, dtype=np.float64)
    seed = tuple(int(i) for i in seed)
    if len(seed) != 3 or any(not 0 <= s < n for s, n in zip(seed, data.shape)):
        raise SeedError(f"seed {seed} outside volume {data.shape}")
    if not data[seed] < t_start:
        raise SeedError(f"seed {seed} has {data[seed]:.1f} HU, not below the starting threshold {t_start}")

    trace = GrowthTrace()
    best: Optional[np.ndarray] = None
    n_steps = int(np.floor((t_max - t_start) / t_step + 1e-9)) + 1
    for k in range(n_steps):
        t = t_start + k * t_step
        grown = _grow(data, seed, t)
        count = int(grown.sum())
        trace.steps.append((t, count))
        if _faces_touched(grown) >= 2:
            trace.leakage = True
            break
        if best is not None and count > explosion_ratio * best.sum():
            trace.leakage = True
            break
        best, trace.chosen = grown, t
    if best is None:
        raise UnboundedLeakError(f"growth from {seed} spans the volume border already at {t_start} HU")
    if trace.leakage:
        log.info("airway growth leaked past %.0f HU; keeping %.0f HU", trace.steps[-1][0], trace.chosen)
    return make_mask(best, intensity.spacing, intensity.origin), trace


def find_trachea_seed(intensity: VoxelGrid, top_fraction: float = SEED_TOP_FRACTION,
                      air_hu: float = SEED_HU, area_mm2=SEED_AREA_MM2) -> tuple[int, int, int]:
    """Voxel near the centroid of the trachea in the top axial slices.

    Considers the ``top_fraction`` highest-z slices. In each, 2D components of
    voxels below ``air_hu`` that avoid the slice border and whose area falls
    within ``area_mm2`` are candidates; the largest wins (ties go to the
    higher slice). The returned voxel is the component voxel nearest its
    centroid, so it always lies inside the component.
    """
    data = np.asarray(intensity.data)
    nz = data.shape[2]
    n_top = max(1, int(round(nz * top_fraction)))
    px_area = intensity.spacing[0] * intensity.spacing[1]
    lo, hi = area_mm2
    best = None  # (area, z, component pixels)
    for z in range(nz - 1, nz - 1 - n_top, -1):
        labels, n = ndimage.label(data[:, :, z] < air_hu)
        for lab in range(1, n + 1):
            pix = np.argwhere(labels == lab)
            if pix[:, 0].min() == 0 or pix[:, 1].min() == 0 or \
                    pix[:, 0].max() == data.shape[0] - 1 or pix[:, 1].max() == data.shape[1] - 1:
                continue
            area = len(pix) * px_area
            if not lo <= area <= hi:
                continue
            if best is None or area > best[0]:
                best = (area, z, pix)
    if best is None:
        raise SeedError("no trachea candidate in the top slices; supply a seed voxel")
    _, z, pix = best
    c = pix.mean(axis=0)
    i, j = pix[np.argmin(np.sum((pix - c) ** 2, axis=1))]
    return int(i), int(j), int(z)


# --------------------------------------------------------- sliding window ---

def window_origins(n: int, window: int, overlap: float) -> list[int]:
    """Window start indices along one axis: stride ``int(window*(1-overlap))``,
    last window flush with the end."""
    if window > n:
        raise ConfigError(f"window {window} exceeds axis length {n}")
    if not 0 <= overlap <= 0.9:
        raise ConfigError(f"overlap must lie in [0, 0.9], got {overlap}")
    stride = max(1, int(window * (1.0 - overlap)))
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def sliding_window_infer(intensity: VoxelGrid, predictor: Predictor, window=DEFAULT_WINDOW,
                         overlap: float = DEFAULT_OVERLAP, origins: Optional[Sequence] = None,
                         workers: int = 1) -> VoxelGrid:
    """Average predictor output over overlapping windows covering the volume.

    ``origins`` overrides the tiling (and its visit order). With ``workers``
    above 1 the predictor runs on a thread pool; accumulation stays sequential.
    """
    window = tuple(int(w) for w in window)
    dims = intensity.dims
    for w, n in zip(window, dims):
        if w < 1 or w > n:
            raise ConfigError(f"window {window} does not fit volume {dims}")
    if origins is None:
        axes = [window_origins(n, w, overlap) for n, w in zip(dims, window)]
        origins = [(i, j, k) for i in axes[0] for j in axes[1] for k in axes[2]]
    origins = [tuple(int(v) for v in o) for o in origins]
    norm = clip_normalize(intensity)
    norm_data = np.asarray(norm.data)
    spacing = np.asarray(intensity.spacing)

    def run(o):
        sl = tuple(slice(a, a + w) for a, w in zip(o, window))
        patch = VoxelGrid(np.array(norm_data[sl]), intensity.spacing,
                          tuple(np.asarray(intensity.origin) + np.asarray(o) * spacing))
        out = predictor(patch)
        arr = np.asarray(out.data if isinstance(out, VoxelGrid) else out, dtype=np.float64)
        if arr.shape != window:
            raise GeometryMismatchError(f"predictor returned {arr.shape} for a {window} window")
        if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
            raise ValueError("predictor output outside [0, 1]")
        return sl, arr

    total = np.zeros(dims)
    hits = np.zeros(dims)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, origins))
    else:
        results = map(run, origins)
    for sl, arr in results:
        total[sl] += arr
        hits[sl] += 1
    if np.any(hits == 0):
        raise ConfigError("window origins leave voxels uncovered")
    return intensity.with_data((total / hits).astype(np.float32))


def binarize(prob: VoxelGrid, threshold: float = 0.5) -> VoxelGrid:
    return make_mask(np.asarray(prob.data) > threshold, prob.spacing, prob.origin)


# --------------------------------------------------------- stub predictors ---

def constant_predictor(value: float) -> Predictor:
    def predict(patch: VoxelGrid) -> VoxelGrid:
        return patch.with_data(np.full(patch.dims, value, dtype=np.float32))
    return predict


def threshold_predictor(level: float) -> Predictor:
    """1 where the normalised intensity is below ``level``, else 0."""
    def predict(patch: VoxelGrid) -> VoxelGrid:
        return patch.with_data((np.asarray(patch.data) < level).astype(np.float32))
    return predict


def reference_predictor(reference: VoxelGrid) -> Predictor:
    """Returns the matching window of ``reference`` (e.g. a ground-truth mask)."""
    ref = np.asarray(reference.data, dtype=np.float32)
    spacing = np.asarray(reference.spacing)

    def predict(patch: VoxelGrid) -> VoxelGrid:
        start = np.rint((np.asarray(patch.origin) - np.asarray(reference.origin)) / spacing).astype(int)
        sl = tuple(slice(a, a + n) for a, n in zip(start, patch.dims))
        return patch.with_data(ref[sl])
    return predict
