"""Boundary-weighted Dice + cross-entropy loss with analytic gradients.

The loss is for a two-class problem with a single foreground probability per
voxel. Voxel weights grow near the ground-truth airway boundary:

    w(v) = 1 + alpha * exp(-d_B(v)**2 / (2 sigma**2))

where ``d_B`` is the exact Euclidean distance (mm) to the boundary set. This
Gaussian form is a stand-in: only the monotone principle (closer to the
boundary means heavier) is fixed; alpha and sigma are configurable.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GeometryMismatchError
from .volume_io import VoxelGrid

DEFAULT_ALPHA = 2.0
DICE_EPS = 1e-5
CE_CLAMP = 1e-7


class NoForegroundWarning(UserWarning):
    """Distance transform of a mask without foreground; every distance is inf."""


# ------------------------------------------------------- distance transform ---

def _lower_envelope_1d(f: np.ndarray, step: float) -> np.ndarray:
    """Squared-distance transform of one sampled line (Felzenszwalb-Huttenlocher).

    ``f`` holds squared distances from the previous passes (``inf`` where no
    site is reachable yet); sample ``q`` sits at physical coordinate ``q*step``.
    """
    n = f.shape[0]
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        return f.copy()
    pos = [q * step for q in range(n)]
    fv = f.tolist()
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    v[0] = int(finite[0])
    z[0] = -math.inf
    z[1] = math.inf
    for q in finite[1:].tolist():
        pq, fq = pos[q], fv[q]
        r = v[k]
        s = ((fq + pq * pq) - (fv[r] + pos[r] * pos[r])) / (2.0 * (pq - pos[r]))
        while s <= z[k]:
            k -= 1
            r = v[k]
            s = ((fq + pq * pq) - (fv[r] + pos[r] * pos[r])) / (2.0 * (pq - pos[r]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = math.inf
    last = k
    out = np.empty(n)
    k = 0
    for q in range(n):
        while z[k + 1] < pos[q]:
            k += 1
        # neighbouring parabolas can tie in exact arithmetic yet differ by an
        # ulp in floating point; take the smaller rounded value
        best = math.inf
        for j in (k - 1, k, k + 1):
            if 0 <= j <= last:
                r = v[j]
                d = (q - r) * step
                val = d * d + fv[r]
                if val < best:
                    best = val
        out[q] = best
    return out


def edt_squared(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact squared Euclidean distance (mm^2) to the nearest nonzero voxel."""
    fg = np.asarray(mask).astype(bool)
    out = np.where(fg, 0.0, np.inf)
    for axis in range(out.ndim):
        moved = np.moveaxis(out, axis, -1)
        flat = moved.reshape(-1, moved.shape[-1])
        res = np.empty_like(flat)
        for i in range(flat.shape[0]):
            line = flat[i]
            if np.all(np.isinf(line)) or not np.any(line):
                res[i] = line
            else:
                res[i] = _lower_envelope_1d(line, float(spacing[axis]))
        out = np.moveaxis(res.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(out)


def edt(mask: VoxelGrid, spacing=None) -> VoxelGrid:
    """Euclidean distance (mm) from each voxel center to the nearest foreground
    voxel center, honouring anisotropic spacing. Foreground voxels get 0.

    An empty mask yields an all-``inf`` grid and a :class:`NoForegroundWarning`.
    """
    spacing = mask.spacing if spacing is None else tuple(float(s) for s in spacing)
    if not np.any(mask.data):
        warnings.warn("distance transform of an empty mask", NoForegroundWarning, stacklevel=2)
        return mask.with_data(np.full(mask.dims, np.inf))
    return mask.with_data(np.sqrt(edt_squared(mask.data, spacing)))


# ------------------------------------------------------------------ weights ---

_FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


def boundary_set(gt: np.ndarray) -> np.ndarray:
    """Foreground voxels touching background and background voxels touching
    foreground, both through 6-neighbours."""
    fg = np.asarray(gt).astype(bool)
    inner = fg & ~ndimage.binary_erosion(fg, _FACE_NEIGHBORS, border_value=1)
    outer = ndimage.binary_dilation(fg, _FACE_NEIGHBORS) & ~fg
    return inner | outer


def default_sigma(spacing) -> float:
    return 2.0 * max(spacing)


def boundary_weights(gt: VoxelGrid, alpha: float = DEFAULT_ALPHA, sigma: float | None = None) -> VoxelGrid:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    sigma = default_sigma(gt.spacing) if sigma is None else float(sigma)
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    b = boundary_set(gt.data)
    if not b.any():
        return gt.with_data(np.ones(gt.dims, dtype=np.float32))
    d2 = edt_squared(b, gt.spacing)
    w = 1.0 + alpha * np.exp(-d2 / (2.0 * sigma * sigma))
    return gt.with_data(w.astype(np.float32))


# ------------------------------------------------------------------- losses ---

@dataclass(frozen=True)
class LossPart:
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class LossValue:
    total: float
    dice_term: float
    ce_term: float
    gradient: np.ndarray  # dL/dp, float64, same shape as p


def _arrays(p, g, w):
    arrs = [np.asarray(x.data if isinstance(x, VoxelGrid) else x, dtype=np.float64) for x in (p, g, w)]
    if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
        raise GeometryMismatchError(
            f"loss inputs differ in shape: p {arrs[0].shape}, g {arrs[1].shape}, w {arrs[2].shape}"
        )
    return arrs


def weighted_dice_loss(p, g, w, eps: float = DICE_EPS) -> LossPart:
    """``1 - (2 sum(w p g) + eps) / (sum(w p) + sum(w g) + eps)`` and dL/dp."""
    p, g, w = _arrays(p, g, w)
    inter = float(np.sum(w * p * g))
    denom = float(np.sum(w * p) + np.sum(w * g)) + eps
    num = 2.0 * inter + eps
    value = 1.0 - num / denom
    grad = -(2.0 * w * g * denom - num * w) / (denom * denom)
    return LossPart(value, grad)


def weighted_ce_loss(p, g, w, clamp_eps: float = CE_CLAMP) -> LossPart:
    """Weighted binary cross-entropy normalised by the weight sum.

    Probabilities are clamped to ``[clamp_eps, 1 - clamp_eps]``; the gradient
    is zero where the clamp is active.
    """
    p, g, w = _arrays(p, g, w)
    pc = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    wsum = float(np.sum(w))
    ll = g * np.log(pc) + (1.0 - g) * np.log1p(-pc)
    value = -float(np.sum(w * ll)) / wsum
    grad = -w * (g / pc - (1.0 - g) / (1.0 - pc)) / wsum
    grad = np.where((p > clamp_eps) & (p < 1.0 - clamp_eps), grad, 0.0)
    return LossPart(value, grad)


def hybrid_loss(p, g, w, dice_eps: float = DICE_EPS, ce_clamp: float = CE_CLAMP,
                dice_weight: float = 0.5) -> LossValue:
    """Equal-weight combination of the weighted Dice and CE losses."""
    d = weighted_dice_loss(p, g, w, dice_eps)
    c = weighted_ce_loss(p, g, w, ce_clamp)
    a, b = dice_weight, 1.0 - dice_weight
    return LossValue(a * d.value + b * c.value, d.value, c.value, a * d.gradient + b * c.gradient)


def finite_difference_gradient(fn, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``fn`` with respect to every voxel of ``p``."""
    p = np.array(p, dtype=np.float64)
    grad = np.empty_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(p)
        flat[i] = orig - h
        down = fn(p)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max relative error; entries with |numeric| below ``floor`` use absolute error."""
    diff = np.abs(analytic - numeric)
    scale = np.abs(numeric)
    rel = np.where(scale >= floor, diff / np.maximum(scale, floor), diff)
    return float(rel.max())
