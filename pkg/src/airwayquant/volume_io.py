"""Voxel grids, a minimal NIfTI-1 reader/writer and basic geometric transforms.

Arrays are held as ``(nx, ny, nz)`` numpy arrays indexed ``[x, y, z]``; on disk
the data block is x-fastest, which is Fortran order for that shape.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    EmptyMaskError,
    GeometryMismatchError,
    NiftiError,
    TruncatedFileError,
    UnsupportedDtypeError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> (numpy dtype, bitpix)
NIFTI_DTYPES = {
    2: (np.dtype("<u1"), 8),
    4: (np.dtype("<i2"), 16),
    16: (np.dtype("<f4"), 32),
}
DTYPE_TAGS = {"uint8": 2, "int16": 4, "float32": 16}
_TAG_FOR_KIND = {("u", 1): "uint8", ("i", 2): "int16", ("f", 4): "float32"}

DEFAULT_CLIP_HU = (-1000.0, 400.0)
DEFAULT_RESAMPLE_DIMS = (128, 128, 128)


@dataclass(frozen=True)
class VoxelGrid:
    """A 3D scalar field with physical geometry.

    ``data`` has shape ``(nx, ny, nz)``. ``spacing`` and ``origin`` are in mm.
    The origin is the physical position of voxel ``(0, 0, 0)``'s center.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"VoxelGrid data must be 3D, got shape {data.shape}")
        if any(n <= 0 for n in data.shape):
            raise ValueError(f"VoxelGrid dims must be positive, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError(f"origin must have three components, got {self.origin}")
        if data.flags.writeable:  # private copy; never freeze the caller's array
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def dtype_tag(self) -> str | None:
        dt = self.data.dtype
        return _TAG_FOR_KIND.get((dt.kind, dt.itemsize))

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        """Same geometry, new voxel values."""
        return VoxelGrid(np.asarray(data), self.spacing, self.origin)

    def same_geometry(self, other: "VoxelGrid", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
        )

    def index_to_world(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=float)
        return np.asarray(self.origin) + ijk * np.asarray(self.spacing)

    def world_to_index(self, xyz) -> np.ndarray:
        """Continuous voxel coordinates of physical points."""
        xyz = np.asarray(xyz, dtype=float)
        return (xyz - np.asarray(self.origin)) / np.asarray(self.spacing)


def make_mask(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> VoxelGrid:
    """Build a binary uint8 grid from anything truthy."""
    return VoxelGrid(np.asarray(data).astype(bool).astype(np.uint8), spacing, origin)


def is_mask(grid: VoxelGrid) -> bool:
    d = grid.data
    return d.dtype == np.uint8 and bool(np.all((d == 0) | (d == 1)))


def require_same_geometry(*grids: VoxelGrid) -> None:
    first = grids[0]
    for g in grids[1:]:
        if not first.same_geometry(g):
            raise GeometryMismatchError(
                f"grid geometry differs: dims {first.dims} vs {g.dims}, "
                f"spacing {first.spacing} vs {g.spacing}, origin {first.origin} vs {g.origin}"
            )


# ---------------------------------------------------------------- NIfTI-1 ---

def _header_bytes(grid: VoxelGrid, code: int) -> bytes:
    dtype, bitpix = NIFTI_DTYPES[code]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    nx, ny, nz = grid.dims
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hhh", hdr, 70, code, bitpix, 0)
    sx, sy, sz = grid.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    # xyzt_units: mm (2)
    struct.pack_into("<B", hdr, 123, 2)
    struct.pack_into("<hh", hdr, 252, 1, 0)  # qform_code scanner, sform unused
    ox, oy, oz = grid.origin
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, ox, oy, oz)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(grid: VoxelGrid, path) -> None:
    """Write ``grid`` as single-file, uncompressed, little-endian NIfTI-1."""
    tag = grid.dtype_tag
    if tag is None:
        raise UnsupportedDtypeError(
            f"cannot write dtype {grid.data.dtype}; supported: {sorted(DTYPE_TAGS)}"
        )
    code = DTYPE_TAGS[tag]
    dtype, _ = NIFTI_DTYPES[code]
    payload = np.asarray(grid.data, dtype=dtype).tobytes(order="F")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_header_bytes(grid, code))
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)


def _f32_to_float(v: float) -> float:
    # header fields are float32; recover the shortest decimal that produced them
    return float(str(np.float32(v)))


def read_nifti(path) -> VoxelGrid:
    """Read the NIfTI-1 subset produced by :func:`write_nifti`.

    Spacing comes from ``pixdim[1..3]`` and the origin from the qform offsets;
    the sform is ignored. ``scl_slope``/``scl_inter`` are applied (yielding
    float32) when the slope is nonzero and not the identity.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, shorter than a NIfTI-1 header")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise BadMagicError(f"{path}: magic {magic!r} is not single-file NIfTI-1 'n+1'")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"{path}: sizeof_hdr={sizeof_hdr}; only little-endian files are supported")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise NiftiError(f"{path}: only 3D volumes are supported, dim={dim[: ndim + 1]}")
    nx, ny, nz = (max(1, int(d)) if i < ndim else 1 for i, d in enumerate(dim[1:4]))

    code, _bitpix = struct.unpack_from("<hh", raw, 70)
    if code not in NIFTI_DTYPES:
        raise UnsupportedDtypeError(f"{path}: datatype code {code} not in {sorted(NIFTI_DTYPES)}")
    dtype, _ = NIFTI_DTYPES[code]

    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from("<fff", raw, 108)
    qoffset = struct.unpack_from("<3f", raw, 268)

    start = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    count = nx * ny * nz
    nbytes = count * dtype.itemsize
    if len(raw) < start + nbytes:
        raise TruncatedFileError(
            f"{path}: data block has {max(0, len(raw) - start)} bytes, expected {nbytes}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    data = data.reshape((nx, ny, nz), order="F").astype(dtype.newbyteorder("="), order="C")

    if slope != 0 and math.isfinite(slope) and not (slope == 1 and inter == 0):
        data = (data.astype(np.float64) * slope + inter).astype(np.float32)

    spacing = tuple(abs(_f32_to_float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    origin = tuple(_f32_to_float(q) for q in qoffset)
    return VoxelGrid(data, spacing, origin)


# ------------------------------------------------------------- transforms ---

def _linear_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    """Center-aligned linear resampling of one axis with clamp-to-edge."""
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a + (b - a) * frac


def resample_trilinear(grid: VoxelGrid, target_dims) -> VoxelGrid:
    """Resample to ``target_dims`` keeping the physical extent fixed.

    Voxel centers are aligned so that the extent ``n * spacing`` is preserved;
    samples falling outside the source centers are clamped to the edge.
    """
    target = tuple(int(n) for n in target_dims)
    if len(target) != 3 or any(n <= 0 for n in target):
        raise ValueError(f"target dims must be three positive integers, got {target_dims}")
    out = np.asarray(grid.data, dtype=np.float64)
    for axis in range(3):
        out = _linear_axis(out, axis, target[axis])
    spacing = tuple(s * n / m for s, n, m in zip(grid.spacing, grid.dims, target))
    # keep the physical position of the volume's outer corner
    origin = tuple(
        o - 0.5 * s + 0.5 * s_new for o, s, s_new in zip(grid.origin, grid.spacing, spacing)
    )
    dtype = np.float32 if grid.data.dtype != np.float64 else np.float64
    return VoxelGrid(out.astype(dtype), spacing, origin)


def clip_normalize(grid: VoxelGrid, lo: float = DEFAULT_CLIP_HU[0], hi: float = DEFAULT_CLIP_HU[1]) -> VoxelGrid:
    """Clamp intensities to ``[lo, hi]`` and map linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise ValueError(f"clip range requires lo < hi, got lo={lo}, hi={hi}")
    d = np.clip(np.asarray(grid.data, dtype=np.float64), lo, hi)
    return grid.with_data(((d - lo) / (hi - lo)).astype(np.float32))


@dataclass(frozen=True)
class BBox:
    """Half-open index box ``[lo, hi)`` in the parent grid."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))


def mask_bbox(mask: VoxelGrid, margin: int = 0) -> BBox:
    fg = np.nonzero(mask.data)
    if fg[0].size == 0:
        raise EmptyMaskError("bounding box of an empty mask is undefined")
    lo = tuple(max(0, int(ax.min()) - margin) for ax in fg)
    hi = tuple(min(n, int(ax.max()) + 1 + margin) for ax, n in zip(fg, mask.dims))
    return BBox(lo, hi)


def crop_to_bbox(grid: VoxelGrid, mask: VoxelGrid, margin: int = 0) -> tuple[VoxelGrid, BBox]:
    """Crop ``grid`` to the mask's bounding box grown by ``margin`` voxels."""
    if grid.dims != mask.dims:
        raise GeometryMismatchError(f"grid dims {grid.dims} != mask dims {mask.dims}")
    box = mask_bbox(mask, margin)
    origin = grid.index_to_world(box.lo)
    return VoxelGrid(grid.data[box.slices].copy(), grid.spacing, tuple(origin)), box


def embed(sub: VoxelGrid, box: BBox, reference: VoxelGrid, fill=0) -> VoxelGrid:
    """Place a cropped result back into the geometry of ``reference``."""
    if sub.dims != box.shape:
        raise GeometryMismatchError(f"sub-grid dims {sub.dims} do not match box {box.shape}")
    out = np.full(reference.dims, fill, dtype=sub.data.dtype)
    out[box.slices] = sub.data
    return reference.with_data(out)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
