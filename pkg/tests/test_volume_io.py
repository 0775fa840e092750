import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from airwayquant.errors import (BadMagicError, EmptyMaskError, TruncatedFileError,
                                UnsupportedDtypeError)
from airwayquant.volume_io import (VOX_OFFSET, VoxelGrid, clip_normalize, crop_to_bbox, embed,
                                   is_mask, make_mask, read_nifti, resample_trilinear, write_nifti)

DTYPES = (np.uint8, np.int16, np.float32)


def _grid(dtype, shape=(4, 5, 6), spacing=(0.7, 0.7, 1.25), origin=(-10.5, 3.0, 7.25), seed=0):
    rng = np.random.default_rng(seed)
    if dtype == np.float32:
        data = rng.normal(size=shape).astype(np.float32)
    else:
        info = np.iinfo(dtype)
        data = rng.integers(info.min, info.max, size=shape, endpoint=True).astype(dtype)
    return VoxelGrid(data, spacing, origin)


@pytest.mark.parametrize("dtype", DTYPES)
def test_round_trip_bit_exact(tmp_path, dtype):
    g = _grid(dtype)
    path = tmp_path / "g.nii"
    write_nifti(g, path)
    back = read_nifti(path)
    assert back.data.dtype == g.data.dtype
    assert back.data.tobytes() == g.data.tobytes()
    assert back.dims == g.dims
    assert back.spacing == g.spacing
    assert back.origin == g.origin


def test_data_block_is_x_fastest_and_sized(tmp_path):
    g = VoxelGrid(np.arange(8, dtype=np.int16).reshape((2, 2, 2), order="F"))
    path = tmp_path / "ramp.nii"
    write_nifti(g, path)
    raw = path.read_bytes()
    assert len(raw) - VOX_OFFSET == 16
    assert np.frombuffer(raw[VOX_OFFSET:], "<i2").tolist() == list(range(8))


def test_header_fields(tmp_path):
    g = VoxelGrid(np.zeros((3, 4, 5), np.uint8))
    path = tmp_path / "h.nii"
    write_nifti(g, path)
    raw = path.read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<4h", raw, 40) == (3, 3, 4, 5)
    assert struct.unpack_from("<3f", raw, 80) == (1.0, 1.0, 1.0)
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert raw[344:348] == b"n+1\x00"


def test_bad_magic(tmp_path):
    path = tmp_path / "m.nii"
    write_nifti(VoxelGrid(np.zeros((2, 2, 2), np.uint8)), path)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"ni1\x00"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_nifti(path)


def test_unsupported_dtype(tmp_path):
    path = tmp_path / "d.nii"
    write_nifti(VoxelGrid(np.zeros((2, 2, 2), np.uint8)), path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<h", raw, 70, 64)  # float64
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDtypeError):
        read_nifti(path)


def test_truncated(tmp_path):
    path = tmp_path / "t.nii"
    write_nifti(VoxelGrid(np.zeros((4, 4, 4), np.float32)), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedFileError):
        read_nifti(path)


def test_scaling_applied(tmp_path):
    path = tmp_path / "s.nii"
    write_nifti(VoxelGrid(np.arange(8, dtype=np.int16).reshape(2, 2, 2)), path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<ff", raw, 112, 2.0, -1024.0)
    path.write_bytes(bytes(raw))
    g = read_nifti(path)
    assert g.data.dtype == np.float32
    assert np.array_equal(g.data, np.arange(8).reshape(2, 2, 2) * 2.0 - 1024.0)


def test_voxel_volume_from_spacing():
    g = VoxelGrid(np.zeros((512, 512, 300), np.int16), (0.7, 0.7, 1.0))
    assert g.voxel_volume == pytest.approx(0.49, abs=1e-12)


def test_invalid_grids_rejected():
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_resample_identity_and_constant():
    g = _grid(np.float32, (5, 6, 7))
    same = resample_trilinear(g, g.dims)
    assert np.max(np.abs(same.data - g.data)) < 1e-5
    const = VoxelGrid(np.full((4, 4, 4), 3.5, np.float32))
    out = resample_trilinear(const, (9, 3, 7))
    assert np.allclose(out.data, 3.5)
    assert np.allclose(np.asarray(out.dims) * out.spacing, np.asarray(const.dims) * const.spacing)


def test_resample_ramp_halves_increment():
    ramp = VoxelGrid(np.tile(np.arange(8, dtype=np.float32)[:, None, None], (1, 2, 2)))
    up = resample_trilinear(ramp, (16, 2, 2))
    steps = np.diff(up.data[:, 0, 0])
    assert np.allclose(steps[1:-1], 0.5)
    assert up.spacing[0] == pytest.approx(0.5)


def test_clip_normalize_examples():
    g = VoxelGrid(np.array([-1000, 400, -300, -2000, 3000], np.float32).reshape(5, 1, 1))
    out = clip_normalize(g).data.ravel()
    assert out.tolist() == pytest.approx([0.0, 1.0, 0.5, 0.0, 1.0])
    mid = clip_normalize(VoxelGrid(np.full((1, 1, 1), 5.0, np.float32)), 0.0, 10.0)
    assert float(mid.data[0, 0, 0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        clip_normalize(g, 10.0, 10.0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, (6,), elements=st.floats(-3000, 3000, width=32)))
def test_clip_normalize_monotone(values):
    v = np.sort(values).reshape(6, 1, 1)
    out = clip_normalize(VoxelGrid(v)).data.ravel()
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0 and out.max() <= 1


def test_crop_examples():
    g = VoxelGrid(np.arange(1000, dtype=np.float32).reshape(10, 10, 10))
    full, _ = crop_to_bbox(g, make_mask(np.ones(g.dims)), 0)
    assert np.array_equal(full.data, g.data)
    one = np.zeros(g.dims)
    one[5, 5, 5] = 1
    sub, box = crop_to_bbox(g, make_mask(one), 1)
    assert sub.dims == (3, 3, 3) and float(sub.data[1, 1, 1]) == float(g.data[5, 5, 5])
    assert np.allclose(sub.origin, (4.0, 4.0, 4.0))
    two = np.zeros(g.dims)
    two[2, 2, 2] = two[7, 3, 2] = 1
    sub, box = crop_to_bbox(g, make_mask(two), 0)
    assert sub.dims == (6, 2, 1)
    back = embed(sub, box, g)
    assert np.array_equal(back.data[box.slices], sub.data)
    with pytest.raises(EmptyMaskError):
        crop_to_bbox(g, make_mask(np.zeros(g.dims)))


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9)),
       st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9)),
       st.integers(0, 4))
def test_crop_dims_are_clamped_bbox(a, b, margin):
    m = np.zeros((10, 10, 10))
    m[a] = m[b] = 1
    sub, _ = crop_to_bbox(VoxelGrid(m.astype(np.float32)), make_mask(m), margin)
    expect = tuple(min(9, max(x, y) + margin) - max(0, min(x, y) - margin) + 1 for x, y in zip(a, b))
    assert sub.dims == expect


def test_mask_helpers():
    m = make_mask(np.array([[[0, 2], [3, 0]]]))
    assert is_mask(m) and m.data.dtype == np.uint8
    assert not is_mask(VoxelGrid(np.full((1, 1, 1), 2, np.uint8)))
