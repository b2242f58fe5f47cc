import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masan.patching import GridSpec, PatchSet, partition3d, partition4d, reassemble3d, reassemble4d
from masan.tensor import ShapeError, Tensor


def cell_slices(k, spec, patch):
    iz, iy, ix = spec.cell(k)
    d, h, w = patch
    return slice(iz * d, (iz + 1) * d), slice(iy * h, (iy + 1) * h), slice(ix * w, (ix + 1) * w)


def test_divisible_volume_gives_64_small_patches():
    ps = partition3d(np.zeros((1, 8, 8, 8)))
    assert len(ps) == 64
    assert all(p.shape == (1, 2, 2, 2) for p in ps.patches)


def test_full_resolution_patch_shape():
    spec = GridSpec()
    assert spec.patch_extents((240, 256, 176)) == (60, 64, 44)
    assert spec.n_patches == 64


def test_non_divisible_volume_is_padded_high_with_zeros():
    vol = np.random.default_rng(0).uniform(1, 2, (1, 9, 8, 8))
    ps = partition3d(vol)
    assert ps.padded_extents == (12, 8, 8)
    assert ps.patches[0].shape == (1, 3, 2, 2)
    # z rows 9..11 are padding and form exactly the top layer of cells
    for k, p in enumerate(ps.patches):
        if GridSpec().cell(k)[0] == 3:
            assert np.all(p.data == 0)
        else:
            assert np.all(p.data > 0)


def test_patch_order_is_z_major():
    vol = np.zeros((1, 4, 4, 4))
    for z in range(4):
        for y in range(4):
            for x in range(4):
                vol[0, z, y, x] = 16 * z + 4 * y + x
    ps = partition3d(vol)
    assert [int(p.data.item()) for p in ps.patches] == list(range(64))


@pytest.mark.parametrize("shape", [(1, 8, 8, 8), (1, 9, 8, 8), (2, 5, 7, 11)])
def test_round_trip_bit_identical(shape):
    vol = np.random.default_rng(1).standard_normal(shape).astype(np.float32)
    assert reassemble3d(partition3d(vol)).data.tobytes() == vol.tobytes()


def test_zeroing_one_patch_changes_exactly_its_cell():
    spec = GridSpec()
    vol = np.random.default_rng(2).uniform(1, 2, (1, 8, 8, 8)).astype(np.float32)
    ps = partition3d(vol)
    k = 37
    ps.patches[k] = Tensor(np.zeros_like(ps.patches[k].data))
    changed = reassemble3d(ps).data != vol
    expect = np.zeros_like(changed)
    expect[(slice(None),) + cell_slices(k, spec, (2, 2, 2))] = True
    assert np.array_equal(changed, expect)


def test_volume_smaller_than_grid_is_rejected():
    with pytest.raises(ShapeError):
        partition3d(np.zeros((1, 3, 8, 8)))


def test_inconsistent_patch_set_is_rejected():
    ps = partition3d(np.zeros((1, 8, 8, 8)))
    ps.patches[5] = Tensor(np.zeros((1, 2, 2, 3)))
    with pytest.raises(ShapeError):
        reassemble3d(ps)
    with pytest.raises(ShapeError):
        reassemble3d(PatchSet(ps.patches[:10], (8, 8, 8), (8, 8, 8)))


def test_partition4d_keeps_time_axis():
    series = np.random.default_rng(3).standard_normal((8, 1, 8, 8, 8)).astype(np.float32)
    ps = partition4d(series)
    assert len(ps) == 64 and ps.patches[0].shape == (8, 1, 2, 2, 2)
    back = reassemble4d(ps).data
    for t in range(8):
        assert np.array_equal(back[t], reassemble3d(partition3d(series[t])).data)


def test_partition4d_single_frame_matches_partition3d():
    vol = np.random.default_rng(4).standard_normal((1, 8, 8, 8)).astype(np.float32)
    p4 = partition4d(vol[None])
    p3 = partition3d(vol)
    for a, b in zip(p4.patches, p3.patches):
        assert np.array_equal(a.data[0], b.data)


def test_orderings_are_stable():
    vol = np.random.default_rng(5).standard_normal((1, 8, 12, 8))
    a, b = partition3d(vol), partition3d(vol)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.patches, b.patches))


extents = st.integers(4, 32)


@settings(max_examples=50, deadline=None)
@given(extents, extents, extents, st.integers(0, 2 ** 31))
def test_round_trip_property(d, h, w, seed):
    vol = np.random.default_rng(seed).standard_normal((1, d, h, w)).astype(np.float32)
    ps = partition3d(vol)
    assert all(p.shape == ps.patches[0].shape for p in ps.patches)
    assert tuple(e * g for e, g in zip(ps.patches[0].shape[1:], (4, 4, 4))) == ps.padded_extents
    assert reassemble3d(ps).data.tobytes() == vol.tobytes()


@settings(max_examples=30, deadline=None)
@given(extents, extents, extents)
def test_every_voxel_in_exactly_one_patch(d, h, w):
    spec = GridSpec()
    ids = np.arange(d * h * w, dtype=np.float64).reshape(1, d, h, w) + 1  # 0 marks padding
    ps = partition3d(ids.astype(np.float32) if d * h * w < 2 ** 24 else ids)
    counts = np.zeros(d * h * w + 1, dtype=int)
    for p in ps.patches:
        np.add.at(counts, p.data.astype(np.int64).ravel(), 1)
    assert np.all(counts[1:] == 1)
    assert counts[0] == int(np.prod(ps.padded_extents)) - d * h * w
    assert spec.n_patches == len(ps)
