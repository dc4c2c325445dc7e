import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segvae.errors import BoundsError, DataError, DegenerateInputError, FormatError, UnsupportedError
from segvae.volume_io import LabelVolume, Volume, crop, load, read_nifti, save, write_nifti, zscore_normalize


def raw_nifti(payload, shape, datatype, bitpix, pixdim=(1.0, 1.0, 1.0), slope=0.0, inter=0.0,
              magic=b"n+1\0", sizeof_hdr=348, ndim=3, vox_offset=352.0):
    """Independent header builder used as the reading oracle."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, sizeof_hdr)
    struct.pack_into("<8h", hdr, 40, ndim, *shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    pad = b"\0" * (int(vox_offset) - 348)
    return bytes(hdr) + pad + payload


def test_minimal_float_file():
    vals = np.arange(8, dtype="<f4")
    vol = read_nifti(raw_nifti(vals.tobytes(), (2, 2, 2), 16, 32))
    assert vol.shape == (2, 2, 2)
    # payload order is x fastest
    assert vol.data[1, 0, 0] == 1.0 and vol.data[0, 1, 0] == 2.0 and vol.data[0, 0, 1] == 4.0


def test_float64_unsupported():
    raw = raw_nifti(np.zeros(8).tobytes(), (2, 2, 2), 64, 64)
    with pytest.raises(UnsupportedError):
        read_nifti(raw)


def test_int16_slope_intercept():
    vals = np.full(8, 3, dtype="<i2")
    vol = read_nifti(raw_nifti(vals.tobytes(), (2, 2, 2), 4, 16, slope=2.0, inter=1.0))
    assert np.all(vol.data == 7.0)


def test_zero_slope_means_raw_values():
    vals = np.full(8, 3, dtype="<i2")
    vol = read_nifti(raw_nifti(vals.tobytes(), (2, 2, 2), 4, 16, slope=0.0, inter=5.0))
    assert np.all(vol.data == 3.0)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"sizeof_hdr": 540}, "sizeof_hdr"),
        ({"magic": b"xx1\0"}, "magic"),
        ({"ndim": 4}, "dim"),
    ],
)
def test_malformed_header_names_field(kwargs, field):
    raw = raw_nifti(np.zeros(8, "<f4").tobytes(), (2, 2, 2), 16, 32, **kwargs)
    with pytest.raises(FormatError, match=field):
        read_nifti(raw)


def test_truncated_payload():
    raw = raw_nifti(np.zeros(8, "<f4").tobytes(), (2, 2, 2), 16, 32)
    with pytest.raises(FormatError):
        read_nifti(raw[:-4])


def test_nan_payload_rejected():
    vals = np.zeros(8, "<f4")
    vals[3] = np.nan
    with pytest.raises(DataError):
        read_nifti(raw_nifti(vals.tobytes(), (2, 2, 2), 16, 32))


def test_gzip_input():
    vals = np.arange(8, dtype="<f4")
    vol = read_nifti(gzip.compress(raw_nifti(vals.tobytes(), (2, 2, 2), 16, 32)))
    assert vol.data.sum() == 28


def test_label_volume_datatype_and_values():
    lab = LabelVolume(np.array([0, 1, 2, 4, 0, 0, 1, 2], np.uint8).reshape(2, 2, 2))
    raw = write_nifti(lab)
    assert struct.unpack_from("<h", raw, 70)[0] == 2
    back = read_nifti(raw, labels=True)
    assert np.array_equal(back.data, lab.data)
    with pytest.raises(DataError):
        LabelVolume(np.full((2, 2, 2), 3, np.uint8))


def test_spacing_written_to_pixdim():
    raw = write_nifti(Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.2)))
    assert struct.unpack_from("<f", raw, 76 + 12)[0] == np.float32(1.2)


@settings(max_examples=30, deadline=None)
@given(
    shape=st.tuples(*[st.integers(1, 5)] * 3),
    spacing=st.tuples(*[st.floats(0.25, 4.0, width=32)] * 3),
    origin=st.tuples(*[st.floats(-100, 100, width=32)] * 3),
    seed=st.integers(0, 2**31),
)
def test_round_trip_bit_exact(shape, spacing, origin, seed):
    data = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    v = Volume(data, spacing, origin)
    back = read_nifti(write_nifti(v))
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing_mm == v.spacing_mm
    assert back.origin_mm == v.origin_mm


def test_orientation_block_preserved():
    raw = bytearray(write_nifti(Volume(np.ones((2, 2, 2)))))
    raw[252:254] = struct.pack("<h", 1)
    raw[280:292] = struct.pack("<3f", 0.5, 0.25, 0.125)
    v = read_nifti(bytes(raw))
    assert write_nifti(v)[252:328] == bytes(raw[252:328])


def test_save_load(tmp_path):
    v = Volume(np.random.default_rng(0).random((3, 4, 5)), (1, 2, 3), (4, 5, 6))
    save(v, tmp_path / "a.nii")
    w = load(tmp_path / "a.nii")
    assert np.array_equal(v.data, w.data) and w.spacing_mm == (1, 2, 3)


def test_crop_identity_and_origin():
    v = Volume(np.random.default_rng(1).random((6, 7, 8)), (1.0, 2.0, 0.5), (10.0, 0.0, -5.0))
    assert np.array_equal(crop(v, (0, 0, 0), v.shape).data, v.data)
    c = crop(v, (1, 2, 3), (2, 2, 2))
    assert np.array_equal(c.data, v.data[1:3, 2:4, 3:5])
    assert c.origin_mm == (11.0, 4.0, -3.5)


def test_crop_full_scale_dimensions():
    v = Volume(np.zeros((240, 240, 155), np.float32))
    assert crop(v, (40, 25, 7), (160, 190, 140)).shape == (160, 190, 140)


def test_crop_out_of_bounds():
    v = Volume(np.zeros((240, 240, 155), np.float32))
    with pytest.raises(BoundsError):
        crop(v, (200, 200, 100), (80, 80, 80))
    with pytest.raises(BoundsError):
        crop(v, (-1, 0, 0), (2, 2, 2))


def test_crop_composition():
    v = Volume(np.random.default_rng(2).random((9, 9, 9)))
    a, b = (1, 2, 0), (2, 1, 3)
    lhs = crop(crop(v, a, (6, 6, 6)), b, (3, 3, 3))
    rhs = crop(v, tuple(i + j for i, j in zip(a, b)), (3, 3, 3))
    assert np.array_equal(lhs.data, rhs.data) and lhs.origin_mm == rhs.origin_mm


def test_zscore_hand_values():
    d = np.zeros((2, 2, 2), np.float32)
    d[0, 0, 0], d[1, 1, 1] = 2, 4
    z = zscore_normalize(Volume(d))
    assert z.data[0, 0, 0] == pytest.approx(-1) and z.data[1, 1, 1] == pytest.approx(1)
    assert np.count_nonzero(z.data) == 2


def test_zscore_stats_and_idempotence(rng):
    d = rng.random((8, 8, 8)).astype(np.float32) * 5 + 2
    d[:2] = 0
    z = zscore_normalize(Volume(d))
    nz = z.data[d != 0].astype(np.float64)
    assert abs(nz.mean()) <= 1e-5 and abs(nz.std() - 1) <= 1e-5
    assert np.all(z.data[d == 0] == 0)
    assert np.allclose(zscore_normalize(z).data, z.data, atol=1e-5)


def test_zscore_degenerate():
    with pytest.raises(DegenerateInputError):
        zscore_normalize(Volume(np.full((2, 2, 2), 3.0)))
    with pytest.raises(DegenerateInputError):
        zscore_normalize(Volume(np.zeros((2, 2, 2))))
