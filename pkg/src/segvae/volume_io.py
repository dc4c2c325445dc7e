"""NIfTI-1 subset reader/writer, cropping and intensity normalization.

Arrays are indexed ``[x, y, z]`` (x fastest in the file payload, matching the
NIfTI voxel order). Only the header fields needed to recover the grid are
interpreted; the qform/sform block is carried through as opaque bytes.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BoundsError, DataError, DegenerateInputError, FormatError, UnsupportedError

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy little-endian dtype
DATATYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
}
BITPIX = {code: dt.itemsize * 8 for code, dt in DATATYPES.items()}

LABEL_VALUES = (0, 1, 2, 4)

# qform_code .. srow_z, preserved verbatim on round trip
_ORIENT_START, _ORIENT_END = 252, 328
_QOFFSET = 268


def _as3(values, kind):
    out = tuple(kind(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"expected 3 components, got {len(out)}")
    return out


@dataclass
class Volume:
    """Single-channel 3D scalar grid with voxel spacing in mm."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)
    orientation: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing_mm = _as3(self.spacing_mm, float)
        self.origin_mm = _as3(self.origin_mm, float)
        if min(self.spacing_mm) <= 0:
            raise DataError(f"spacing must be positive, got {self.spacing_mm}")

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class LabelVolume:
    """Label map with values in {0, 1, 2, 4}."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)
    orientation: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DataError(f"label volume must be 3D, got shape {arr.shape}")
        bad = ~np.isin(arr, LABEL_VALUES)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DataError(f"illegal label value {arr[idx]!r} at voxel {idx}")
        self.data = np.ascontiguousarray(arr, dtype=np.uint8)
        self.spacing_mm = _as3(self.spacing_mm, float)
        self.origin_mm = _as3(self.origin_mm, float)
        if min(self.spacing_mm) <= 0:
            raise DataError(f"spacing must be positive, got {self.spacing_mm}")

    @property
    def labels(self):
        return self.data

    @property
    def shape(self):
        return tuple(self.data.shape)


def read_nifti(raw: bytes, labels: bool = False) -> Volume | LabelVolume:
    """Parse a single-file NIfTI-1 image (optionally gzip-compressed).

    With ``labels=True`` the payload is validated against {0,1,2,4} and
    returned as a :class:`LabelVolume`.
    """
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"sizeof_hdr: file has only {len(raw)} bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise UnsupportedError("sizeof_hdr: big-endian files are not supported")
        raise FormatError(f"sizeof_hdr: expected 348, got {sizeof_hdr}")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"magic: expected 'n+1' or 'ni1', got {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise FormatError(f"dim[0]: expected 3 dimensions, got {dim[0]}")
    shape = dim[1:4]
    if min(shape) < 1:
        raise FormatError(f"dim: non-positive extent {shape}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in DATATYPES:
        raise UnsupportedError(f"datatype: code {datatype} not supported")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if min(spacing) <= 0 or not all(np.isfinite(spacing)):
        raise FormatError(f"pixdim: spacing must be positive, got {spacing}")
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", raw, 108)
    if not np.isfinite(vox_offset) or vox_offset < HEADER_SIZE or vox_offset != int(vox_offset):
        raise FormatError(f"vox_offset: invalid value {vox_offset}")

    dtype = DATATYPES[datatype]
    count = int(np.prod(shape))
    start = int(vox_offset)
    if len(raw) < start + count * dtype.itemsize:
        raise FormatError(
            f"vox_offset: payload truncated ({len(raw) - start} of {count * dtype.itemsize} bytes)"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    data = flat.reshape(shape, order="F")

    if np.isfinite(scl_slope) and scl_slope != 0 and not (scl_slope == 1 and scl_inter == 0):
        data = data.astype(np.float64) * scl_slope + scl_inter
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise DataError("payload contains NaN or Inf")

    origin = struct.unpack_from("<3f", raw, _QOFFSET)
    orientation = bytes(raw[_ORIENT_START:_ORIENT_END])
    if labels:
        if data.dtype.kind == "f" and not np.array_equal(data, np.round(data)):
            raise DataError("label payload is not integral")
        return LabelVolume(np.ascontiguousarray(data).astype(np.int64), spacing, origin, orientation)
    return Volume(np.ascontiguousarray(data, dtype=np.float32), spacing, origin, orientation)


def write_nifti(vol: Volume | LabelVolume) -> bytes:
    """Serialize to single-file NIfTI-1 bytes (uint8 for labels, float32 otherwise)."""
    if isinstance(vol, LabelVolume):
        datatype, payload = 2, vol.data.astype("<u1")
    else:
        datatype, payload = 16, vol.data.astype("<f4")
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing_mm, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 0.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    if vol.orientation is not None and len(vol.orientation) == _ORIENT_END - _ORIENT_START:
        hdr[_ORIENT_START:_ORIENT_END] = vol.orientation
    struct.pack_into("<3f", hdr, _QOFFSET, *vol.origin_mm)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + payload.tobytes(order="F")


def load(path, labels=False):
    with open(path, "rb") as fh:
        return read_nifti(fh.read(), labels=labels)


def save(vol, path):
    with open(path, "wb") as fh:
        fh.write(write_nifti(vol))


def crop(v, offset, shape):
    """Sub-grid ``v[offset : offset + shape]`` with the origin shifted accordingly."""
    offset = tuple(int(o) for o in offset)
    shape = tuple(int(s) for s in shape)
    for o, s, n in zip(offset, shape, v.shape):
        if o < 0 or s < 1 or o + s > n:
            raise BoundsError(f"crop window offset {offset} shape {shape} exceeds volume {v.shape}")
    sl = tuple(slice(o, o + s) for o, s in zip(offset, shape))
    origin = tuple(org + o * sp for org, o, sp in zip(v.origin_mm, offset, v.spacing_mm))
    return replace(v, data=v.data[sl].copy(), origin_mm=origin)


def zscore_normalize(v: Volume) -> Volume:
    """Standardize the nonzero voxels to zero mean and unit variance.

    Background (exactly zero) stays zero, acting as an implicit brain mask.
    """
    mask = v.data != 0
    if not mask.any():
        raise DegenerateInputError("zscore_normalize: volume has no nonzero voxels")
    vals = v.data[mask].astype(np.float64)
    mean = vals.mean()
    std = vals.std()
    if std == 0:
        raise DegenerateInputError("zscore_normalize: nonzero voxels have zero variance")
    out = np.zeros(v.shape, dtype=np.float64)
    out[mask] = (vals - mean) / std
    # a normalized voxel can land exactly on 0 and would then drop out of the mask
    out[mask & (out == 0)] = np.finfo(np.float32).tiny
    return replace(v, data=out.astype(np.float32))
