"""Minimal NIfTI-1 reader/writer.

Supports single-file .nii / .nii.gz volumes with axis-aligned geometry,
which is all this pipeline produces or consumes. Arrays are exchanged in
(slice, row, column) order; on disk NIfTI stores the column axis fastest,
so a C-contiguous (S, R, C) array maps 1:1 onto the voxel payload.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: "<u1",
    4: "<i2",
    8: "<i4",
    16: "<f4",
    64: "<f8",
    256: "<i1",
    512: "<u2",
    768: "<u4",
}


class NiftiError(IOError):
    """Raised for malformed or unsupported NIfTI files."""


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float], tuple[float, float, float]]:
    """Read a NIfTI-1 file.

    Returns (data, spacing, origin) with data float32 in (slice, row, column)
    order, spacing/origin in mm ordered the same way.
    """
    path = Path(path)
    try:
        with _open_maybe_gzip(path) as f:
            raw = f.read()
    except (OSError, EOFError) as e:
        raise NiftiError(f"cannot read {path}: {e}") from e

    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes)")

    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    swap = False
    if sizeof_hdr != HEADER_SIZE:
        sizeof_hdr = struct.unpack_from(">i", raw, 0)[0]
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError(f"{path}: not a NIfTI-1 file (sizeof_hdr)")
        swap = True
    end = ">" if swap else "<"

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiError(f"{path}: detached .hdr/.img pairs are not supported")

    dim = struct.unpack_from(f"{end}8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise NiftiError(f"{path}: only 3-D volumes are supported, dim={dim[: ndim + 1]}")
    nx, ny, nz = dim[1], max(dim[2], 1), max(dim[3], 1)
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise NiftiError(f"{path}: non-positive dimensions {dim[1:4]}")

    datatype = struct.unpack_from(f"{end}h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype])
    if swap:
        dtype = dtype.newbyteorder(">")

    pixdim = struct.unpack_from(f"{end}8f", raw, 76)
    vox_offset = int(struct.unpack_from(f"{end}f", raw, 108)[0])
    scl_slope, scl_inter = struct.unpack_from(f"{end}2f", raw, 112)
    sform_code = struct.unpack_from(f"{end}h", raw, 254)[0]
    srow = np.array(struct.unpack_from(f"{end}12f", raw, 280), dtype=np.float64).reshape(3, 4)
    qoffset = struct.unpack_from(f"{end}3f", raw, 268)

    n_vox = nx * ny * nz
    payload = raw[vox_offset : vox_offset + n_vox * dtype.itemsize]
    if len(payload) != n_vox * dtype.itemsize:
        raise NiftiError(f"{path}: truncated voxel payload")
    # x varies fastest on disk: reshape to (z, y, x) = (slice, row, column).
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
        data = data * scl_slope + scl_inter

    spacing = (float(abs(pixdim[3])) or 1.0, float(abs(pixdim[2])) or 1.0, float(abs(pixdim[1])) or 1.0)
    if sform_code > 0:
        origin = (float(srow[2, 3]), float(srow[1, 3]), float(srow[0, 3]))
    else:
        origin = (float(qoffset[2]), float(qoffset[1]), float(qoffset[0]))
    return data, spacing, origin


def write_nifti(path, data: np.ndarray, spacing, origin=(0.0, 0.0, 0.0)) -> None:
    """Write float32 data in (slice, row, column) order as single-file NIfTI-1.

    Geometry is written axis-aligned (sform code 1, diagonal scaling).
    Files ending in .gz are gzip-compressed.
    """
    path = Path(path)
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3:
        raise NiftiError(f"expected 3-D data, got shape {data.shape}")
    nz, ny, nx = data.shape
    sz, sy, sx = (float(s) for s in spacing)
    oz, oy, ox = (float(o) for o in origin)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[39] = ord("r")  # dim_info unused, keep regular flag convention
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope/inter
    struct.pack_into("<h", hdr, 252, 0)  # qform_code
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<3f", hdr, 268, ox, oy, oz)  # qoffset kept in sync
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = MAGIC

    blob = bytes(hdr) + b"\x00" * 4 + data.tobytes()
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(blob)
