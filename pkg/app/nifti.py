"""Minimal NIfTI-1 single-file codec plus a raw .npz container.

Only what BraTS files and phantoms need: 3-d, uint8 or float32, optionally gzipped.
"""

import gzip
import logging
import struct
from enum import IntEnum
from pathlib import Path

import numpy as np
import numpy.typing as npt

from app.runtime import BadMagicError, NiftiError, TruncatedPayloadError, UnsupportedDatatypeError

log = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\0"
GZIP_PREFIX = b"\x1f\x8b"

NIFTI_UNITS_MM = 2
NIFTI_UNITS_SEC = 8


# https://nifti.nimh.nih.gov/pub/dist/src/niftilib/nifti1.h
class Datatype(IntEnum):
    UINT8 = 2
    INT16 = 4
    INT32 = 8
    FLOAT32 = 16
    FLOAT64 = 64


supported = {
    Datatype.UINT8: np.dtype(np.uint8),
    Datatype.FLOAT32: np.dtype(np.float32),
}

datatype_of = {v: k for k, v in supported.items()}


class HeaderReader:
    """Walks the 348-byte header field by field, in file order"""

    def __init__(self, raw: bytes, path: Path | str):
        if len(raw) < HEADER_SIZE:
            raise TruncatedPayloadError(path, f"Header is {len(raw)} bytes, expected {HEADER_SIZE}")
        self.raw = raw
        self.path = path
        self.current = 0
        self.endian = self.detect_endian()

    def detect_endian(self):
        (little,) = struct.unpack_from("<i", self.raw, 0)
        if little == HEADER_SIZE:
            return "<"
        (big,) = struct.unpack_from(">i", self.raw, 0)
        if big == HEADER_SIZE:
            return ">"
        raise BadMagicError(self.path, f"sizeof_hdr is {little}, expected {HEADER_SIZE}")

    def pop(self, fmt: str):
        """The only way to move current"""
        values = struct.unpack_from(self.endian + fmt, self.raw, self.current)
        self.current += struct.calcsize(self.endian + fmt)
        return values

    def seek(self, offset: int):
        self.current = offset


class Header:
    def __init__(self, reader: HeaderReader):
        reader.seek(40)
        self.dim = reader.pop("8h")
        reader.seek(70)
        (self.datatype, self.bitpix) = reader.pop("2h")
        reader.seek(76)
        self.pixdim = reader.pop("8f")
        (self.vox_offset,) = reader.pop("f")
        reader.seek(344)
        (self.magic,) = reader.pop("4s")
        self.endian = reader.endian


def read_header(raw: bytes, path: Path | str):
    header = Header(HeaderReader(raw, path))
    if header.magic != MAGIC:
        raise BadMagicError(path, f"Magic is {header.magic!r}, expected {MAGIC!r}")
    try:
        datatype = Datatype(header.datatype)
    except ValueError:
        raise UnsupportedDatatypeError(path, header.datatype) from None
    if datatype not in supported:
        raise UnsupportedDatatypeError(path, int(datatype))
    if header.dim[0] < 3 or any(d > 1 for d in header.dim[4 : header.dim[0] + 1]):
        raise NiftiError(path, f"Only 3-d volumes are supported, dim is {header.dim}")
    if any(d < 1 for d in header.dim[1:4]):
        raise NiftiError(path, f"Dims must be positive, dim is {header.dim}")
    if header.vox_offset < HEADER_SIZE:
        raise NiftiError(path, f"vox_offset {header.vox_offset} points inside the {HEADER_SIZE}-byte header")
    return header


def read_bytes(path: Path | str) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_PREFIX:
        try:
            return gzip.decompress(raw)
        except (EOFError, gzip.BadGzipFile) as e:
            raise TruncatedPayloadError(path, f"Corrupt gzip stream: {e}") from e
    return raw


def decode(raw: bytes, path: Path | str = "<bytes>"):
    """Returns (grid, spacing). grid has shape (dim[1], dim[2], dim[3])"""
    header = read_header(raw, path)
    shape = tuple(int(d) for d in header.dim[1:4])
    dtype = supported[Datatype(header.datatype)].newbyteorder(header.endian)

    offset = int(header.vox_offset)
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = raw[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(path, f"Payload is {len(payload)} bytes, expected {expected}")

    grid = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    grid = np.ascontiguousarray(grid.astype(dtype.newbyteorder("=")))
    spacing = tuple(float(s) for s in header.pixdim[1:4])
    return grid, spacing


def encode(grid: npt.NDArray[np.generic], spacing: tuple[float, float, float]) -> bytes:
    """Little-endian NIfTI-1 with vox_offset 352"""
    try:
        datatype = datatype_of[grid.dtype]
    except KeyError:
        raise NiftiError("<encode>", f"Can't write dtype {grid.dtype}") from None

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *grid.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, grid.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 0.0, 0.0)  # scl_slope 0 means unscaled
    struct.pack_into("<B", hdr, 123, NIFTI_UNITS_MM | NIFTI_UNITS_SEC)
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    sx, sy, sz = spacing
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0)
    struct.pack_into("<4s", hdr, 344, MAGIC)

    payload = np.asarray(grid, dtype=grid.dtype.newbyteorder("<")).tobytes(order="F")
    return bytes(hdr) + payload


def write_bytes(raw: bytes, path: Path | str):
    path = Path(path)
    if path.suffix == ".gz":
        raw = gzip.compress(raw, mtime=0)  # mtime=0 keeps reruns byte-identical
    path.write_bytes(raw)
    log.debug("wrote %s (%d bytes)", path, len(raw))


def write_raw(grid: npt.NDArray[np.generic], spacing: tuple[float, ...], path: Path | str):
    with open(path, "wb") as f:
        np.savez_compressed(f, data=grid, spacing=np.asarray(spacing, dtype=np.float64))


def read_raw(path: Path | str):
    with np.load(path) as z:
        return z["data"], tuple(float(s) for s in z["spacing"])
