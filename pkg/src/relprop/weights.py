"""Reader and writer for the LRPW binary tensor container.

Layout (all integers little-endian):

==========  =====================================================
bytes       meaning
==========  =====================================================
4           magic ``LRPW``
u32         container version (currently 1)
u32         tensor count
per tensor  u16 name length, UTF-8 name, u8 ndim, ndim * u32
            dims, u8 element type (0 = float32), raw row-major
            element bytes
u32         CRC32 (zlib) of every preceding byte
==========  =====================================================

The writer preserves mapping order, so a write/read round trip returns
tensors in the same sequence. The reader streams the file with a running
checksum, so even very large containers never need more than one tensor's
worth of scratch memory.
"""

from __future__ import annotations

import io
import struct
import zlib
from typing import BinaryIO, Mapping

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    TruncatedFileError,
    UnsupportedDtypeError,
    VersionMismatchError,
    WeightFormatError,
)

MAGIC = b"LRPW"
VERSION = 1
DTYPE_F32 = 0

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")


def _emit(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    """Write the container to ``fh``, keeping a running CRC32."""
    crc = 0

    def put(chunk: bytes) -> None:
        nonlocal crc
        fh.write(chunk)
        crc = zlib.crc32(chunk, crc)

    put(MAGIC)
    put(_U32.pack(VERSION))
    put(_U32.pack(len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            raise UnsupportedDtypeError(
                f"tensor {name!r} has dtype {arr.dtype}; only float32 is storable"
            )
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise WeightFormatError(f"tensor name is too long ({len(encoded)} bytes)")
        put(_U16.pack(len(encoded)))
        put(encoded)
        if arr.ndim > 0xFF:
            raise WeightFormatError(f"tensor {name!r} has too many dimensions")
        put(_U8.pack(arr.ndim))
        for dim in arr.shape:
            put(_U32.pack(dim))
        put(_U8.pack(DTYPE_F32))
        put(arr.astype("<f4", copy=False).tobytes())
    fh.write(_U32.pack(crc))


def weights_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize ``tensors`` and return the complete container as bytes."""
    buf = io.BytesIO()
    _emit(buf, tensors)
    return buf.getvalue()


def write_weights(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Serialize ``tensors`` to ``path`` in mapping order."""
    with open(path, "wb") as fh:
        _emit(fh, tensors)


class _Parser:
    """Sequential reader that tracks a running CRC32 over consumed bytes."""

    def __init__(self, fh: BinaryIO):
        self.fh = fh
        self.crc = 0

    def take(self, n: int, what: str) -> bytearray:
        buf = bytearray(n)
        got = self.fh.readinto(buf)
        if got != n:
            raise TruncatedFileError(
                f"file ended inside {what} (wanted {n} bytes, got {got})"
            )
        self.crc = zlib.crc32(buf, self.crc)
        return buf

    def u8(self, what: str) -> int:
        return _U8.unpack(self.take(1, what))[0]

    def u16(self, what: str) -> int:
        return _U16.unpack(self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def read_weights_from(fh: BinaryIO) -> dict[str, np.ndarray]:
    """Parse an LRPW container from an open binary file."""
    head = fh.read(len(MAGIC))
    if head != MAGIC:
        raise BadMagicError(
            f"not a weight container (leading bytes {head!r}, expected {MAGIC!r})"
        )
    parser = _Parser(fh)
    parser.crc = zlib.crc32(head)

    version = parser.u32("version field")
    if version != VERSION:
        raise VersionMismatchError(
            f"container version {version} is not supported (reader handles {VERSION})"
        )
    count = parser.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for index in range(count):
        name_len = parser.u16(f"name length of tensor {index}")
        raw_name = parser.take(name_len, f"name of tensor {index}")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"tensor {index} name is not UTF-8") from exc
        if name in tensors:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        ndim = parser.u8(f"rank of tensor {name!r}")
        dims = tuple(
            parser.u32(f"dimension {d} of tensor {name!r}") for d in range(ndim)
        )
        dtype_code = parser.u8(f"element type of tensor {name!r}")
        if dtype_code != DTYPE_F32:
            raise UnsupportedDtypeError(
                f"tensor {name!r} declares element type {dtype_code}; only 0 (float32)"
                " is supported"
            )
        n_elements = 1
        for dim in dims:
            n_elements *= dim
        raw = parser.take(4 * n_elements, f"data of tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)

    expected = parser.crc
    stored_bytes = fh.read(4)
    if len(stored_bytes) != 4:
        raise TruncatedFileError("file ended inside the trailing checksum")
    stored = _U32.unpack(stored_bytes)[0]
    if stored != expected:
        raise ChecksumError(
            f"checksum mismatch: stored {stored:#010x}, computed {expected:#010x}"
        )
    trailing = fh.read(1)
    if trailing:
        raise TruncatedFileError("file continues past the trailing checksum")
    return tensors


def read_weights(path) -> dict[str, np.ndarray]:
    """Read an LRPW container from ``path``.

    Returns a name-to-array mapping in file order. The arrays are float32
    and writable (each owns its buffer). Raises a distinct
    :class:`~relprop.errors.WeightFormatError` subclass for each failure
    mode: wrong leading bytes, unsupported version, short or overlong
    files, checksum mismatch, and unknown element types.
    """
    with open(path, "rb") as fh:
        return read_weights_from(fh)
