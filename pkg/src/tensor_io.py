"""ULMT binary tensor container.

Layout: b"ULMT", u8 version (1), u8 dtype code, u8 ndim, ndim x u64 extents,
then the row-major little-endian payload. Complex values are stored as
interleaved (real, imag) pairs.
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from src.exceptions import DomainError, ShapeMismatchError

logger = logging.getLogger(__name__)

MAGIC = b"ULMT"
VERSION = 1

REAL64 = 0
COMPLEX64 = 1
COMPLEX128 = 2

_DTYPES = {
    REAL64: np.dtype("<f8"),
    COMPLEX64: np.dtype("<c8"),
    COMPLEX128: np.dtype("<c16"),
}


def _dtype_code(array: np.ndarray, dtype: Union[int, None]) -> int:
    if dtype is not None:
        if dtype not in _DTYPES:
            raise DomainError(f"unknown ULMT dtype code {dtype}")
        return dtype
    if np.iscomplexobj(array):
        return COMPLEX64 if array.dtype == np.complex64 else COMPLEX128
    return REAL64


def encode_tensor(array: np.ndarray, dtype: Union[int, None] = None) -> bytes:
    """Serialize an array to ULMT bytes.

    Args:
        array: Real or complex array of any rank (up to 255)
        dtype: Explicit dtype code; inferred from the array when None

    Returns:
        bytes: Encoded tensor

    Raises:
        DomainError: If the array holds non-finite values or a real dtype is
            requested for complex data
    """
    array = np.asarray(array)
    code = _dtype_code(array, dtype)
    if code == REAL64 and np.iscomplexobj(array):
        raise DomainError("cannot store complex data as real64")
    if array.ndim > 255:
        raise ShapeMismatchError(f"ULMT supports at most 255 dimensions, got {array.ndim}")
    if not np.all(np.isfinite(array)):
        raise DomainError("ULMT tensors must be finite")
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buffer: bytes) -> np.ndarray:
    if len(buffer) < 7 or buffer[:4] != MAGIC:
        raise DomainError("not a ULMT tensor (bad magic)")
    version, code, ndim = struct.unpack_from("<BBB", buffer, 4)
    if version != VERSION:
        raise DomainError(f"unsupported ULMT version {version}")
    if code not in _DTYPES:
        raise DomainError(f"unknown ULMT dtype code {code}")
    offset = 7 + 8 * ndim
    if len(buffer) < offset:
        raise DomainError("truncated ULMT header")
    shape = struct.unpack_from(f"<{ndim}Q", buffer, 7)
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buffer) - offset != expected:
        raise ShapeMismatchError(
            f"ULMT payload is {len(buffer) - offset} bytes, extents {shape} need {expected}"
        )
    return np.frombuffer(buffer, dtype=dtype, offset=offset).reshape(shape).copy()


def write_tensor(path: Union[str, Path], array: np.ndarray, dtype: Union[int, None] = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensor(array, dtype))
    except OSError as e:
        logger.error(f"Failed to write tensor {path}: {e}")
        raise
    return path


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        return decode_tensor(path.read_bytes())
    except OSError as e:
        logger.error(f"Failed to read tensor {path}: {e}")
        raise
