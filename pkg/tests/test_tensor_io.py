import struct

import numpy as np
import pytest

from src.exceptions import DomainError, ShapeMismatchError
from src.tensor_io import (COMPLEX64, COMPLEX128, MAGIC, REAL64, decode_tensor, encode_tensor, read_tensor,
                           write_tensor)


def test_header_layout():
    buffer = encode_tensor(np.zeros((2, 3)))
    assert buffer[:4] == MAGIC
    assert struct.unpack_from("<BBB", buffer, 4) == (1, REAL64, 2)
    assert struct.unpack_from("<2Q", buffer, 7) == (2, 3)
    assert len(buffer) == 7 + 16 + 6 * 8


def test_complex_payload_is_interleaved():
    buffer = encode_tensor(np.array([1 + 2j, 3 - 4j]), COMPLEX128)
    payload = np.frombuffer(buffer[7 + 8:], dtype="<f8")
    np.testing.assert_array_equal(payload, [1, 2, 3, -4])


@pytest.mark.parametrize("array", [
    np.arange(24.0).reshape(2, 3, 4),
    (np.arange(6) + 1j * np.arange(6)[::-1]).reshape(3, 2),
    np.ones((1, 1, 1, 5), dtype=np.complex64),
])
def test_decode_returns_original(array):
    back = decode_tensor(encode_tensor(array))
    assert back.shape == array.shape
    assert back.dtype == np.dtype(array.dtype).newbyteorder("<")
    np.testing.assert_array_equal(back, array)


def test_complex64_code_is_inferred():
    buffer = encode_tensor(np.zeros(3, dtype=np.complex64))
    assert buffer[5] == COMPLEX64


def test_file_round_trip(tmp_path, rng):
    data = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    path = write_tensor(tmp_path / "nested" / "x.ulmt", data)
    np.testing.assert_array_equal(read_tensor(path), data)


def test_rejects_non_finite():
    with pytest.raises(DomainError):
        encode_tensor(np.array([1.0, np.inf]))


def test_rejects_complex_as_real():
    with pytest.raises(DomainError):
        encode_tensor(np.array([1j]), REAL64)


def test_rejects_bad_magic():
    buffer = bytearray(encode_tensor(np.zeros(2)))
    buffer[:4] = b"NOPE"
    with pytest.raises(DomainError):
        decode_tensor(bytes(buffer))


def test_rejects_unknown_version_and_dtype():
    buffer = bytearray(encode_tensor(np.zeros(2)))
    buffer[4] = 9
    with pytest.raises(DomainError):
        decode_tensor(bytes(buffer))
    buffer[4] = 1
    buffer[5] = 7
    with pytest.raises(DomainError):
        decode_tensor(bytes(buffer))


def test_rejects_payload_size_mismatch():
    buffer = encode_tensor(np.zeros((2, 2)))
    with pytest.raises(ShapeMismatchError):
        decode_tensor(buffer[:-8])
    with pytest.raises(ShapeMismatchError):
        decode_tensor(buffer + b"\x00" * 8)
