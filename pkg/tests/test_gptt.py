"""GPTT tensor file format: bit-exact round trips and diagnostics."""

import struct

import numpy as np
import pytest

from vstain import gptt
from vstain.errors import DataError


@pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 4), (2, 3, 4, 5)])
def test_round_trip_bit_exact(shape, tmp_path):
    arr = np.random.default_rng(7).normal(size=shape).astype(np.float32)
    path = tmp_path / "t.gptt"
    gptt.save_gptt(path, arr)
    back = gptt.load_gptt(path)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_header_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    raw = gptt.write_gptt_bytes(arr)
    assert raw[:4] == b"GPTT"
    version, rank = struct.unpack_from("<BB", raw, 4)
    assert (version, rank) == (1, 2)
    assert struct.unpack_from("<2I", raw, 6) == (2, 3)
    assert np.frombuffer(raw, dtype="<f4", offset=14).tolist() == arr.reshape(-1).tolist()


def test_bad_magic_reports_offset():
    with pytest.raises(DataError, match="byte 0"):
        gptt.read_gptt_bytes(b"NOPE" + bytes(16))


def test_truncated_payload_reports_offset():
    raw = gptt.write_gptt_bytes(np.zeros((2, 2), np.float32))
    with pytest.raises(DataError, match="byte"):
        gptt.read_gptt_bytes(raw[:-3])


def test_unsupported_version():
    raw = bytearray(gptt.write_gptt_bytes(np.zeros(2, np.float32)))
    raw[4] = 9
    with pytest.raises(DataError, match="version"):
        gptt.read_gptt_bytes(bytes(raw))


def test_write_is_deterministic(tmp_path):
    arr = np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32)
    a, b = tmp_path / "a.gptt", tmp_path / "b.gptt"
    gptt.save_gptt(a, arr)
    gptt.save_gptt(b, arr)
    assert a.read_bytes() == b.read_bytes()
