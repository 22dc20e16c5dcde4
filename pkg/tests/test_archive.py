import struct

import numpy as np
import pytest

from sowa.archive import ALIGNMENT, archive_read, archive_write
from sowa.errors import (
    ArchiveChecksumError,
    ArchiveError,
    ArchiveNameError,
    ArchiveVersionError,
    UsageError,
)


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return {
        "alpha": rng.normal(size=(3, 4)).astype(np.float32),
        "beta.bias": rng.normal(size=(7,)).astype(np.float32),
        "gamma": rng.normal(size=(2, 2, 2)).astype(np.float32),
    }


def test_round_trip_bit_exact(tmp_path, tensors):
    path = tmp_path / "weights.sowa"
    archive_write(path, tensors)
    loaded = archive_read(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])
        assert loaded[name].dtype == np.float32


def test_write_is_deterministic(tmp_path, tensors):
    p1, p2 = tmp_path / "a.sowa", tmp_path / "b.sowa"
    archive_write(p1, tensors)
    archive_write(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_archive_valid(tmp_path):
    path = tmp_path / "empty.sowa"
    archive_write(path, {})
    assert archive_read(path) == {}


def test_scalar_stored_as_length_one(tmp_path):
    path = tmp_path / "s.sowa"
    archive_write(path, {"s": np.float32(4.25)})
    out = archive_read(path)
    assert out["s"].shape == (1,) and float(out["s"][0]) == 4.25


def test_payload_alignment(tmp_path, tensors):
    path = tmp_path / "a.sowa"
    archive_write(path, tensors)
    blob = path.read_bytes()
    # walk the header like the reader does to find absolute payload offsets
    pos = 4
    version, count = struct.unpack_from("<HI", blob, pos)
    pos += 6
    offsets = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2 + nlen
        _, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2 + 4 * rank
        (off,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        offsets.append(off)
    payload_start = (pos + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT
    assert payload_start % ALIGNMENT == 0
    assert all((payload_start + off) % ALIGNMENT == 0 for off in offsets)


def test_corrupted_magic(tmp_path, tensors):
    path = tmp_path / "a.sowa"
    archive_write(path, tensors)
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(bytes(blob))
    with pytest.raises(ArchiveError):
        archive_read(path)


def test_flipped_payload_byte_fails_checksum(tmp_path, tensors):
    path = tmp_path / "a.sowa"
    archive_write(path, tensors)
    blob = bytearray(path.read_bytes())
    blob[-10] ^= 0xFF  # inside the last tensor's payload
    path.write_bytes(bytes(blob))
    with pytest.raises(ArchiveChecksumError):
        archive_read(path)


def test_version_mismatch(tmp_path, tensors):
    path = tmp_path / "a.sowa"
    archive_write(path, tensors)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<H", blob, 4, 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(ArchiveVersionError):
        archive_read(path)


def test_truncated_file(tmp_path, tensors):
    path = tmp_path / "a.sowa"
    archive_write(path, tensors)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ArchiveError):
        archive_read(path)


def test_non_finite_rejected(tmp_path):
    with pytest.raises(UsageError):
        archive_write(tmp_path / "bad.sowa", {"x": np.array([np.nan], dtype=np.float32)})


def test_duplicate_names_on_read(tmp_path):
    # hand-build an archive whose table repeats one name
    name = b"dup"
    entry = struct.pack("<H", len(name)) + name + struct.pack("<BB", 0, 1)
    entry += struct.pack("<1I", 1) + struct.pack("<Q", 0)
    header = b"SOWA" + struct.pack("<HI", 1, 2) + entry + entry
    payload_start = (len(header) + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT
    payload = struct.pack("<f", 1.0).ljust(ALIGNMENT, b"\x00")
    import zlib

    blob = header + b"\x00" * (payload_start - len(header)) + payload
    blob += struct.pack("<I", zlib.crc32(payload))
    path = tmp_path / "dup.sowa"
    path.write_bytes(blob)
    with pytest.raises(ArchiveNameError):
        archive_read(path)


def test_float64_input_stored_as_float32(tmp_path):
    path = tmp_path / "f64.sowa"
    archive_write(path, {"x": np.array([1.0, 2.0], dtype=np.float64)})
    assert archive_read(path)["x"].dtype == np.float32
