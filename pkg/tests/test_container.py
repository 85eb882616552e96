import struct

import numpy as np
import pytest

from csrep import container
from csrep.container import BadMagicError, PayloadMismatchError, TruncatedPayloadError, VersionMismatchError
from csrep.graph import forward_frames
from csrep.reptdnn import build_rep_tdnn
from csrep.transform import TransformOptions, csrep_transform

from conftest import SMALL


@pytest.fixture
def model():
    return build_rep_tdnn(SMALL)


def test_round_trip_bitwise(tmp_path, model):
    path = tmp_path / "m.csrp"
    container.save(model, path)
    loaded = container.load(path)
    assert container.to_bytes(loaded) == path.read_bytes()
    x = np.random.default_rng(0).standard_normal((1, SMALL.input_channels, 9)).astype("float32")
    np.testing.assert_array_equal(forward_frames(loaded, x), forward_frames(model, x))
    assert loaded.dtype == model.dtype and loaded.seed == model.seed and loaded.name == model.name


@pytest.mark.parametrize("stop", [1, 2, 3, 4])
def test_round_trip_transformed(model, stop):
    plain, _ = csrep_transform(model, TransformOptions(stop_after=stop))
    raw = container.to_bytes(plain)
    assert container.to_bytes(container.from_bytes(raw)) == raw


def test_header_layout(model):
    raw = container.to_bytes(model)
    assert raw[:4] == bytes([0x43, 0x53, 0x52, 0x50])
    version, length = struct.unpack_from("<IQ", raw, 4)
    assert version == 1
    topo = raw[16:16 + length].decode("utf-8")
    assert '"kind":"branch_group"' in topo


def test_deterministic_bytes():
    assert container.to_bytes(build_rep_tdnn(SMALL)) == container.to_bytes(build_rep_tdnn(SMALL))


def test_bad_magic(model):
    raw = bytearray(container.to_bytes(model))
    raw[0:4] = b"XXXX"
    with pytest.raises(BadMagicError, match="bad magic"):
        container.from_bytes(bytes(raw))


def test_version_mismatch(model):
    raw = bytearray(container.to_bytes(model))
    struct.pack_into("<I", raw, 4, 2)
    with pytest.raises(VersionMismatchError):
        container.from_bytes(bytes(raw))


def test_truncated_payload(model):
    raw = container.to_bytes(model)
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        container.from_bytes(raw[:-10])


def test_truncated_header():
    with pytest.raises(TruncatedPayloadError):
        container.from_bytes(b"CSRP\x01")


def test_trailing_bytes(model):
    with pytest.raises(PayloadMismatchError):
        container.from_bytes(container.to_bytes(model) + b"\x00" * 8)


def test_offsets_must_be_contiguous(model):
    raw = container.to_bytes(model)
    (length,) = struct.unpack_from("<Q", raw, 8)
    topo = raw[16:16 + length].replace(b'"offset":0,', b'"offset":4,', 1)
    assert len(topo) == length
    with pytest.raises(PayloadMismatchError):
        container.from_bytes(raw[:16] + topo + raw[16 + length:])


def test_fp64_payload_width():
    from dataclasses import replace
    m32 = build_rep_tdnn(SMALL)
    m64 = build_rep_tdnn(replace(SMALL, dtype="float64"))
    n32 = len(container.to_bytes(m32))
    n64 = len(container.to_bytes(m64))
    assert n64 > n32
