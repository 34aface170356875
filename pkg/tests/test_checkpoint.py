import numpy as np
import pytest

from conftest import tiny_params
from fanet.checkpoint import (
    MAGIC,
    BadMagicError,
    CheckpointError,
    CrcError,
    TruncatedError,
    VersionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore_params,
    save_checkpoint,
)


def test_model_roundtrip_bitwise(tmp_path):
    p = tiny_params(seed=9)
    save_checkpoint(tmp_path / "c.fant", p)
    arrays = load_checkpoint(tmp_path / "c.fant")
    assert list(arrays) == list(p.tensors)
    for name, t in p.tensors.items():
        assert arrays[name].tobytes() == t.data.astype("<f4").tobytes(), name

    q = tiny_params(seed=10)
    restore_params(q, arrays)
    for name in p.tensors:
        assert q.tensors[name].data.tobytes() == p.tensors[name].data.tobytes()


def test_layout_of_small_file():
    buf = encode_checkpoint({"w": np.array([[1.0, 2.0]], np.float32)})
    assert buf[:4] == MAGIC
    assert buf[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    body = buf[12:-4]
    assert body == (
        (1).to_bytes(4, "little") + b"w" + (2).to_bytes(4, "little")
        + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.0, 2.0], "<f4").tobytes()
    )


def test_scalar_and_unicode_names():
    arrays = decode_checkpoint(encode_checkpoint({"é.scale": np.array(3.5), "v": np.arange(3.0)}))
    assert arrays["é.scale"].shape == () and arrays["é.scale"] == 3.5
    np.testing.assert_array_equal(arrays["v"], [0, 1, 2])


def test_empty_checkpoint(tmp_path):
    save_checkpoint(tmp_path / "e.fant", {})
    assert load_checkpoint(tmp_path / "e.fant") == {}


def test_flipped_payload_byte_is_crc_error():
    buf = bytearray(encode_checkpoint(tiny_params().tensors))
    buf[len(buf) // 2] ^= 0x01
    with pytest.raises(CrcError):
        decode_checkpoint(bytes(buf))


def test_flipped_crc_is_crc_error():
    buf = bytearray(encode_checkpoint({"w": np.ones(4, np.float32)}))
    buf[-1] ^= 0xFF
    with pytest.raises(CrcError):
        decode_checkpoint(bytes(buf))


def test_distinct_errors():
    good = encode_checkpoint({"w": np.ones(4, np.float32)})
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"FANX" + good[4:])
    with pytest.raises(VersionError):
        decode_checkpoint(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(TruncatedError):
        decode_checkpoint(good[:-9])
    with pytest.raises(TruncatedError):
        decode_checkpoint(good[:8])
    for cls in (BadMagicError, VersionError, CrcError, TruncatedError):
        assert issubclass(cls, CheckpointError)


def test_restore_rejects_mismatch():
    p = tiny_params()
    arrays = {k: v.data.copy() for k, v in p.tensors.items()}
    arrays.pop(next(iter(arrays)))
    with pytest.raises(CheckpointError, match="missing"):
        restore_params(p, arrays)
    arrays = {k: v.data.copy() for k, v in p.tensors.items()}
    name = "tem.head.bias"
    arrays[name] = np.zeros(arrays[name].size + 1, np.float32)
    with pytest.raises(CheckpointError, match="shape"):
        restore_params(p, arrays)


def test_no_temp_file_left(tmp_path):
    save_checkpoint(tmp_path / "c.fant", {"a": np.zeros(2)})
    assert sorted(x.name for x in tmp_path.iterdir()) == ["c.fant"]
