import struct

import numpy as np
import pytest

from core.checkpoint import MAGIC, Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from core.config import preset
from core.errors import CheckpointError, CheckpointVersionError
from core.model import init_params

MODEL, _ = preset("tiny")


def _ckpt():
    store = init_params(MODEL)
    return Checkpoint(MODEL, store.snapshot(), {"epochs": 2, "seed": 1, "final_loss": 1.25})


def test_save_load_save_is_byte_identical(tmp_path):
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(_ckpt(), first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_round_trip_preserves_parameters_and_config(tmp_path):
    ckpt = _ckpt()
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.config == ckpt.config
    assert back.metadata == ckpt.metadata
    assert sorted(back.params) == sorted(ckpt.params)
    for name, array in ckpt.params.items():
        assert back.params[name].shape == array.shape
        np.testing.assert_array_equal(back.params[name], array)


def test_header_layout():
    data = to_bytes(_ckpt())
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == 1
    (text_len,) = struct.unpack("<I", data[8:12])
    text = data[12:12 + text_len].decode()
    assert "split=2\n" in text and "sigma2=1.0\n" in text


def test_bad_magic_and_version():
    data = to_bytes(_ckpt())
    with pytest.raises(CheckpointVersionError):
        from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointVersionError):
        from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])


def test_truncated_file():
    data = to_bytes(_ckpt())
    with pytest.raises(CheckpointError):
        from_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        from_bytes(data + b"\0")


def test_unknown_parameter_name():
    data = to_bytes(_ckpt())
    with pytest.raises(CheckpointError):
        from_bytes(data.replace(b"fusion.W", b"fusion.X"))
    ckpt = _ckpt()
    ckpt.params["extra"] = np.zeros(2)
    with pytest.raises(CheckpointError):
        to_bytes(ckpt)


def test_config_hash_mismatch():
    data = to_bytes(_ckpt())
    with pytest.raises(CheckpointError) as err:
        from_bytes(data.replace(b"sigma2=1.0", b"sigma2=2.0"))
    assert "hash" in str(err.value)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")
