import json
import struct

import numpy as np
import pytest

from spectralbp.autodiff import ParameterStore
from spectralbp.checkpoint import MAGIC, VERSION, CheckpointError, load_checkpoint, save_checkpoint
from spectralbp.linalg import Rng
from spectralbp.models import ResidualFlow, model_from_config


def store():
    r = Rng(0)
    return ParameterStore({"a": r.split(0).normal((3, 2)), "b": r.split(1).normal(4), "c": np.array(2.5)})


def test_round_trip_exact(tmp_path):
    s = store()
    path = save_checkpoint(tmp_path / "x.ckpt", s, {"epoch": 3, "note": "hi"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 3, "note": "hi"}
    assert loaded.names() == s.names()
    for name in s:
        assert loaded[name].shape == s[name].shape
        np.testing.assert_array_equal(loaded[name], s[name])
    assert not (tmp_path / "x.ckpt.tmp").exists()


def test_header_layout(tmp_path):
    s = store()
    raw = save_checkpoint(tmp_path / "x.ckpt", s).read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", raw[8:20])
    assert version == VERSION == 1
    header = json.loads(raw[20:20 + hlen])
    assert [t["offset"] for t in header["tensors"]] == [0, 6, 10]
    assert [t["shape"] for t in header["tensors"]] == [[3, 2], [4], []]
    data = np.frombuffer(raw[20 + hlen:], dtype="<f8")
    np.testing.assert_array_equal(data, s.flatten())


def test_identical_bytes_for_identical_input(tmp_path):
    a = save_checkpoint(tmp_path / "a.ckpt", store(), {"k": 1}).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", store(), {"k": 1}).read_bytes()
    assert a == b


def test_model_round_trip(tmp_path):
    m = ResidualFlow.init(Rng(1))
    save_checkpoint(tmp_path / "m.ckpt", m.params, {"model": m.config()})
    params, meta = load_checkpoint(tmp_path / "m.ckpt")
    m2 = model_from_config(meta["model"], params)
    assert m2.config() == m.config()
    z = Rng(2).normal((2, 5))
    np.testing.assert_array_equal(m2(z), m(z))


def test_bad_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
    raw = save_checkpoint(tmp_path / "x.ckpt", store()).read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
