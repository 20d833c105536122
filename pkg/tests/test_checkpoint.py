import struct

import numpy as np
import pytest

from calr.checkpoint import MAGIC, decode_model, encode_model, load_model, save_model
from calr.compress import build_calr_model
from calr.exceptions import CheckpointError, MagicMismatchError, TruncatedTensorError, VersionMismatchError
from calr.model import forward


def test_round_trip_dense(tiny_model, tmp_path, rng):
    path = save_model(tiny_model, tmp_path / "m.calr")
    loaded = load_model(path)
    ids = rng.integers(0, 256, size=(2, 8))
    assert np.array_equal(forward(loaded, ids), forward(tiny_model.rounded_to_float32(), ids))
    assert encode_model(loaded) == path.read_bytes()


@pytest.mark.parametrize("kind, qkv", [("dense", False), ("sparse", False), ("dense", True)])
def test_round_trip_compressed(tiny_model, rng, kind, qkv):
    calib = rng.integers(0, 256, size=(4, 16))
    comp, _ = build_calr_model(tiny_model, calib, 2, 4, 4, corrective_kind=kind, include_qkv=qkv)
    for p in comp.named_parameters().values():
        p.data = p.data + (0.01 if p.mask is None else 0.01 * p.mask)
    loaded = decode_model(encode_model(comp))
    assert loaded.layout() == comp.layout()
    ids = rng.integers(0, 256, size=(2, 8))
    assert np.array_equal(forward(loaded, ids), forward(comp.rounded_to_float32(), ids))
    assert encode_model(loaded) == encode_model(comp.rounded_to_float32())


def test_bad_magic(tiny_model):
    buf = bytearray(encode_model(tiny_model))
    buf[:4] = b"XXXX"
    with pytest.raises(MagicMismatchError):
        decode_model(bytes(buf))


def test_bad_version(tiny_model):
    buf = bytearray(encode_model(tiny_model))
    buf[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatchError):
        decode_model(bytes(buf))


def test_truncation_names_tensor(tiny_model):
    buf = encode_model(tiny_model)
    with pytest.raises(TruncatedTensorError, match="final_norm") as err:
        decode_model(buf[:-4])
    assert err.value.tensor_name == "final_norm"


def test_errors_are_distinct():
    assert not issubclass(MagicMismatchError, VersionMismatchError)
    assert not issubclass(TruncatedTensorError, MagicMismatchError)


def test_header_starts_with_magic(tiny_model):
    assert encode_model(tiny_model)[:4] == MAGIC


def test_trailing_bytes_rejected(tiny_model):
    with pytest.raises(CheckpointError, match="trailing"):
        decode_model(encode_model(tiny_model) + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="nope"):
        load_model(tmp_path / "nope.calr")
