"""Round-trip and layout checks for the PFW1 weight container."""

import struct

import numpy as np
import pytest

from patchfuse.weights_io import load_weights, save_weights


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "embed.proj": rng.normal(size=(12, 8)),
        "embed.cls": rng.normal(size=(1, 1, 8)),
        "head.b": np.array([np.pi, -0.0, np.nextafter(1.0, 2.0)]),
        "scalar": np.array(3.5),
    }
    path = tmp_path / "w.pfw"
    save_weights(path, tensors)
    loaded = load_weights(path)
    assert list(loaded) == list(tensors)
    for name, original in tensors.items():
        got = loaded[name]
        assert got.shape == original.shape
        assert got.tobytes() == np.asarray(original, dtype=np.float64).tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "w.pfw"
    save_weights(path, {"ab": np.array([1.0, 2.0])})
    blob = path.read_bytes()
    assert blob[:4] == b"PFW1"
    version, count = struct.unpack_from("<HI", blob, 4)
    assert (version, count) == (1, 1)
    (name_len,) = struct.unpack_from("<H", blob, 10)
    assert name_len == 2
    assert blob[12:14] == b"ab"
    assert blob[14] == 1  # rank
    (dim,) = struct.unpack_from("<I", blob, 15)
    assert dim == 2
    assert np.frombuffer(blob, dtype="<f8", count=2, offset=19).tolist() == [1.0, 2.0]


def test_non_utf8_safe_names_roundtrip(tmp_path):
    path = tmp_path / "w.pfw"
    save_weights(path, {"enc0.ln1.γ": np.zeros((2, 2))})
    assert "enc0.ln1.γ" in load_weights(path)


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.pfw"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_weights(path)


def test_rejects_unknown_version(tmp_path):
    path = tmp_path / "bad.pfw"
    path.write_bytes(b"PFW1" + struct.pack("<HI", 9, 0))
    with pytest.raises(ValueError, match="version"):
        load_weights(path)


def test_empty_mapping_roundtrip(tmp_path):
    path = tmp_path / "empty.pfw"
    save_weights(path, {})
    assert load_weights(path) == {}
