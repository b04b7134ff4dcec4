import json
import struct
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from graphfuse import DataError, gtn


def test_header_layout():
    buf = gtn.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"GTN1"
    assert struct.unpack("<I", buf[4:8]) == (2,)
    assert struct.unpack("<2I", buf[8:16]) == (2, 3)
    assert np.frombuffer(buf[16:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=5, min_side=0, max_side=4),
                  elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_is_bit_exact(arr):
    out = gtn.decode(gtn.encode(arr))
    assert out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_bad_magic_and_truncation():
    with pytest.raises(DataError):
        gtn.decode(b"XXXX" + bytes(8))
    buf = gtn.encode(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(DataError):
        gtn.decode(buf[:-1])


def test_file_and_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4)).astype(np.float32)
    gtn.save(tmp_path / "a.gtn", a)
    assert gtn.load(tmp_path / "a.gtn").tobytes() == a.tobytes()

    tensors = {"w": a, "b.bias": rng.standard_normal(5).astype(np.float32)}
    gtn.save_archive(tmp_path / "ck.zip", tensors, {"epoch": 3})
    back, manifest = gtn.load_archive(tmp_path / "ck.zip")
    assert manifest == {"epoch": 3}
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    with zipfile.ZipFile(tmp_path / "ck.zip") as zf:
        assert json.loads(zf.read("manifest.json")) == {"epoch": 3}


def test_archive_bytes_are_deterministic(tmp_path):
    t = {"x": np.ones(3, dtype=np.float32)}
    gtn.save_archive(tmp_path / "1.zip", t, {"k": 1})
    gtn.save_archive(tmp_path / "2.zip", t, {"k": 1})
    assert (tmp_path / "1.zip").read_bytes() == (tmp_path / "2.zip").read_bytes()
