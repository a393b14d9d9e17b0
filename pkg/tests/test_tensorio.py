import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from blcf import tensorio
from blcf.errors import TensorFormatError, ValidationError


def test_round_trip_identity(tmp_path, rng):
    path = tmp_path / "t.blcf"
    arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
    tensorio.write_tensor(path, arr)
    back = tensorio.read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(arr, back)


def test_file_size_2x2x3(tmp_path):
    path = tmp_path / "t.blcf"
    tensorio.write_tensor(path, np.arange(12, dtype=np.float32).reshape(2, 2, 3))
    # 4 magic + 1 version + 4 ndim + 3*4 dims + 12*4 payload
    assert path.stat().st_size == 69


def test_file_size_1x1x1(tmp_path):
    path = tmp_path / "t.blcf"
    tensorio.write_tensor(path, np.zeros((1, 1, 1), dtype=np.float32))
    assert path.stat().st_size == 25


def test_header_layout_is_pinned(tmp_path):
    path = tmp_path / "t.blcf"
    tensorio.write_tensor(path, np.array([[1.5, -2.0]], dtype=np.float32))
    blob = path.read_bytes()
    assert blob[:4] == b"BLCF"
    assert blob[4] == 1
    assert struct.unpack_from("<I", blob, 5)[0] == 2
    assert struct.unpack_from("<2I", blob, 9) == (1, 2)
    assert np.frombuffer(blob[17:], dtype="<f4").tolist() == [1.5, -2.0]


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.blcf"
    path.write_bytes(b"XXXX" + bytes(30))
    with pytest.raises(TensorFormatError, match="not a BLCF tensor"):
        tensorio.read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.blcf"
    tensorio.write_tensor(path, np.zeros((2, 2, 3), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])  # drop one float: 11 of 12 remain
    with pytest.raises(TensorFormatError, match="truncated"):
        tensorio.read_tensor(path)


def test_non_finite_rejected_on_read(tmp_path):
    path = tmp_path / "t.blcf"
    tensorio.write_tensor(path, np.ones((2, 2), dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(blob))
    with pytest.raises(TensorFormatError, match="non-finite"):
        tensorio.read_tensor(path)


def test_non_finite_rejected_on_write(tmp_path):
    with pytest.raises(TensorFormatError, match="non-finite"):
        tensorio.write_tensor(tmp_path / "t.blcf", np.array([[np.inf, 0.0]]))


def test_bad_ndim_rejected(tmp_path):
    with pytest.raises(ValidationError):
        tensorio.write_tensor(tmp_path / "t.blcf", np.zeros(4, dtype=np.float32))


@settings(max_examples=30, deadline=None)
@given(
    dims=st.lists(st.integers(min_value=1, max_value=6), min_size=2, max_size=3),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_property(tmp_path_factory, dims, seed):
    arr = np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
    path = tmp_path_factory.mktemp("rt") / "t.blcf"
    tensorio.write_tensor(path, arr)
    assert np.array_equal(tensorio.read_tensor(path), arr)
    assert path.stat().st_size == 9 + 4 * arr.ndim + 4 * arr.size


def test_saliency_image_scaling(tmp_path):
    path = tmp_path / "s.png"
    Image.fromarray(np.array([[0, 255], [0, 255]], dtype=np.uint8), mode="L").save(path)
    out = tensorio.read_saliency_image(path, 2, 2)
    assert np.array_equal(out, np.array([[0.0, 1.0], [0.0, 1.0]]))


def test_saliency_image_extremes(tmp_path):
    for value, expect in ((255, 1.0), (0, 0.0)):
        path = tmp_path / f"s{value}.png"
        Image.fromarray(np.full((4, 6), value, dtype=np.uint8), mode="L").save(path)
        out = tensorio.read_saliency_image(path, 6, 4)
        assert out.shape == (4, 6)
        assert np.all(out == expect)


def test_saliency_image_resize_stays_in_range(tmp_path, rng):
    path = tmp_path / "s.png"
    Image.fromarray(rng.integers(0, 256, size=(13, 17), dtype=np.uint8), mode="L").save(path)
    out = tensorio.read_saliency_image(path, 8, 8)
    assert out.shape == (8, 8)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_load_saliency_dispatches_on_magic(tmp_path):
    tpath = tmp_path / "s.blcf"
    sal = np.array([[0.25, 1.0], [0.0, 0.5]], dtype=np.float32)
    tensorio.write_tensor(tpath, sal)
    assert np.array_equal(tensorio.load_saliency(tpath), sal)
    ipath = tmp_path / "s.png"
    Image.fromarray(np.full((3, 3), 255, dtype=np.uint8), mode="L").save(ipath)
    assert np.all(tensorio.load_saliency(ipath) == 1.0)


def test_manifest_round_trip(tmp_path):
    metas = [
        tensorio.ImageMeta("a", 100, 50, str(tmp_path / "a.blcf")),
        tensorio.ImageMeta("b", 30, 40, str(tmp_path / "b.blcf"), saliency_path=str(tmp_path / "b.png")),
    ]
    path = tmp_path / "m.jsonl"
    tensorio.write_manifest(path, metas)
    back = tensorio.load_manifest(path)
    assert back == metas


def test_manifest_relative_paths_resolve(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"image_id": "a", "width": 1, "height": 1, "tensor_path": "sub/a.blcf"}) + "\n")
    (meta,) = tensorio.load_manifest(path)
    assert meta.tensor_path == str(tmp_path / "sub" / "a.blcf")


def test_manifest_rejects_duplicates(tmp_path):
    path = tmp_path / "m.jsonl"
    line = json.dumps({"image_id": "a", "width": 1, "height": 1, "tensor_path": "a.blcf"})
    path.write_text(line + "\n" + line + "\n")
    with pytest.raises(ValidationError, match="duplicate"):
        tensorio.load_manifest(path)


def test_manifest_rejects_bad_dims(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"image_id": "a", "width": 0, "height": 5, "tensor_path": "a.blcf"}) + "\n")
    with pytest.raises(ValidationError):
        tensorio.load_manifest(path)
