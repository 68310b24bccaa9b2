import struct

import numpy as np
import pytest

from shadowfl import io, nn
from shadowfl.data import synthetic_digits
from shadowfl.robust import get_threshold


def test_checkpoint_roundtrip(tmp_path, rng):
    vec = rng.standard_normal(17)
    io.save_checkpoint(tmp_path / "a.ckpt", {"kind": "blob", "x": [1, 2]}, vec)
    header, back = io.load_checkpoint(tmp_path / "a.ckpt")
    assert header == {"kind": "blob", "x": [1, 2]}
    np.testing.assert_array_equal(back, vec)
    blob = (tmp_path / "a.ckpt").read_bytes()
    assert blob[:4] == b"SHFL"
    version, hlen = struct.unpack("<II", blob[4:12])
    assert version == 1 and len(blob) == 12 + hlen + 17 * 8


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:14], "truncated"),
    (lambda b: b[:-3], "multiple of 8"),
    (lambda b: b"", "bad magic"),
])
def test_corrupt_checkpoints(mutate, msg):
    blob = io.encode_checkpoint({"kind": "blob"}, np.arange(4.0))
    with pytest.raises(io.CheckpointError, match=msg):
        io.decode_checkpoint(mutate(blob))


def test_model_roundtrip_and_kind_checks(tmp_path):
    spec = nn.mlp_spec(5, 3, (4,))
    w = nn.init_params(spec, 1)
    io.save_model(tmp_path / "m.ckpt", spec, w, seed=1, extra={"round": 9})
    spec2, w2, header = io.load_model(tmp_path / "m.ckpt")
    assert spec2 == spec and header["round"] == 9
    np.testing.assert_array_equal(w2, w)
    io.save_checkpoint(tmp_path / "bad.ckpt", {"kind": "model", "spec": spec.to_dict()}, w[:-1])
    with pytest.raises(io.CheckpointError, match="spec needs"):
        io.load_model(tmp_path / "bad.ckpt")
    with pytest.raises(io.CheckpointError):
        io.load_filter(tmp_path / "m.ckpt")
    with pytest.raises(io.CheckpointError):
        io.load_dataset(tmp_path / "m.ckpt")


def test_filter_and_dataset_roundtrip(tmp_path, rng):
    fp = get_threshold(rng.standard_normal((300, 5)), 0.1, 3, strict=False)
    io.save_filter(tmp_path / "f.ckpt", fp)
    back = io.load_filter(tmp_path / "f.ckpt")
    np.testing.assert_array_equal(back.basis, fp.basis)
    assert back.threshold == fp.threshold
    ds = synthetic_digits(30, 2, "train")
    io.save_dataset(tmp_path / "d.ckpt", ds)
    ds2 = io.load_dataset(tmp_path / "d.ckpt")
    np.testing.assert_array_equal(ds2.inputs, ds.inputs)
    np.testing.assert_array_equal(ds2.labels, ds.labels)
    assert ds2.image_shape == ds.image_shape


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "sub" / "out.csv"
    io.atomic_write_text(target, "old\n")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(io.os, "replace", boom)
    with pytest.raises(OSError):
        io.atomic_write_text(target, "new\n")
    assert target.read_text() == "old\n"
    assert [p.name for p in target.parent.iterdir()] == ["out.csv"]
