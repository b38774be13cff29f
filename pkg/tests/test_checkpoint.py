"""Checkpoint round trips must be byte-identical and the manifest honest."""

import json

import numpy as np
import pytest

from densemae.checkpoint import load_state, save_state
from densemae.nn import BatchNorm2d, Conv2d, Sequential
from densemae.tensor import Tensor


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    entries = [
        ("a.weight", rng.normal(size=(4, 3, 3, 3))),
        ("a.bias", rng.normal(size=4).astype(np.float32)),
        ("flags", np.array([1, 0, 1], dtype=np.uint8)),
        ("count", np.array([7], dtype=np.int64)),
    ]
    save_state(tmp_path / "ck", entries, config={"emb_dim": 32})
    loaded, config = load_state(tmp_path / "ck")
    assert config == {"emb_dim": 32}
    assert list(loaded) == [n for n, _ in entries]
    for name, arr in entries:
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].tobytes() == arr.tobytes()


def test_manifest_layout(tmp_path):
    entries = [("x", np.zeros((2, 2), dtype=np.float32)), ("y", np.ones(3))]
    save_state(tmp_path / "ck", entries)
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["format"] == 1
    e0, e1 = manifest["entries"]
    assert e0 == {"name": "x", "shape": [2, 2], "dtype": "<f4",
                  "byte_offset": 0, "byte_length": 16}
    assert e1["byte_offset"] == 16 and e1["byte_length"] == 24
    size = (tmp_path / "ck" / "weights.bin").stat().st_size
    assert size == 40


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_state(tmp_path / "ck", [("x", np.zeros(1)), ("x", np.zeros(1))])


def test_corrupt_manifest_rejected(tmp_path):
    save_state(tmp_path / "ck", [("x", np.zeros(4))])
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    manifest["entries"][0]["byte_length"] = 999
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        load_state(tmp_path / "ck")


def test_module_state_round_trip_includes_buffers(tmp_path):
    rng = np.random.default_rng(1)
    model = Sequential(Conv2d(2, 4, 3, rng), BatchNorm2d(4))
    model(Tensor(rng.normal(size=(2, 2, 8, 8))))  # advance running stats
    names = [n for n, _ in model.state_entries()]
    assert "m0.weight" in names and "m1.running_var" in names and "m1.num_batches" in names

    save_state(tmp_path / "ck", model.state_entries())
    loaded, _ = load_state(tmp_path / "ck")

    model2 = Sequential(Conv2d(2, 4, 3, np.random.default_rng(99)), BatchNorm2d(4))
    model2.load_state_entries(loaded)
    for (n1, a), (n2, b) in zip(model.state_entries(), model2.state_entries()):
        assert n1 == n2
        assert a.tobytes() == b.tobytes()

    # second save must be byte-identical to the first
    save_state(tmp_path / "ck2", model2.state_entries())
    assert (tmp_path / "ck" / "weights.bin").read_bytes() == (tmp_path / "ck2" / "weights.bin").read_bytes()


def test_missing_entry_on_load_raises(tmp_path):
    rng = np.random.default_rng(2)
    model = Conv2d(2, 4, 3, rng)
    save_state(tmp_path / "ck", [("weight", model.weight.data)])
    loaded, _ = load_state(tmp_path / "ck")
    with pytest.raises(KeyError):
        model.load_state_entries(loaded)  # bias missing
