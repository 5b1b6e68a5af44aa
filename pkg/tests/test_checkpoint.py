import struct

import numpy as np
import pytest

from pah.checkpoint import (MAGIC, CheckpointError, CheckpointVersionError, layout, load_checkpoint,
                            save_checkpoint)
from pah.model import model_forward


def test_round_trip_forward_bitwise(small_model, tmp_path):
    rng = np.random.default_rng(1)
    small_model.register_task(2, [rng.normal(size=(1, 3, 3)) for _ in range(2)])
    save_checkpoint(small_model, tmp_path / "m.pahc")
    back = load_checkpoint(tmp_path / "m.pahc")
    assert back.dims == small_model.dims
    x = rng.normal(size=(5, 1, 6, 6))
    for k in (1, 2):
        np.testing.assert_array_equal(model_forward(back, x, k).data, model_forward(small_model, x, k).data)


def test_float32_round_trip(small_dims, tmp_path):
    from pah.model import PahModel

    model = PahModel.create(small_dims, np.random.default_rng(0), np.float32)
    model.register_task(1, [np.ones((1, 3, 3))] * 2)
    save_checkpoint(model, tmp_path / "m.pahc")
    back = load_checkpoint(tmp_path / "m.pahc")
    assert back.dtype == np.float32
    for a, b in zip(model.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_size_grows_by_prototypes_only(small_model, tmp_path):
    d = small_model.dims
    sizes = []
    for k in range(2, 5):
        save_checkpoint(small_model, tmp_path / f"{k}.pahc")
        sizes.append((tmp_path / f"{k}.pahc").stat().st_size)
        small_model.register_task(k, [np.zeros((1, 3, 3))] * 2)
    deltas = np.diff(sizes)
    assert deltas.tolist() == [d.num_classes * d.channels * d.proto_h * d.proto_w * 8] * 2
    assert set(layout(d, 1)) == {"backbone", "hypernet", "prototypes"}


def test_corrupt_magic(small_model, tmp_path):
    path = tmp_path / "m.pahc"
    save_checkpoint(small_model, path)
    raw = bytearray(path.read_bytes())
    raw[0:8] = b"NOTACKPT"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch(small_model, tmp_path):
    path = tmp_path / "m.pahc"
    save_checkpoint(small_model, path)
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="migration"):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [10, 100])
def test_truncated(small_model, tmp_path, cut):
    path = tmp_path / "m.pahc"
    save_checkpoint(small_model, path)
    path.write_bytes(path.read_bytes()[:-cut] if cut > 50 else path.read_bytes()[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_header_magic_constant():
    assert len(MAGIC) == 8
