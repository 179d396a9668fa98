import struct

import numpy as np
import pytest

from spikingedn.autograd import precision
from spikingedn.checkpoint import (
    PrecisionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from spikingedn.formats import FormatError
from spikingedn.genotype import default_genotype
from spikingedn.network import ModelConfig, SpikingEDN


def small_model(**kw):
    cfg = ModelConfig(num_classes=3, stem_channels=8, node_width=4, aspp_channels=4, aspp_rates=(1, 2),
                      decoder_channels=8, seed=2, **kw)
    return SpikingEDN(default_genotype(), cfg)


def test_save_load_save_identical_bytes(tmp_path):
    model = small_model(ssam="S2")
    first = tmp_path / "a.sedn"
    save_checkpoint(model, {"epoch": 3}, first, extra={"step": np.array(7)})
    loaded, meta, extra = load_checkpoint(first)
    second = tmp_path / "b.sedn"
    save_checkpoint(loaded, {"epoch": 3}, second, extra=extra)
    assert first.read_bytes() == second.read_bytes()
    assert meta["epoch"] == 3 and int(extra["step"]) == 7
    for (k, a), (_, b) in zip(sorted(model.state_dict().items()), sorted(loaded.state_dict().items())):
        assert a.shape == b.shape and a.tobytes() == b.tobytes(), k


def test_scalar_parameters_keep_their_shape(tmp_path):
    model = small_model()
    path = tmp_path / "m.sedn"
    save_checkpoint(model, None, path)
    loaded, _, _ = load_checkpoint(path)
    assert loaded.stem1.layer.neuron.tau_a.shape == ()


def test_corrupted_tensor_byte_reports_offset(tmp_path):
    path = tmp_path / "m.sedn"
    save_checkpoint(small_model(), None, path)
    buf = bytearray(path.read_bytes())
    pos = len(buf) - 5  # inside the last tensor's payload
    buf[pos] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="checksum") as info:
        load_checkpoint(path)
    assert 0 < info.value.offset <= pos


def test_header_errors():
    buf = encode_checkpoint({"w": np.zeros(3)}, {"a": 1})
    with pytest.raises(FormatError) as info:
        decode_checkpoint(b"XXXX" + buf[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError, match="version") as info:
        decode_checkpoint(buf[:4] + struct.pack("<I", 99) + buf[8:])
    assert info.value.offset == 4
    with pytest.raises(FormatError, match="truncated"):
        decode_checkpoint(buf[:-2])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(buf + b"\0")


def test_cross_precision_load_is_refused(tmp_path):
    path = tmp_path / "m.sedn"
    save_checkpoint(small_model(), None, path)
    with precision(np.float32):
        with pytest.raises(PrecisionError):
            load_checkpoint(path)
    load_checkpoint(path, dtype=np.float64)


def test_encode_round_trip_keeps_dtypes_and_shapes(rng):
    tensors = {"a": rng.normal(size=(2, 3)), "b": np.array(3.5, dtype=np.float32),
               "c": rng.integers(0, 9, (4,)).astype(np.int16), "d": np.zeros((0, 2))}
    back, meta = decode_checkpoint(encode_checkpoint(tensors, {"k": [1, 2]}))
    assert meta == {"k": [1, 2]}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)
