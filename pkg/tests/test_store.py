import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from multilora.errors import FormatError
from multilora.store import (Checkpoint, decode_checkpoint, delta_from_checkpoints, encode_checkpoint, format_kv,
                             load_checkpoint, parse_kv, save_checkpoint)


def sample_ckpt(rng):
    return Checkpoint(
        tensors={
            "w": rng.normal(size=(3, 4)),
            "s": rng.normal(size=5).astype(np.float32),
            "scalar": np.array(2.5),
            "empty": np.zeros((0, 3)),
        },
        metadata={"seed": 7, "step": 12, "config_digest": "abc", "nested": {"x": [1, 2]}},
    )


def test_round_trip(tmp_path, rng):
    ck = sample_ckpt(rng)
    save_checkpoint(tmp_path / "a.mlra", ck)
    back = load_checkpoint(tmp_path / "a.mlra")
    assert back.metadata == ck.metadata
    assert list(back.tensors) == list(ck.tensors)
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()


def test_empty_checkpoint_layout():
    data = encode_checkpoint(Checkpoint())
    assert data[:4] == b"MLRA"
    assert struct.unpack("<II", data[4:12]) == (1, 0)
    assert struct.unpack("<I", data[12:])[0] == zlib.crc32(data[:12])
    assert decode_checkpoint(data).tensors == {}


def test_tensor_record_layout():
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    data = encode_checkpoint(Checkpoint(tensors={"ab": arr}))
    body = data[12:-4]
    assert body[:2] == struct.pack("<H", 2) and body[2:4] == b"ab"
    assert body[4:6] == bytes([1, 2])
    assert struct.unpack("<II", body[6:14]) == (2, 3)
    assert body[14:] == arr.astype("<f8").tobytes()


def test_encoding_is_deterministic(rng):
    ck = sample_ckpt(rng)
    assert encode_checkpoint(ck) == encode_checkpoint(Checkpoint(dict(ck.tensors), dict(reversed(ck.metadata.items()))))


def test_truncated_file(tmp_path, rng):
    data = encode_checkpoint(sample_ckpt(rng))
    for cut in (0, 5, 15, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            decode_checkpoint(data[:cut])


def test_bad_magic_and_version(rng):
    def resign(body):
        return body + struct.pack("<I", zlib.crc32(body))

    data = encode_checkpoint(sample_ckpt(rng))
    body = data[:-4]
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(resign(b"XXXX" + body[4:]))
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(resign(body[:4] + struct.pack("<I", 2) + body[8:]))


def test_duplicate_names_rejected():
    one = encode_checkpoint(Checkpoint(tensors={"w": np.ones(2)}))
    record = one[12:-4]
    body = b"MLRA" + struct.pack("<II", 1, 2) + record + record
    with pytest.raises(FormatError, match="duplicate"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_reserved_name_and_dtype():
    with pytest.raises(FormatError):
        encode_checkpoint(Checkpoint(tensors={"__metadata__": np.ones(2)}))
    with pytest.raises(FormatError):
        encode_checkpoint(Checkpoint(tensors={"i": np.ones(2, dtype=np.int64)}))


def test_single_bit_flips_detected(rng):
    data = bytearray(encode_checkpoint(sample_ckpt(rng)))
    g = np.random.default_rng(99)
    for _ in range(1000):
        pos = int(g.integers(len(data)))
        bit = 1 << int(g.integers(8))
        data[pos] ^= bit
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(data))
        data[pos] ^= bit


def test_delta_from_checkpoints(rng):
    w = rng.normal(size=(4, 3))
    base = Checkpoint(tensors={"layers.0.q_proj.weight": w})
    assert np.array_equal(delta_from_checkpoints(base, base, "layers.0.q_proj"), np.zeros((4, 3)))
    zero = Checkpoint(tensors={"layers.0.q_proj.weight": np.zeros((4, 3))})
    assert np.array_equal(delta_from_checkpoints(zero, base, "layers.0.q_proj.weight"), w)

    tuned_w = rng.normal(size=(4, 3)).astype(np.float32)
    tuned = Checkpoint(tensors={"layers.0.q_proj.weight": tuned_w})
    got = delta_from_checkpoints(base, tuned, "layers.0.q_proj")
    for i in range(4):
        for j in range(3):
            assert got[i, j] == float(tuned_w[i, j]) - w[i, j]
    with pytest.raises(ValueError):
        delta_from_checkpoints(base, tuned, "layers.1.q_proj")
    with pytest.raises(ValueError):
        delta_from_checkpoints(base, Checkpoint(tensors={"layers.0.q_proj.weight": np.ones((3, 4))}),
                               "layers.0.q_proj")


def test_atomic_write_leaves_no_temp(tmp_path, rng):
    save_checkpoint(tmp_path / "x.mlra", sample_ckpt(rng))
    save_checkpoint(tmp_path / "x.mlra", sample_ckpt(rng))
    assert [p.name for p in tmp_path.iterdir()] == ["x.mlra"]


def test_kv_format():
    text = "# run\nmethod = lora\n r=8 # rank\n\ntargets = q_proj,v_proj\n"
    assert parse_kv(text) == {"method": "lora", "r": "8", "targets": "q_proj,v_proj"}
    assert parse_kv(format_kv({"a": 1, "t": ["x", "y"]}, header="h")) == {"a": "1", "t": "x,y"}
    with pytest.raises(FormatError):
        parse_kv("no equals sign here")
    with pytest.raises(FormatError):
        parse_kv(" = 3")


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12).filter(lambda s: s != "__metadata__"),
                       arrays(st.sampled_from([np.float32, np.float64]),
                              st.lists(st.integers(0, 4), max_size=3).map(tuple)),
                       max_size=4),
       st.dictionaries(st.text(max_size=5), st.integers(-5, 5), max_size=3))
def test_round_trip_property(tensors, meta):
    ck = Checkpoint(tensors=tensors, metadata=meta)
    back = decode_checkpoint(encode_checkpoint(ck))
    assert back.metadata == meta
    assert list(back.tensors) == list(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].shape == v.shape
