import struct
import zlib

import numpy as np
import pytest

from pgcn.checkpoint import MAGIC, decode, encode, load_into, read_checkpoint, save_checkpoint
from pgcn.comparator import ComparatorNet
from pgcn.config import ModelConfig
from pgcn.errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError
from pgcn.generator import GenerationNet

TINY = ModelConfig(c=8, window_m=1, tile_resolution=32, encoder_depths=(2, 2, 2, 2), decoder_depths=(1, 1, 1, 1),
                   cmp_widths=(4, 8, 8), cmp_fc_hidden=8)


@pytest.fixture
def gen():
    return GenerationNet(TINY, np.random.default_rng(0))


def test_layout_by_hand():
    blob = encode({"w": np.array([[1.0, -2.0]], np.float32)}, {"k": 1})
    assert blob[:4] == b"PGCN" and blob[4] == 1
    (hlen,) = struct.unpack("<Q", blob[5:13])
    header = blob[13:13 + hlen].decode()
    assert '"offset": 0' in header and '"dtype": "f32"' in header and '"shape": [1, 2]' in header
    payload = blob[13 + hlen:-4]
    assert payload == struct.pack("<ff", 1.0, -2.0)
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(payload)


def test_bitwise_round_trip(tmp_path, gen):
    path = save_checkpoint(tmp_path / "g.pgcn", gen, {"kind": "generator"})
    ckpt = read_checkpoint(path)
    for name, arr in gen.state_dict().items():
        assert ckpt.tensors[name].tobytes() == arr.tobytes()
    assert ckpt.meta == {"kind": "generator"}

    other = GenerationNet(TINY, np.random.default_rng(99))
    load_into(other, ckpt)
    path2 = save_checkpoint(tmp_path / "g2.pgcn", other, {"kind": "generator"})
    assert path.read_bytes() == path2.read_bytes()


def test_special_values_survive(tmp_path):
    arr = np.array([np.nan, np.inf, -0.0, 1e-45, -3.5], np.float32)
    back = decode(encode({"x": arr})).tensors["x"]
    assert back.tobytes() == arr.tobytes()


def test_census_matches_model(tmp_path):
    net = ComparatorNet(TINY, np.random.default_rng(0))
    ckpt = read_checkpoint(save_checkpoint(tmp_path / "c.pgcn", net))
    params, buffers = net.named_parameters(), net.named_buffers()
    assert len(ckpt.manifest) == len(params) + len(buffers)
    assert {n for n, _ in params} <= set(ckpt.tensors)
    assert sum(t.size for t in ckpt.tensors.values()) == sum(p.size for _, p in params) + sum(b.size for _, b in buffers)


def test_crc_mismatch(tmp_path, gen):
    path = save_checkpoint(tmp_path / "g.pgcn", gen)
    blob = bytearray(path.read_bytes())
    blob[-10] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptCheckpointError, match="CRC"):
        read_checkpoint(path)


def test_truncated_file_leaves_model_untouched(tmp_path, gen):
    path = save_checkpoint(tmp_path / "g.pgcn", gen)
    blob = path.read_bytes()
    target = GenerationNet(TINY, np.random.default_rng(5))
    before = {k: v.copy() for k, v in target.state_dict().items()}
    for cut in (3, 10, 40, len(blob) // 2, len(blob) - 1):
        path.write_bytes(blob[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_into(target, read_checkpoint(path))
    for k, v in target.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


def test_unknown_version(tmp_path, gen):
    blob = bytearray(encode(gen.state_dict()))
    blob[4] = 2
    with pytest.raises(CheckpointVersionError):
        decode(bytes(blob))


def test_bad_magic():
    with pytest.raises(CorruptCheckpointError):
        decode(b"NOPE" + bytes(20))
    assert MAGIC == b"PGCN"


def test_load_into_wrong_model_fails(tmp_path, gen):
    ckpt = read_checkpoint(save_checkpoint(tmp_path / "g.pgcn", gen))
    with pytest.raises(CheckpointError):
        load_into(ComparatorNet(TINY, np.random.default_rng(0)), ckpt)
