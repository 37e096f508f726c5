import struct
import zlib

import pytest
import torch

from modules.checkpoint import MAGIC, checkpoint_hash, load_checkpoint, save_checkpoint
from modules.errors import CorruptionError, FormatError, VersionError

from tests.conftest import TINY_MODEL


def test_round_trip(tmp_path, tiny_model):
    digest = save_checkpoint(tiny_model, tmp_path / "m.dgpm")
    loaded = load_checkpoint(tmp_path / "m.dgpm")
    assert loaded.config == TINY_MODEL
    for (name, p), (other, q) in zip(tiny_model.named_parameters(), loaded.named_parameters()):
        assert name == other
        assert torch.equal(p, q)
    assert checkpoint_hash(loaded) == digest
    assert len(digest) == 32


def test_hash_tracks_parameters(tiny_model):
    before = checkpoint_hash(tiny_model)
    with torch.no_grad():
        tiny_model.mask_token[0] += 1.0
    assert checkpoint_hash(tiny_model) != before


def test_file_layout(tmp_path, tiny_model):
    save_checkpoint(tiny_model, tmp_path / "m.dgpm")
    blob = (tmp_path / "m.dgpm").read_bytes()
    assert blob[:4] == MAGIC
    assert struct.unpack_from("<I", blob, 4)[0] == 1


def test_crc_failure(tmp_path, tiny_model):
    path = tmp_path / "m.dgpm"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    (tmp_path / "m.dgpm").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.dgpm")


def test_version_mismatch(tmp_path, tiny_model):
    path = tmp_path / "m.dgpm"
    save_checkpoint(tiny_model, path)
    body = bytearray(path.read_bytes()[:-4])
    body[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
    with pytest.raises(VersionError):
        load_checkpoint(path)
