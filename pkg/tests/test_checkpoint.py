"""
Tests for core.checkpoint
=========================
"""

import struct

import numpy as np
import pytest

from core.checkpoint import CheckpointHandler, load_checkpoint, save_checkpoint
from core.errors import BadMagicError, FormatError, TruncatedFileError, VersionMismatchError
from core.model import FactFormerModel

from .helpers import random_frames, tiny_config


@pytest.fixture
def trained_like_model(rng):
    """参数被打乱过的模型，确保与按种子初始化的模型不同。"""
    model = FactFormerModel(tiny_config(per_layer_rff=True, depth=2))
    for p in model.parameters():
        p.value[...] = rng.standard_normal(p.shape)
    return model


class TestCheckpointRoundTrip:
    def test_save_load_save_is_byte_identical(self, trained_like_model, tmp_path):
        first = save_checkpoint(trained_like_model, tmp_path / "a.ffckpt")
        reloaded = load_checkpoint(first)
        second = save_checkpoint(reloaded, tmp_path / "b.ffckpt")
        assert first.read_bytes() == second.read_bytes()

    def test_reloaded_model_predicts_identically(self, trained_like_model, tmp_path, rng):
        path = save_checkpoint(trained_like_model, tmp_path / "m.ffckpt")
        reloaded = load_checkpoint(path)
        assert reloaded.config == trained_like_model.config
        frames = random_frames(rng, trained_like_model.config)
        for a, b in zip(trained_like_model.predict(frames), reloaded.predict(frames)):
            np.testing.assert_array_equal(a.data, b.data)

    def test_creates_parent_directory(self, trained_like_model, tmp_path):
        path = save_checkpoint(trained_like_model, tmp_path / "nested" / "dir" / "m.ffckpt")
        assert path.is_file()


class TestCheckpointErrors:
    def test_bad_magic(self, trained_like_model):
        blob = bytearray(CheckpointHandler.encode(trained_like_model))
        blob[0:8] = b"NOTACKPT"
        with pytest.raises(BadMagicError):
            CheckpointHandler.decode(bytes(blob))

    def test_version_mismatch(self, trained_like_model):
        blob = bytearray(CheckpointHandler.encode(trained_like_model))
        blob[8] = 2
        with pytest.raises(VersionMismatchError):
            CheckpointHandler.decode(bytes(blob))

    @pytest.mark.parametrize("keep", [4, 20, -1])
    def test_truncation(self, trained_like_model, keep):
        blob = CheckpointHandler.encode(trained_like_model)
        with pytest.raises(TruncatedFileError):
            CheckpointHandler.decode(blob[:keep])

    def test_trailing_bytes(self, trained_like_model):
        blob = CheckpointHandler.encode(trained_like_model) + b"\x00"
        with pytest.raises(FormatError):
            CheckpointHandler.decode(blob)

    def test_errors_are_format_errors(self):
        for cls in (BadMagicError, TruncatedFileError, VersionMismatchError):
            assert issubclass(cls, FormatError)


def _config_entry(key: str, value: bytes) -> bytes:
    return struct.pack("<H", len(key)) + key.encode("utf-8") + struct.pack("<I", len(value)) + value


def _replace_once(blob: bytes, old: bytes, new: bytes) -> bytes:
    assert blob.count(old) == 1
    return blob.replace(old, new)


class TestCorruptContents:
    @pytest.mark.parametrize("bad_value", [b"x", b"0"])
    def test_bad_config_value(self, trained_like_model, bad_value):
        blob = CheckpointHandler.encode(trained_like_model)
        corrupted = _replace_once(blob, _config_entry("depth", b"2"), _config_entry("depth", bad_value))
        with pytest.raises(FormatError, match="config block"):
            CheckpointHandler.decode(corrupted)

    def test_invalid_utf8_key(self, trained_like_model):
        blob = CheckpointHandler.encode(trained_like_model)
        old = struct.pack("<H", 5) + b"depth"
        corrupted = _replace_once(blob, old, struct.pack("<H", 5) + b"\xffepth")
        with pytest.raises(FormatError, match="UTF-8"):
            CheckpointHandler.decode(corrupted)

    def test_duplicate_parameter_name(self, trained_like_model):
        names = [p.name for p in trained_like_model.parameters()]
        first, second = next(
            (a, b) for i, a in enumerate(names) for b in names[i + 1:] if len(a) == len(b)
        )
        blob = CheckpointHandler.encode(trained_like_model)

        def record(name: str) -> bytes:
            return struct.pack("<H", len(name)) + name.encode("utf-8")

        corrupted = _replace_once(blob, record(second), record(first))
        with pytest.raises(FormatError, match="more than once"):
            CheckpointHandler.decode(corrupted)

