"""
Unit tests for model checkpoints
"""

import struct
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from config import EncoderConfig, StudentConfig, TeacherConfig
from src.checkpoint import load_checkpoint, save_checkpoint
from src.encoders import AudioBackbone
from src.exceptions import DependencyError, FormatError
from src.student import StudentModel
from src.teacher import TeacherModel

SMALL_ENCODERS = EncoderConfig(d_raw_audio=8, d_hid=16, d_emb=12)


@pytest.fixture(params=["teacher", "student", "backbone"])
def model(request):
    if request.param == "teacher":
        return TeacherModel.build([0, 1, 2], 40, SMALL_ENCODERS, TeacherConfig(tau=0.05))
    if request.param == "student":
        return StudentModel.build([0, 1, 2], SMALL_ENCODERS, StudentConfig(gamma=3.0))
    return AudioBackbone.from_seed(11, 8, 16, layer2_trainable=False)


@pytest.fixture
def saved(tmp_path):
    path = tmp_path / "student.ckpt"
    save_checkpoint(str(path), StudentModel.build([0, 1], SMALL_ENCODERS, StudentConfig()), "stu-mm")
    return path


def test_round_trip(tmp_path, model):
    path = tmp_path / "model.ckpt"
    fingerprint = save_checkpoint(str(path), model, "some-variant", {"training": {"seed": 3}})
    ckpt = load_checkpoint(str(path))

    assert ckpt.fingerprint == fingerprint == model.checksum()
    assert ckpt.model.checksum() == model.checksum()
    assert ckpt.variant == "some-variant"
    assert ckpt.config == {"training": {"seed": 3}}
    assert type(ckpt.model) is type(model)
    for name, value in model.state_dict().items():
        assert np.array_equal(ckpt.model.state_dict()[name], value), name


def test_kind_is_recorded(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), model)
    expected = {TeacherModel: "teacher", StudentModel: "student", AudioBackbone: "backbone"}[type(model)]
    assert load_checkpoint(str(path)).kind == expected


def test_saving_twice_gives_identical_bytes(tmp_path, saved):
    again = tmp_path / "again.ckpt"
    save_checkpoint(str(again), load_checkpoint(str(saved)).model, "stu-mm")
    assert again.read_bytes() == saved.read_bytes()


def test_missing_file(tmp_path):
    with pytest.raises(DependencyError):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


def test_wrong_magic(saved):
    data = saved.read_bytes()
    saved.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(FormatError):
        load_checkpoint(str(saved))


def test_unsupported_version(saved):
    data = bytearray(saved.read_bytes())
    data[8:12] = struct.pack("<I", 2)
    saved.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="format-version"):
        load_checkpoint(str(saved))


def test_truncated_file(saved):
    data = saved.read_bytes()
    saved.write_bytes(data[:len(data) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(str(saved))


def test_corrupted_tensor_fails_fingerprint(saved):
    data = bytearray(saved.read_bytes())
    data[-3] ^= 0x01
    saved.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="fingerprint"):
        load_checkpoint(str(saved))
