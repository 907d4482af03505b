import dataclasses
import os
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facthash.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointIOError,
    ChecksumError,
    FormatError,
    ShapeMismatchError,
    VersionError,
    _digest,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from facthash.config import DatasetConfig, RunConfig
from facthash.harness import checkpoint_of, evaluate, load_splits, run_training, state_from_checkpoint
from facthash.training import ModelConfig, TrainConfig


def tiny_run_config(**train_kw) -> RunConfig:
    tr = dict(batch_rays=256, iterations=12, step_divisor=64.0, bitfield_resolution=16,
              bitfield_warmup=6, bitfield_every=3)
    tr.update(train_kw)
    return RunConfig(
        model=ModelConfig(levels=4, n_min=4, n_max=16, table_size=2**10, density_hidden=32, color_hidden=32),
        train=TrainConfig(**tr),
        dataset=DatasetConfig(scene="desk", train_views=4, test_views=2, width=24, height=24),
    )


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_run_config()
    res = run_training(cfg, evaluate=False)
    return res.state, cfg


def test_round_trip_bit_exact(trained, tmp_path):
    state, cfg = trained
    ck = checkpoint_of(state, cfg)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.step == state.step == 12
    assert back.config == ck.config
    assert set(back.arrays) == set(ck.arrays)
    for k, v in ck.arrays.items():
        assert back.arrays[k].dtype == v.dtype
        assert back.arrays[k].tobytes() == v.tobytes(), k
    restored, _ = state_from_checkpoint(back)
    for (n, a), b in zip(state.field.state_dict().items(), restored.field.state_dict().values()):
        assert torch.equal(a, b), n
    assert torch.equal(restored.bitfield.bits, state.bitfield.bits)
    # optimizer moments come back too, so a resumed step matches a continued one
    for p, q in zip(state.field.parameters(), restored.field.parameters()):
        sa, sb = state.optimizer.state[p], restored.optimizer.state[q]
        assert torch.equal(sa["exp_avg"], sb["exp_avg"]) and torch.equal(sa["exp_avg_sq"], sb["exp_avg_sq"])


def test_reloaded_eval_equals_in_memory(trained, tmp_path):
    state, cfg = trained
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, checkpoint_of(state, cfg))
    restored, _ = state_from_checkpoint(load_checkpoint(path))
    test = load_splits(cfg)[1]
    assert evaluate(state, test) == evaluate(restored, test)


def test_truncated_file_checksum_error(trained, tmp_path):
    blob = encode_checkpoint(checkpoint_of(*trained))
    path = tmp_path / "t.ckpt"
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ChecksumError):
        load_checkpoint(str(path))


@given(st.integers(0, 10**9))
@settings(max_examples=30, deadline=None)
def test_any_flipped_byte_detected(pos):
    ck = Checkpoint({"a": 1}, 3, {"x": np.arange(10, dtype=np.float32)})
    blob = bytearray(encode_checkpoint(ck))
    i = pos % len(blob)
    blob[i] ^= 0x5A
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(blob))


def test_unknown_version(tmp_path):
    blob = encode_checkpoint(Checkpoint({}, 0, {"x": np.zeros(2)}), version=9)
    with pytest.raises(VersionError):
        decode_checkpoint(blob)


def test_bad_magic_is_format_error():
    payload = b"NOPE" + b"\x01" + b"\0" * 16
    with pytest.raises(FormatError):
        decode_checkpoint(payload + _digest(payload))


def test_missing_file_io_error(tmp_path):
    with pytest.raises(CheckpointIOError):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


def test_header_layout():
    blob = encode_checkpoint(Checkpoint({"k": 2}, 7, {}))
    assert blob[:4] == MAGIC and blob[4] == 1
    (n,) = struct.unpack("<I", blob[5:9])
    assert blob[9 : 9 + n] == b'{"k": 2}' or b'"k"' in blob[9 : 9 + n]
    (step,) = struct.unpack("<Q", blob[9 + n : 17 + n])
    assert step == 7


def test_cross_config_shape_error_names_array(trained):
    state, cfg = trained
    ck = checkpoint_of(state, cfg)
    other = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, density_hidden=16))
    ck = Checkpoint(other.to_dict(), ck.step, ck.arrays)
    with pytest.raises(ShapeMismatchError) as err:
        state_from_checkpoint(ck)
    assert "field.mlp.density" in str(err.value)


def test_atomic_save_leaves_no_temp(trained, tmp_path):
    save_checkpoint(str(tmp_path / "a.ckpt"), checkpoint_of(*trained))
    assert os.listdir(tmp_path) == ["a.ckpt"]
