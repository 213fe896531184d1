import numpy as np
import pytest

from deepsim.checkpoint import Checkpoint, CheckpointError, decode, encode, load_checkpoint, save_checkpoint


def sample():
    rng = np.random.default_rng(0)
    return Checkpoint(
        config_hash="0123456789abcdef",
        config_text="task = vae\n",
        iteration=12,
        arrays={"gen/w": rng.standard_normal((3, 4)).astype(np.float32), "disc/b": rng.standard_normal(5),
                "idx": np.arange(4)},
        meta={"streams": {"data": {"state": 1}}, "flag": True},
    )


def test_round_trip_is_bitwise(tmp_path):
    ckpt = sample()
    save_checkpoint(tmp_path / "a.bin", ckpt)
    back = load_checkpoint(tmp_path / "a.bin")
    assert back.iteration == 12 and back.meta == ckpt.meta and back.config_text == ckpt.config_text
    for k, v in ckpt.arrays.items():
        assert back.arrays[k].dtype == v.dtype
        assert back.arrays[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "b.bin", back)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_truncated_file_is_rejected(tmp_path):
    data = encode(sample())
    (tmp_path / "t.bin").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "t.bin")


def test_flipped_byte_is_rejected():
    data = bytearray(encode(sample()))
    data[len(data) // 2] ^= 1
    with pytest.raises(CheckpointError):
        decode(bytes(data))


def test_not_a_checkpoint():
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        decode(b"hello")


def test_hash_mismatch_names_both(tmp_path):
    save_checkpoint(tmp_path / "a.bin", sample())
    with pytest.raises(CheckpointError, match="0123456789abcdef.*ffffffffffffffff"):
        load_checkpoint(tmp_path / "a.bin", expected_hash="ffffffffffffffff")
    assert load_checkpoint(tmp_path / "a.bin", expected_hash="ffffffffffffffff", override=True).iteration == 12


def test_version_mismatch(tmp_path):
    ckpt = sample()
    ckpt.version = 99
    save_checkpoint(tmp_path / "a.bin", ckpt)
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "a.bin")
    assert load_checkpoint(tmp_path / "a.bin", override=True).version == 99
