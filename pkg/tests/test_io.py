import struct

import numpy as np
import pytest

from rsmamba.io import (
    CKPT_MAGIC,
    CheckpointError,
    ChecksumError,
    ConfigMismatchError,
    TruncatedError,
    VersionError,
    load_checkpoint,
    read_checkpoint,
    read_dataset,
    read_raw_tensor,
    save_checkpoint,
    write_dataset,
    write_raw_tensor,
)
from rsmamba.model import init_model
from rsmamba.selftest import tiny_model_config


@pytest.fixture
def saved(tmp_path):
    cfg = tiny_model_config(head_kind="cls_head_tail")
    params = init_model(cfg, seed=4)
    path = tmp_path / "m.rsmb"
    save_checkpoint(params, cfg, path, {"seed": 4, "norm_mean": [0.1, 0.2, 0.3]})
    return cfg, params, path


def test_round_trip_is_bitwise(saved):
    cfg, params, path = saved
    loaded, cfg2, header = load_checkpoint(path)
    assert cfg2 == cfg and header["seed"] == 4 and header["format_version"] == 1
    a, b = params.state_dict(), loaded.state_dict()
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes()


def test_float64_round_trip(tmp_path):
    cfg = tiny_model_config()
    params = init_model(cfg, seed=1, dtype=np.float64)
    save_checkpoint(params, cfg, tmp_path / "f64.rsmb")
    loaded, _, _ = load_checkpoint(tmp_path / "f64.rsmb")
    assert loaded.head_w.dtype == np.float64
    assert loaded.head_w.data.tobytes() == params.head_w.data.tobytes()


def test_layout_starts_with_magic_and_version(saved):
    raw = saved[2].read_bytes()
    assert raw[:8] == CKPT_MAGIC
    assert struct.unpack("<I", raw[8:12]) == (1,)


def _payload_offset(raw: bytes, name: str) -> int:
    # locate the first payload byte of a record by walking the layout
    pos = 8
    _, hdr_len = struct.unpack_from("<II", raw, pos)
    pos += 8 + hdr_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", raw, pos)
        rec = raw[pos + 2 : pos + 2 + nl].decode()
        pos += 2 + nl
        _, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2 + 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if rec == name:
            return pos
        pos += nbytes + 4
    raise KeyError(name)


def test_flipped_payload_byte_names_record(saved):
    path = saved[2]
    raw = bytearray(path.read_bytes())
    raw[_payload_offset(bytes(raw), "head_w") + 3] ^= 0x40
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError, match="head_w"):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [4, 10, 30, -5, -1])
def test_truncation_reported(saved, keep):
    path = saved[2]
    raw = path.read_bytes()
    path.write_bytes(raw[:keep] if keep > 0 else raw[:keep])
    with pytest.raises(TruncatedError if keep > 8 or keep < 0 else CheckpointError):
        load_checkpoint(path)


def test_version_mismatch_refused(saved):
    path = saved[2]
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_bad_magic_and_trailing_bytes(saved, tmp_path):
    path = saved[2]
    raw = path.read_bytes()
    (tmp_path / "junk").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "junk")
    (tmp_path / "tail").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "tail")


def test_expected_config_mismatch_rejected(saved):
    cfg, _, path = saved
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected_config=tiny_model_config(num_classes=5))


def test_tensor_shape_mismatch_leaves_no_partial_state(tmp_path):
    cfg = tiny_model_config()
    params = init_model(cfg, seed=0)
    other = tiny_model_config(hidden_size=8, intermediate_size=16)
    save_checkpoint(params, other, tmp_path / "lie.rsmb")  # header claims a smaller model
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(tmp_path / "lie.rsmb")


def test_save_is_atomic(saved, tmp_path):
    cfg, params, path = saved
    save_checkpoint(params, cfg, path)
    assert not (tmp_path / "m.rsmb.tmp").exists()


def test_raw_tensor_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(5, 4, 3)).astype(np.float32)
    write_raw_tensor(a, tmp_path / "a.rst")
    b = read_raw_tensor(tmp_path / "a.rst")
    assert b.dtype == np.float32 and b.tobytes() == a.tobytes()
    with pytest.raises(TypeError):
        write_raw_tensor(np.zeros(3, np.int16), tmp_path / "i.rst")
    raw = (tmp_path / "a.rst").read_bytes()
    (tmp_path / "cut.rst").write_bytes(raw[:-2])
    with pytest.raises(ValueError):
        read_raw_tensor(tmp_path / "cut.rst")


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.normal(size=(6, 8, 8, 3))
    labels = np.array([0, 1, 2, 0, 1, 2])
    index = write_dataset(tmp_path / "ds", imgs, labels, dtype=np.float64)
    x, y = read_dataset(index, num_classes=3)
    assert x.tobytes() == imgs.tobytes() and list(y) == list(labels)
    lines = index.read_text().splitlines()
    assert lines[0] == "sample_000000.rst\t0"


def test_dataset_rejects_bad_geometry_and_labels(tmp_path):
    d = tmp_path / "ds"
    index = write_dataset(d, np.zeros((2, 4, 4, 3)), [0, 1])
    write_raw_tensor(np.zeros((5, 4, 3), np.float32), d / "odd.rst")
    index.write_text(index.read_text() + "odd.rst\t0\n")
    with pytest.raises(ValueError, match="geometry"):
        read_dataset(index)
    index.write_text("sample_000000.rst\t7\n")
    with pytest.raises(ValueError, match="out of range"):
        read_dataset(index, num_classes=3)
    write_raw_tensor(np.zeros((4, 4, 1), np.float32), d / "gray.rst")
    index.write_text("gray.rst\t0\n")
    with pytest.raises(ValueError, match="H x W x 3"):
        read_dataset(index)
    index.write_text("no tab here\n")
    with pytest.raises(ValueError):
        read_dataset(index)
