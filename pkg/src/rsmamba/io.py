"""Binary checkpoint and raw-tensor dataset formats.

Checkpoint layout (all integers little-endian)::

    magic      b"RSMBCKPT"
    version    u32
    hdr_len    u32, then hdr_len bytes of UTF-8 JSON header
    n_records  u32
    record*    name_len u16 | name | dtype u8 | ndim u8 | dims u32*ndim
               | nbytes u64 | payload (little-endian) | crc32(payload) u32

Raw tensor sample layout::

    magic b"RSMBTNSR" | dtype u8 | ndim u8 | dims u32*ndim | payload

A dataset is a text index file with one ``<sample path>\\t<label>`` line per
sample; relative paths resolve against the index file's directory.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, init_model

CKPT_MAGIC = b"RSMBCKPT"
TENSOR_MAGIC = b"RSMBTNSR"
FORMAT_VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _encode_array(arr: np.ndarray) -> tuple[int, bytes]:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    tag = DTYPE_TAGS.get(le.dtype)
    if tag is None:
        raise TypeError(f"cannot serialise dtype {arr.dtype}")
    return tag, np.ascontiguousarray(le).tobytes()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_checkpoint(params: ModelParams, config: ModelConfig, path, header: dict | None = None) -> None:
    """Write ``params`` and ``config``; ``header`` adds extra JSON fields (norm stats, seed, ...)."""
    hdr = {"format_version": FORMAT_VERSION, "model_config": config.to_dict(), **(header or {})}
    hdr_bytes = json.dumps(hdr, sort_keys=True).encode()
    named = list(params.named_parameters())
    parts = [CKPT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(hdr_bytes)), hdr_bytes, struct.pack("<I", len(named))]
    for name, t in named:
        tag, payload = _encode_array(t.data)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", tag, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    _atomic_write(Path(path), b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; returns ``(header, {name: array})``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hdr_len = r.unpack("<II", "version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    header = json.loads(r.take(hdr_len, "header").decode())
    (count,) = r.unpack("<I", "record count")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "record name length")
        name = r.take(name_len, "record name").decode()
        tag, ndim = r.unpack("<BB", f"record {name!r} dtype")
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I", f"record {name!r} shape")
        (nbytes,) = r.unpack("<Q", f"record {name!r} size")
        payload = r.take(nbytes, f"record {name!r} payload")
        (crc,) = r.unpack("<I", f"record {name!r} checksum")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in record {name!r}")
        dt = TAG_DTYPES[tag]
        if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"record {name!r}: {nbytes} bytes do not fit shape {shape}")
        records[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return header, records


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig, dict]:
    """Load ``(params, config, header)``. Nothing is returned unless every check passes."""
    header, records = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and expected_config != config:
        raise ConfigMismatchError(f"checkpoint config differs from expected: {config} vs {expected_config}")
    dtype = next(iter(records.values())).dtype if records else np.float32
    params = init_model(config, seed=0, dtype=dtype)
    try:
        params.load_state_dict(records)
    except (KeyError, ValueError) as exc:
        raise ConfigMismatchError(f"checkpoint tensors do not match its config: {exc}") from exc
    return params, config, header


# ---------------------------------------------------------------- raw tensors / datasets


def write_raw_tensor(arr: np.ndarray, path) -> None:
    tag, payload = _encode_array(np.asarray(arr))
    head = TENSOR_MAGIC + struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    _atomic_write(Path(path), head + payload)


def read_raw_tensor(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(TENSOR_MAGIC), "magic") != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a raw tensor file (bad magic)")
    tag, ndim = r.unpack("<BB", "dtype")
    if tag not in TAG_DTYPES:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    shape = r.unpack(f"<{ndim}I", "shape")
    dt = TAG_DTYPES[tag]
    nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
    payload = r.take(nbytes, "payload")
    if r.pos != len(r.buf):
        raise ValueError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def write_dataset(directory, images: np.ndarray, labels, index_name: str = "index.tsv", dtype=np.float32) -> Path:
    """Write one raw-tensor file per sample plus the index; returns the index path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, y) in enumerate(zip(images, labels)):
        name = f"sample_{i:06d}.rst"
        write_raw_tensor(np.asarray(img, dtype=dtype), directory / name)
        lines.append(f"{name}\t{int(y)}")
    index = directory / index_name
    index.write_text("\n".join(lines) + "\n")
    return index


def read_dataset(index_path, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Load every sample listed in ``index_path``; all must share one ``H x W x 3`` geometry."""
    index_path = Path(index_path)
    images, labels = [], []
    for lineno, line in enumerate(index_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, label = line.rsplit("\t", 1)
            label = int(label)
        except ValueError:
            raise ValueError(f"{index_path}:{lineno}: expected '<path>\\t<label>'") from None
        img = read_raw_tensor(index_path.parent / rel)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"{rel}: expected H x W x 3, got {img.shape}")
        if images and img.shape != images[0].shape:
            raise ValueError(f"{rel}: geometry {img.shape} differs from {images[0].shape}")
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ValueError(f"{index_path}:{lineno}: label {label} out of range")
        images.append(img)
        labels.append(label)
    if not images:
        raise ValueError(f"{index_path}: empty dataset")
    return np.stack(images), np.array(labels)
