"""Versioned tensor container shared by model checkpoints ("FASV") and reference banks ("FASB").

Layout (all integers little-endian), see docs/formats.md:

    magic      4 bytes
    version    u16
    record     u32 length + UTF-8 JSON
    count      u32
    count x    u16 name length, name, u8 dtype code, u8 rank, rank x u32 dims, payload
"""
import dataclasses
import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np
import torch

from core.config import ModelConfig
from core.errors import CheckpointError
from core.vit import FasViT

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FASV"
BANK_MAGIC = b"FASB"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sH")
_U32 = struct.Struct("<I")
_NAME_LEN = struct.Struct("<H")
_TENSOR_INFO = struct.Struct("<BB")

# dtype code -> little-endian numpy dtype
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_container(path, magic, record, tensors):
    chunks = [_HEADER.pack(magic, FORMAT_VERSION)]
    body = json.dumps(record, sort_keys=True).encode("utf-8")
    chunks += [_U32.pack(len(body)), body, _U32.pack(len(tensors))]
    for name, array in tensors.items():
        array = np.ascontiguousarray(array)
        code = _CODES.get(array.dtype)
        if code is None:
            array = array.astype(np.float32)
            code = 0
        encoded = name.encode("utf-8")
        chunks += [_NAME_LEN.pack(len(encoded)), encoded, _TENSOR_INFO.pack(code, array.ndim)]
        chunks += [_U32.pack(d) for d in array.shape]
        chunks.append(array.astype(_DTYPES[code], copy=False).tobytes())
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what, tensor=None):
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointError(f"truncated {what} at byte {self.offset}", tensor=tensor)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt, what, tensor=None):
        return fmt.unpack(self.take(fmt.size, what, tensor))


def read_container(path, magic):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    reader = _Reader(data)
    found, version = reader.unpack(_HEADER, "header")
    if found != magic:
        raise CheckpointError(f"bad magic {found!r} in {path}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} in {path}")
    (record_len,) = reader.unpack(_U32, "record length")
    try:
        record = json.loads(reader.take(record_len, "record").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt record in {path}: {exc}") from exc
    (count,) = reader.unpack(_U32, "tensor count")
    tensors = {}
    for index in range(count):
        (name_len,) = reader.unpack(_NAME_LEN, f"name of tensor #{index}")
        name = reader.take(name_len, f"name of tensor #{index}").decode("utf-8", errors="replace")
        code, rank = reader.unpack(_TENSOR_INFO, "tensor info", name)
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}", tensor=name)
        dims = tuple(reader.unpack(_U32, "tensor dims", name)[0] for _ in range(rank))
        dtype = _DTYPES[code]
        payload = reader.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize, "tensor payload", name)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes in {path}")
    return record, tensors


def save_checkpoint(model, path):
    tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    record = {"config": dataclasses.asdict(model.config)}
    write_container(path, CHECKPOINT_MAGIC, record, tensors)
    logger.info("Saved checkpoint %s (%d tensors)", path, len(tensors))
    return Path(path)


def load_checkpoint(path, config=None):
    """Rebuild a FasViT from a checkpoint; optionally require a matching config."""
    record, tensors = read_container(path, CHECKPOINT_MAGIC)
    try:
        stored = ModelConfig(**record["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config record in {path}: {exc}") from exc
    if config is not None and _geometry(config) != _geometry(stored):
        raise CheckpointError(f"checkpoint geometry {_geometry(stored)} does not match config {_geometry(config)}")
    model = FasViT(config or stored)
    expected = model.state_dict()
    for name, target in expected.items():
        if name not in tensors:
            raise CheckpointError("missing tensor", tensor=name)
        if tuple(tensors[name].shape) != tuple(target.shape):
            raise CheckpointError(
                f"shape {tuple(tensors[name].shape)} does not match expected {tuple(target.shape)}", tensor=name)
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError("unexpected tensor", tensor=extra[0])
    state = {name: torch.from_numpy(tensors[name].copy()).to(target.dtype) for name, target in expected.items()}
    model.load_state_dict(state)
    return model


def _geometry(config):
    return (config.image_size, config.patch_size, config.depth, config.embed_dim, config.heads, config.mlp_ratio)


def file_digest(path):
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
