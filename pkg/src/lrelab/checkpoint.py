"""The ``LREL`` tensor container shared by model and operator files.

Layout::

    b"LREL"                      4 bytes magic
    version                      u32 little-endian
    header_length                u32 little-endian
    header                       UTF-8 JSON, ``header_length`` bytes
    tensor data                  float64 little-endian, row-major, one tensor
                                 after another in the order of header["tensors"]

``header["tensors"]`` is a list of ``[name, shape]``.  The remaining header
keys describe the payload (``"kind": "model"`` with a ``"config"`` entry, or
``"kind": "operator"`` with operator metadata).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from lrelab.exceptions import FormatError
from lrelab.model import ModelConfig, Parameters, param_shapes

MAGIC = b"LREL"
VERSION = 1
_DTYPE = np.dtype("<f8")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_container(header: dict, tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    header = dict(header)
    header["tensors"] = [[name, list(np.shape(t))] for name, t in tensors.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for t in tensors.values():
        parts.append(np.ascontiguousarray(t, dtype=_DTYPE).tobytes())
    return b"".join(parts)


def decode_container(data: bytes, source="<bytes>"):
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{source}: missing LREL magic bytes")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{source}: unsupported format version {version} (expected {VERSION})")
    if len(data) < 12 + hlen:
        raise FormatError(f"{source}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable header ({exc})") from None
    specs = header.get("tensors")
    if not isinstance(specs, list):
        raise FormatError(f"{source}: header lacks a tensor list")
    offset = 12 + hlen
    tensors = OrderedDict()
    for name, shape in specs:
        shape = tuple(int(s) for s in shape)
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(data):
            raise FormatError(f"{source}: truncated tensor data at {name!r}")
        arr = np.frombuffer(data, dtype=_DTYPE, count=nbytes // 8, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{source}: {len(data) - offset} trailing bytes after tensor data")
    return header, tensors


def save_model(path, params: Parameters) -> None:
    header = {"kind": "model", "config": params.config.to_dict()}
    atomic_write_bytes(path, encode_container(header, OrderedDict(params.tensors)))


def load_model(path) -> Parameters:
    path = Path(path)
    header, tensors = decode_container(path.read_bytes(), source=path)
    if header.get("kind") != "model":
        raise FormatError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid model config ({exc})") from None
    expected = param_shapes(config)
    if list(tensors) != list(expected):
        raise FormatError(f"{path}: tensor names/order do not match the config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, config implies {shape}")
    return Parameters(config, tensors)
