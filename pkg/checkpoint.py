"""
Checkpoint persistence.

Binary layout, all integers little-endian:

    magic        4 bytes  b'V2M1'
    version      u32
    count        u32
    count records:
        name length u16, UTF-8 name
        dtype code  u8   (0 = f32, 1 = f64)
        rank        u8
        dims        rank x u32
        values      raw little-endian, row-major
    config echo  u32 length + UTF-8 JSON (may be empty)

Records keep their insertion order, so save -> load -> save reproduces
the file byte for byte.
"""

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from numerics import ContractError, FormatError, ShapeMismatchError, Tensor, TruncatedPayloadError


logger = logging.getLogger(__name__)

MAGIC = b'V2M1'
FORMAT_VERSION = 1

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}


@dataclass
class Checkpoint:
    tensors: 'OrderedDict[str, Tensor]' = field(default_factory=OrderedDict)
    config_echo: str = ''
    version: int = FORMAT_VERSION


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize a checkpoint to bytes."""
    parts = [MAGIC, struct.pack('<II', checkpoint.version, len(checkpoint.tensors))]
    for name, value in checkpoint.tensors.items():
        value = np.asarray(value)
        if value.dtype not in DTYPE_CODES:
            raise ContractError(f"tensor '{name}' has unsupported dtype {value.dtype}")
        encoded = name.encode('utf-8')
        if len(encoded) > 0xFFFF:
            raise ContractError(f"tensor name too long: {name[:40]}...")
        code = DTYPE_CODES[value.dtype]
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<BB', code, value.ndim))
        parts.append(struct.pack(f'<{value.ndim}I', *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=CODE_DTYPES[code]).tobytes())
    echo = checkpoint.config_echo.encode('utf-8')
    parts.append(struct.pack('<I', len(echo)))
    parts.append(echo)
    return b''.join(parts)


class _Reader:
    """Cursor over a checkpoint payload that reports truncation with the file path."""

    def __init__(self, data: bytes, path: Optional[str]):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise TruncatedPayloadError(f"file ends inside {what} at byte {self.offset}", self.path)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, path: Optional[str] = None) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Args:
        data: file contents
        path: file path used in error messages

    Returns:
        Checkpoint
    """
    reader = _Reader(data, path)
    magic = reader.take(4, 'magic')
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", path)
    version, count = reader.unpack('<II', 'header')
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path)
    tensors: 'OrderedDict[str, Tensor]' = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack('<H', 'record name length')
        try:
            name = reader.take(name_len, 'record name').decode('utf-8')
        except UnicodeDecodeError as e:
            raise FormatError(f"record name is not UTF-8: {e}", path)
        code, rank = reader.unpack('<BB', f"record '{name}'")
        if code not in CODE_DTYPES:
            raise FormatError(f"record '{name}' has unknown dtype code {code}", path)
        dims = reader.unpack(f'<{rank}I', f"record '{name}' dims")
        dtype = CODE_DTYPES[code]
        size = int(np.prod(dims)) if rank else 1
        raw = reader.take(size * dtype.itemsize, f"record '{name}' values")
        value = np.frombuffer(raw, dtype=dtype).reshape(dims)
        tensors[name] = value.astype(dtype.newbyteorder('='))
    echo = ''
    if reader.offset < len(data):
        (echo_len,) = reader.unpack('<I', 'config echo length')
        try:
            echo = reader.take(echo_len, 'config echo').decode('utf-8')
        except UnicodeDecodeError as e:
            raise FormatError(f"config echo is not UTF-8: {e}", path)
    if reader.offset != len(data):
        raise FormatError(f"{len(data) - reader.offset} trailing bytes after the config echo", path)
    return Checkpoint(tensors=tensors, config_echo=echo, version=version)


def save_checkpoint(path: str, tensors: Dict[str, Tensor], config_echo: str = ''):
    """
    Write tensors and the config echo to path.

    Args:
        path: output file
        tensors: name -> array, written in iteration order
        config_echo: resolved configuration text
    """
    payload = encode_checkpoint(Checkpoint(OrderedDict(tensors), config_echo))
    try:
        with open(path, 'wb') as f:
            f.write(payload)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise
    logger.info(f"Checkpoint written to {path} ({len(tensors)} tensors, {len(payload)} bytes)")


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint file."""
    with open(path, 'rb') as f:
        data = f.read()
    checkpoint = decode_checkpoint(data, path)
    logger.info(f"Loaded checkpoint {path} ({len(checkpoint.tensors)} tensors)")
    return checkpoint


def apply_checkpoint(checkpoint: Checkpoint, params) -> None:
    """
    Copy stored values into a model's parameters.

    Args:
        checkpoint: loaded checkpoint
        params: ModelParams (or any object with a name -> Parameter `named()` map)
    """
    named = params.named()
    for name, p in named.items():
        if name not in checkpoint.tensors:
            raise ShapeMismatchError(name, p.value.shape)
        stored = checkpoint.tensors[name]
        if stored.shape != p.value.shape:
            raise ShapeMismatchError(name, p.value.shape, stored.shape)
        p.value = np.ascontiguousarray(stored, dtype=p.value.dtype)
    extra = [name for name in checkpoint.tensors if name not in named]
    if extra:
        raise ShapeMismatchError(extra[0], (), checkpoint.tensors[extra[0]].shape)
