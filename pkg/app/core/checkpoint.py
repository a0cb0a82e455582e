"""
XVFG checkpoint format.

    magic  b"XVFG"
    u16    format version
    u32    entry count
    entry  u16 name length, utf-8 name, u8 dtype code, u8 rank, u32 dims[rank],
           little-endian C-order payload
    u32    CRC32 of everything above

All integers are little-endian.
"""
import json
import logging
import os
import struct
import zlib
from typing import Any, Dict, Iterable, Mapping, Tuple, Union

import numpy as np

from app.core.errors import CheckpointError


logger = logging.getLogger(__name__)

MAGIC = b"XVFG"
VERSION = 1
DTYPE_CODES = {
    np.dtype("float64"): 1,
    np.dtype("float32"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}
META_PREFIX = "meta/"

Entries = Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]


def _items(tensors: Entries) -> Iterable[Tuple[str, np.ndarray]]:
    return tensors.items() if isinstance(tensors, Mapping) else tensors


def encode_checkpoint(tensors: Entries) -> bytes:
    entries = list(_items(tensors))
    names = set()
    body = bytearray(MAGIC)
    body += struct.pack("<HI", VERSION, len(entries))
    for name, value in entries:
        if name in names:
            raise CheckpointError(f"Duplicate tensor name '{name}'")
        names.add(name)
        value = np.asarray(value)
        dtype = value.dtype.newbyteorder("=")
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"Tensor '{name}' has unsupported dtype {value.dtype}")
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        body += struct.pack("<BB", DTYPE_CODES[dtype], value.ndim)
        body += struct.pack(f"<{value.ndim}I", *value.shape)
        body += np.ascontiguousarray(value, dtype=dtype.newbyteorder("<")).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if len(data) < len(MAGIC) + 10 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not an XVFG checkpoint (bad magic)")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: CRC mismatch, file is corrupt")

    offset = len(MAGIC)
    version, count = struct.unpack_from("<HI", payload, offset)
    offset += 6
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version} is not supported (expected {VERSION})")

    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset: offset + name_len].decode("utf-8")
            offset += name_len
            code, rank = struct.unpack_from("<BB", payload, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            if code not in CODE_DTYPES:
                raise CheckpointError(f"{source}: tensor '{name}' has unknown dtype code {code}")
            dtype = CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointError(f"{source}: tensor '{name}' runs past the end of the file")
            if name in tensors:
                raise CheckpointError(f"{source}: duplicate tensor name '{name}'")
            raw = np.frombuffer(payload, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize, offset=offset)
            tensors[name] = raw.astype(dtype).reshape(dims)
            offset += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{source}: malformed entry table: {e}") from e
    if offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - offset} trailing bytes after the last entry")
    return tensors


def save_checkpoint(path: str, tensors: Entries) -> None:
    data = encode_checkpoint(tensors)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(data)
    logger.info(f"Saved checkpoint {path} ({len(data)} bytes)")


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    tensors = decode_checkpoint(data, source=path)
    logger.info(f"Loaded checkpoint {path} ({len(tensors)} tensors)")
    return tensors


def pack_json(value: Any) -> np.ndarray:
    """JSON document stored as a uint8 tensor"""
    return np.frombuffer(json.dumps(value, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(tensor: np.ndarray) -> Any:
    try:
        return json.loads(np.asarray(tensor, dtype=np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Metadata tensor is not valid JSON: {e}") from e


def split_meta(tensors: Mapping[str, np.ndarray]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    meta = {name[len(META_PREFIX):]: unpack_json(v) for name, v in tensors.items() if name.startswith(META_PREFIX)}
    rest = {name: v for name, v in tensors.items() if not name.startswith(META_PREFIX)}
    return meta, rest
