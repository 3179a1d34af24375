"""Binary label-map (LMAP) and ego-void mask (EVMK) files.

LMAP: ``b"LMAP"``, version byte 1, width and height as ``<u4``, then
``height * width`` panoptic ids as ``<u4`` in row-major order.

EVMK: ``b"EVMK"``, version byte 1, width and height as ``<u4``, then each row
packed 8 pixels per byte (MSB first) and padded to a byte boundary.
"""

import struct
from pathlib import Path

import numpy as np

from ..types import validate_panoptic

LMAP_MAGIC = b"LMAP"
EVMK_MAGIC = b"EVMK"
VERSION = 1
_HEADER = struct.Struct("<4sBII")


class FormatError(ValueError):
    """Bad magic bytes or unsupported version."""


class SizeError(ValueError):
    """Payload length disagrees with the header."""


def encode_lmap(ids: np.ndarray) -> bytes:
    ids = validate_panoptic(ids)
    h, w = ids.shape
    return _HEADER.pack(LMAP_MAGIC, VERSION, w, h) + ids.astype("<u4").tobytes()


def decode_lmap(data: bytes) -> np.ndarray:
    w, h = _read_header(data, LMAP_MAGIC)
    payload = data[_HEADER.size:]
    if len(payload) != 4 * w * h:
        raise SizeError(f"LMAP payload is {len(payload)} bytes, expected {4 * w * h}")
    return np.frombuffer(payload, dtype="<u4").reshape(h, w).astype(np.int32)


def save_lmap(ids: np.ndarray, destination) -> None:
    Path(destination).write_bytes(encode_lmap(ids))


def load_lmap(source) -> np.ndarray:
    return decode_lmap(Path(source).read_bytes())


def encode_mask(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    return _HEADER.pack(EVMK_MAGIC, VERSION, w, h) + np.packbits(mask, axis=1).tobytes()


def decode_mask(data: bytes) -> np.ndarray:
    w, h = _read_header(data, EVMK_MAGIC)
    row_bytes = (w + 7) // 8
    payload = data[_HEADER.size:]
    if len(payload) != row_bytes * h:
        raise SizeError(f"EVMK payload is {len(payload)} bytes, expected {row_bytes * h}")
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1, count=w).astype(bool)


def save_mask(mask: np.ndarray, destination) -> None:
    Path(destination).write_bytes(encode_mask(mask))


def load_mask(source) -> np.ndarray:
    return decode_mask(Path(source).read_bytes())


def _read_header(data: bytes, magic: bytes):
    if len(data) < _HEADER.size:
        if data[:4] != magic[:len(data[:4])]:
            raise FormatError("bad magic bytes")
        raise SizeError("file shorter than header")
    got_magic, version, w, h = _HEADER.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return w, h
