"""
ICLT binary tensor container.

Layout (all little-endian):
    magic "ICLT" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | dtype u8 (0 = f32, 1 = f64)
               | ndim u32 | dims u64 * ndim | payload
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from lab.autodiff import Tensor
from lab.core.exceptions import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"ICLT"
VERSION = 1

DTYPE_CODES = {"f32": 0, "f64": 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _as_array(value: Union[np.ndarray, Tensor]) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def encode_tensors(tensors: Mapping[str, Union[np.ndarray, Tensor]], dtype: str = "f32") -> bytes:
    if dtype not in DTYPE_CODES:
        raise ValueError(f"dtype must be one of {sorted(DTYPE_CODES)}")
    code = DTYPE_CODES[dtype]
    np_dtype = CODE_DTYPES[code]
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(_as_array(value), dtype=np_dtype)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_tensors(path: Union[str, Path], tensors: Mapping[str, Union[np.ndarray, Tensor]],
                 dtype: str = "f32") -> Path:
    """Write named tensors; f64 round-trips bit-exactly"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors, dtype))
    logger.debug(f"Wrote {len(tensors)} tensors to {path} ({dtype})")
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def decode_tensors(buf: bytes) -> Dict[str, np.ndarray]:
    r = _Reader(buf)
    magic = r.read(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    (count,) = r.unpack("<I", "entry count")

    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_offset = r.pos
        (name_len,) = r.unpack("<I", "name length")
        raw = r.read(name_len, "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", entry_offset + 4)
        if name in out:
            raise FormatError(f"duplicate entry name {name!r}", entry_offset)
        code_offset = r.pos
        (code,) = r.unpack("<B", "dtype code")
        if code not in CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", code_offset)
        (ndim,) = r.unpack("<I", "ndim")
        dims = r.unpack(f"<{ndim}Q", "dims") if ndim else ()
        np_dtype = CODE_DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize
        payload = r.read(n_bytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=np_dtype).reshape(dims).copy()

    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last entry", r.pos)
    return out


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read every entry, in file order"""
    path = Path(path)
    tensors = decode_tensors(path.read_bytes())
    logger.debug(f"Read {len(tensors)} tensors from {path}")
    return tensors
