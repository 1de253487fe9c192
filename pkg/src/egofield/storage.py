"""Binary and text persistence: ESTF tensors, PPM images, CSV reports.

ESTF layout (little-endian, no padding)::

    magic   4 bytes  b"ESTF"
    version u16
    dtype   u8       0=f32 1=f64 2=u8 3=u32
    ndim    u8
    dims    ndim x u32
    payload row-major values
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"ESTF"
VERSION = 1

_CODE_TO_DTYPE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<u4"),
}
_KIND_TO_CODE = {("f", 4): 0, ("f", 8): 1, ("u", 1): 2, ("u", 4): 3}


class StorageError(ValueError):
    """Raised on malformed or unsupported files."""


def _dtype_code(dtype: np.dtype) -> int:
    try:
        return _KIND_TO_CODE[(dtype.kind, dtype.itemsize)]
    except KeyError:
        raise StorageError(f"unsupported dtype {dtype}") from None


def encode_tensor(data: np.ndarray) -> bytes:
    arr = np.asarray(data)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    code = _dtype_code(arr.dtype)
    if arr.ndim < 1 or arr.ndim > 255:
        raise StorageError("ndim must be in [1, 255]")
    if any(n <= 0 for n in arr.shape):
        raise StorageError(f"all dims must be > 0, got {arr.shape}")
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise StorageError("bad magic")
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise StorageError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise StorageError(f"unsupported dtype code {code}")
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise StorageError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    dtype = _CODE_TO_DTYPE[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off < nbytes:
        raise StorageError("truncated payload")
    if len(buf) - off > nbytes:
        raise StorageError("trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path: str | Path, data: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(data))


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_map(path: str | Path, data: np.ndarray) -> None:
    """Float maps go to disk as f32."""
    write_tensor(path, np.asarray(data, dtype=np.float32))


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Write an H x W x 3 image; floats are taken to be in [0, 1]."""
    img = to_uint8(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise StorageError(f"expected HxWx3 image, got {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise StorageError("malformed header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise StorageError("malformed header")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise StorageError("malformed header") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise StorageError("malformed header")
    need = w * h * 3
    if len(buf) - pos < need:
        raise StorageError("truncated payload")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fmt(value: object) -> object:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_manifest(path: str | Path, entries: dict[str, object]) -> None:
    """Plain ``key=value`` lines, sorted for stable bytes."""
    lines = [f"{k}={_fmt(v)}" for k, v in sorted(entries.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise StorageError(f"malformed manifest line: {line!r}")
        out[key.strip()] = value.strip()
    return out
