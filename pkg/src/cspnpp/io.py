"""Raster file formats.

Depth rasters are binary PGM (``P5``) with maxval 65535 and big-endian
samples. A sample ``v`` encodes ``v / 256`` metres; ``v = 0`` marks an
invalid pixel. In memory depths are millimetres.

Float rasters (``.cspf``) store any ``H x W x C`` float64 array losslessly::

    b"CSPF" | u32 version | u32 height | u32 width | u32 channels | f64 data

All integers and floats are little-endian; data are row-major with the
channel index fastest. Writes go to a temporary file that is renamed into
place.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .exceptions import FormatError, RangeError
from .grid import AssemblyWeights, PropagationConfig

__all__ = [
    "encode_depth",
    "decode_depth",
    "write_pgm",
    "read_pgm",
    "write_depth_raster",
    "read_depth_raster",
    "write_mask_raster",
    "read_mask_raster",
    "write_float_raster",
    "read_float_raster",
    "atomic_write_bytes",
    "atomic_write_text",
    "pack_weights",
    "unpack_weights",
]

PathLike = Union[str, os.PathLike]

DEPTH_COMMENT = "depth: value/256 = metres, 0 = invalid"
CSPF_MAGIC = b"CSPF"
CSPF_VERSION = 1
_CSPF_HEADER = struct.Struct("<4sIIII")


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_depth(depth_mm, valid=None) -> np.ndarray:
    """Millimetres to ``uint16`` samples (``round(metres * 256)``).

    Pixels are invalid where ``valid`` is false, or, if ``valid`` is None,
    where the depth is not positive.

    Raises
    ------
    RangeError
        If a valid depth is negative, not finite, at least 256 m, or too small
        to be told apart from the invalid code.
    """
    depth_mm = np.asarray(depth_mm, dtype=np.float64)
    valid = depth_mm > 0 if valid is None else np.asarray(valid, dtype=bool)
    d = depth_mm[valid]
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise RangeError("valid depths must be finite and non-negative")
    v = np.floor(d / 1000.0 * 256.0 + 0.5)
    if np.any(v > 65535):
        raise RangeError(f"depth {d[v > 65535].max() / 1000:.3f} m exceeds the 256 m range")
    if np.any(v == 0):
        raise RangeError("a valid depth below 1/512 m would encode as invalid")
    out = np.zeros(depth_mm.shape, dtype=np.uint16)
    out[valid] = v.astype(np.uint16)
    return out


def decode_depth(samples) -> Tuple[np.ndarray, np.ndarray]:
    """``uint16`` samples to ``(depth_mm, valid)``."""
    s = np.asarray(samples)
    valid = s > 0
    return s.astype(np.float64) / 256.0 * 1000.0, valid


def write_pgm(path: PathLike, samples, maxval: int = 65535, comment: str = "") -> None:
    s = np.asarray(samples)
    if s.ndim != 2:
        raise ValueError("PGM holds a single 2-D channel")
    if s.min(initial=0) < 0 or s.max(initial=0) > maxval:
        raise RangeError(f"samples outside [0, {maxval}]")
    header = b"P5\n"
    if comment:
        header += b"# " + comment.encode("ascii") + b"\n"
    header += f"{s.shape[1]} {s.shape[0]}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    atomic_write_bytes(path, header + s.astype(dtype).tobytes())


def _parse_header(data: bytes):
    """Return ``(width, height, maxval, data_offset)`` of a P5 file."""
    if data[:2] != b"P5":
        raise FormatError("bad magic, expected b'P5'", 0)
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(data):
            raise FormatError("truncated header", pos)
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise FormatError("unterminated comment", pos)
            pos = nl + 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            values.append(int(data[start:pos]))
        else:
            raise FormatError(f"unexpected byte {ch!r} in header", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", pos)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError("non-positive image size", pos)
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range", pos)
    return width, height, maxval, pos + 1


def read_pgm(path: PathLike) -> Tuple[np.ndarray, int]:
    """Read a binary PGM; returns ``(samples, maxval)``.

    Raises
    ------
    FormatError
        On a bad magic number, malformed header or truncated pixel data.
    """
    data = Path(path).read_bytes()
    width, height, maxval, off = _parse_header(data)
    bps = 2 if maxval > 255 else 1
    need = width * height * bps
    if len(data) - off < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(data) - off}",
                          len(data))
    dtype = ">u2" if bps == 2 else "u1"
    samples = np.frombuffer(data, dtype=dtype, count=width * height, offset=off)
    return samples.reshape(height, width).astype(np.uint16), maxval


def write_depth_raster(path: PathLike, depth_mm, valid=None) -> None:
    """Write a 16-bit depth PGM; see :func:`encode_depth` for validity rules."""
    write_pgm(path, encode_depth(depth_mm, valid), 65535, DEPTH_COMMENT)


def read_depth_raster(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Read a depth PGM into ``(depth_mm, valid)``."""
    samples, maxval = read_pgm(path)
    if maxval != 65535:
        raise FormatError(f"depth raster must have maxval 65535, got {maxval}", 0)
    return decode_depth(samples)


def write_mask_raster(path: PathLike, mask) -> None:
    """8-bit PGM with 255 for true and 0 for false."""
    write_pgm(path, np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8), 255, "mask")


def read_mask_raster(path: PathLike) -> np.ndarray:
    samples, _ = read_pgm(path)
    return samples > 0


def write_float_raster(path: PathLike, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"float raster must be 2-D or 3-D, got {arr.shape}")
    h, w, c = arr.shape
    header = _CSPF_HEADER.pack(CSPF_MAGIC, CSPF_VERSION, h, w, c)
    atomic_write_bytes(path, header + np.ascontiguousarray(arr).astype("<f8").tobytes())


def read_float_raster(path: PathLike) -> np.ndarray:
    """Read a ``.cspf`` file into an ``(H, W, C)`` float64 array.

    Raises
    ------
    FormatError
        On a bad magic, unknown version, or a byte length other than
        ``20 + 8*H*W*C``.
    """
    data = Path(path).read_bytes()
    if len(data) < _CSPF_HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, h, w, c = _CSPF_HEADER.unpack_from(data)
    if magic != CSPF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CSPF_MAGIC!r}", 0)
    if version != CSPF_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = _CSPF_HEADER.size + 8 * h * w * c
    if len(data) != expected:
        raise FormatError(f"length {len(data)} != expected {expected}", min(len(data), expected))
    arr = np.frombuffer(data, dtype="<f8", offset=_CSPF_HEADER.size).reshape(h, w, c)
    return arr.astype(np.float64)


def pack_weights(weights: AssemblyWeights, confidence_logits=None) -> np.ndarray:
    """Stack alpha logits, lambda logits (kernel-major) and optionally the
    confidence logits into one ``(H, W, K + K*T [+ 1])`` array."""
    h, w, K, T = weights.lambda_logits.shape
    parts = [weights.alpha_logits, weights.lambda_logits.reshape(h, w, K * T)]
    if confidence_logits is not None:
        parts.append(np.asarray(confidence_logits, dtype=np.float64)[..., None])
    return np.concatenate(parts, axis=-1)


def unpack_weights(array, config: PropagationConfig):
    """Inverse of :func:`pack_weights`; returns ``(weights, confidence_logits or None)``.

    Raises
    ------
    FormatError
        If the channel count is neither ``K + K*T`` nor ``K + K*T + 1``.
    """
    arr = np.asarray(array, dtype=np.float64)
    K, T = config.n_kernels, config.n_checkpoints
    n = K + K * T
    if arr.ndim != 3 or arr.shape[-1] not in (n, n + 1):
        raise FormatError(f"weights need {n} or {n + 1} channels for K={K}, T={T}, "
                          f"got shape {arr.shape}", 0)
    h, w = arr.shape[:2]
    weights = AssemblyWeights(arr[..., :K].copy(), arr[..., K:n].reshape(h, w, K, T).copy())
    conf = arr[..., n].copy() if arr.shape[-1] == n + 1 else None
    return weights, conf
