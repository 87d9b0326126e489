"""Dense array files, PGM label maps and the seeded RNG tree.

Tensor files (``.rgtf``) use a small fixed little-endian layout::

    magic   4 bytes  b"RGTF"
    version u8       1
    dtype   u8       0 = float32, 1 = uint8
    ndim    u32      1..4
    dims    u32 * ndim
    payload row-major, little-endian

Tensors are plain :class:`numpy.ndarray` objects; the reader returns
read-only arrays so they can be shared between workers.
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

MAGIC = b"RGTF"
VERSION = 1
MAX_NDIM = 4

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class TensorFormatError(ValueError):
    """Base class for malformed tensor or PGM files."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class DimsOverflowError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class NonFiniteTensorError(ValueError):
    pass


def write_tensor(array, path) -> None:
    """Write a float32 or uint8 array of at most four axes to ``path``."""
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"dtype {arr.dtype} not in (float32, uint8)")
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise DimsOverflowError(f"ndim {arr.ndim} outside 1..{MAX_NDIM}")
    if any(n > 0xFFFFFFFF for n in arr.shape):
        raise DimsOverflowError(f"extent too large for u32: {arr.shape}")
    if arr.dtype == np.float32 and not np.all(np.isfinite(arr)):
        raise NonFiniteTensorError("refusing to write NaN/Inf values")
    header = MAGIC + struct.pack("<BBI", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise BadMagicError("missing RGTF magic")
    version, code, ndim = struct.unpack_from("<BBI", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version}")
    if code not in _CODE_DTYPES:
        raise UnsupportedDtypeError(f"dtype code {code}")
    if ndim < 1 or ndim > MAX_NDIM:
        raise DimsOverflowError(f"ndim {ndim} outside 1..{MAX_NDIM}")
    offset = 10
    if len(buf) < offset + 4 * ndim:
        raise TruncatedPayloadError("header shorter than ndim implies")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _CODE_DTYPES[code]
    count = 1
    for n in dims:
        count *= n
    nbytes = count * dtype.itemsize
    if nbytes > 1 << 40:
        raise DimsOverflowError(f"dims {dims} imply {nbytes} bytes")
    if len(buf) - offset < nbytes:
        raise TruncatedPayloadError(f"expected {nbytes} payload bytes, got {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=False)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def write_pgm(labels, path) -> None:
    """Write a 2-D uint8 label map as binary PGM (P5, maxval 255)."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D map, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("PGM values must lie in 0..255")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _pgm_tokens(buf: bytes, n: int):
    """Yield the first ``n`` whitespace-separated header tokens and the payload offset."""
    tokens = []
    i = 0
    while len(tokens) < n:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise TruncatedPayloadError("PGM header ended early")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates header from raster
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise BadMagicError(f"expected binary PGM (P5), got {buf[:2]!r}")
    tokens, offset = _pgm_tokens(buf, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise TensorFormatError(f"bad PGM header: {exc}") from None
    if maxval != 255:
        raise TensorFormatError(f"PGM maxval must be 255, got {maxval}")
    if len(buf) - offset < w * h:
        raise TruncatedPayloadError(f"expected {w * h} raster bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)


def _label_hash(stream: int, label: str) -> int:
    digest = hashlib.blake2b(
        struct.pack("<Q", stream) + label.encode("utf-8"), digest_size=8
    ).digest()
    return struct.unpack("<Q", digest)[0]


class SeededRng:
    """Counter-based random stream identified by ``(seed, stream)``.

    Backed by Philox keyed with both 64-bit words, so a stream is a pure
    function of its identifiers on every platform. Children are derived by
    hashing a label into the stream id; deriving never advances the parent.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        )

    def derive(self, label: str) -> "SeededRng":
        return SeededRng(self.seed, _label_hash(self.stream, label))

    def derive_path(self, path: str) -> "SeededRng":
        """Derive through a ``/``-separated label path, e.g. ``"pool/epoch-3/step-1"``."""
        rng = self
        for part in path.split("/"):
            rng = rng.derive(part)
        return rng

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream:#018x})"


def rng_derive(rng: SeededRng, label: str) -> SeededRng:
    """Child stream for ``label``; ``/`` separates nested labels."""
    return rng.derive_path(label)


def as_rng(seed_or_rng) -> SeededRng:
    if isinstance(seed_or_rng, SeededRng):
        return seed_or_rng
    if seed_or_rng is None:
        return SeededRng(0)
    return SeededRng(int(seed_or_rng))


def save_named_tensors(tensors: dict, directory, manifest_name: str = "manifest.txt") -> None:
    """Write ``name -> array`` as ``<name>.rgtf`` files plus a manifest listing them."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        write_tensor(arr, os.path.join(directory, f"{name}.rgtf"))
        lines.append(f"{name}\t{arr.dtype.name}\t{'x'.join(map(str, arr.shape))}")
    with open(os.path.join(directory, manifest_name), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_named_tensors(directory, manifest_name: str = "manifest.txt") -> dict:
    out = {}
    with open(os.path.join(directory, manifest_name)) as fh:
        for line in fh:
            if line.strip():
                name = line.split("\t", 1)[0]
                out[name] = read_tensor(os.path.join(directory, f"{name}.rgtf"))
    return out
