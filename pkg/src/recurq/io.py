"""Binary file formats: DRQM model files, DRQC code files, fvecs vector
files with an integer label sidecar.

All multi-byte fields are little-endian. DRQM and DRQC files end with a
CRC32 of every preceding byte; a mismatch on load raises FileFormatError.
Writes go to a temp file in the target directory and are renamed into place.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .core import DomainError, RqModel, packed_size
from .index import EncodedDatabase

MODEL_MAGIC = b"DRQM"
CODE_MAGIC = b"DRQC"
FORMAT_VERSION = 1


class FileFormatError(ValueError):
    """Corrupt or structurally invalid file."""


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _with_crc(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload))


def _check_crc(data: bytes, path) -> bytes:
    if len(data) < 4:
        raise FileFormatError(f"{path}: truncated file")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise FileFormatError(f"{path}: CRC mismatch, file is corrupt")
    return payload


def save_model(model: RqModel, path) -> None:
    header = MODEL_MAGIC + struct.pack(
        "<HIIIdd",
        FORMAT_VERSION,
        model.k,
        model.dim,
        model.levels,
        model.scale,
        model.gamma,
    )
    body = model.codebook.astype("<f4").tobytes()
    _atomic_write(path, _with_crc(header + body))


def load_model(path) -> RqModel:
    data = Path(path).read_bytes()
    payload = _check_crc(data, path)
    if payload[:4] != MODEL_MAGIC:
        raise FileFormatError(f"{path}: bad magic, not a model file")
    header_len = 4 + struct.calcsize("<HIIIdd")
    version, k, d, m, w, gamma = struct.unpack("<HIIIdd", payload[4:header_len])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    expected = header_len + k * d * 4
    if len(payload) != expected:
        raise FileFormatError(f"{path}: size mismatch for {k}x{d} codebook")
    codebook = np.frombuffer(payload[header_len:], dtype="<f4").reshape(k, d)
    return RqModel(codebook.astype(np.float64), w, gamma, m)


def save_codes(db: EncodedDatabase, path) -> None:
    model = db.model
    header = CODE_MAGIC + struct.pack("<HQII", FORMAT_VERSION, db.n, model.levels, model.k)
    record = packed_size(model.levels, model.k)
    bits = model.k.bit_length() - 1
    parts = [header]
    for row in db.codes:
        value = 0
        for i in row:
            value = (value << bits) | int(i)
        value <<= record * 8 - model.levels * bits
        parts.append(value.to_bytes(record, "big"))
    parts.append(db.recon_sq_norms.astype("<f4").tobytes())
    _atomic_write(path, _with_crc(b"".join(parts)))


def load_codes(path, model: RqModel) -> EncodedDatabase:
    data = Path(path).read_bytes()
    payload = _check_crc(data, path)
    if payload[:4] != CODE_MAGIC:
        raise FileFormatError(f"{path}: bad magic, not a code file")
    header_len = 4 + struct.calcsize("<HQII")
    version, n, m, k = struct.unpack("<HQII", payload[4:header_len])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    if m != model.levels or k != model.k:
        raise FileFormatError(f"{path}: code file (M={m}, K={k}) does not match model")
    record = packed_size(m, k)
    expected = header_len + n * record + 4 * n
    if len(payload) != expected:
        raise FileFormatError(f"{path}: size mismatch for N={n}")
    bits = k.bit_length() - 1
    mask = k - 1
    codes = np.empty((n, m), dtype=np.int64)
    off = header_len
    for r in range(n):
        value = int.from_bytes(payload[off : off + record], "big") >> (record * 8 - m * bits)
        for i in range(m):
            codes[r, i] = (value >> (bits * (m - 1 - i))) & mask
        off += record
    norms = np.frombuffer(payload[off : off + 4 * n], dtype="<f4").astype(np.float64)
    return EncodedDatabase(codes, norms, model, np.arange(n, dtype=np.int64))


def write_fvecs(data: np.ndarray, path) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise DomainError("fvecs data must be 2-D")
    n, d = data.shape
    out = bytearray()
    dim_bytes = struct.pack("<i", d)
    for row in data:
        out += dim_bytes
        out += row.astype("<f4").tobytes()
    _atomic_write(path, bytes(out))


def read_fvecs(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        return np.empty((0, 0), dtype=np.float64)
    (d,) = struct.unpack("<i", raw[:4])
    if d <= 0:
        raise FileFormatError(f"{path}: invalid dimension {d}")
    record = 4 + 4 * d
    if len(raw) % record != 0:
        raise FileFormatError(f"{path}: length not a multiple of the record size")
    n = len(raw) // record
    arr = np.frombuffer(raw, dtype="<f4").reshape(n, d + 1)
    dims = arr[:, 0].view("<i4")
    if not np.all(dims == d):
        raise FileFormatError(f"{path}: inconsistent per-record dimensions")
    return arr[:, 1:].astype(np.float64)


def write_labels(label_sets, path) -> None:
    out = bytearray()
    for s in label_sets:
        ids = sorted(int(i) for i in s)
        out += struct.pack("<i", len(ids))
        for i in ids:
            out += struct.pack("<i", i)
    _atomic_write(path, bytes(out))


def read_labels(path) -> list[frozenset[int]]:
    raw = Path(path).read_bytes()
    sets = []
    off = 0
    while off < len(raw):
        if off + 4 > len(raw):
            raise FileFormatError(f"{path}: truncated label record")
        (count,) = struct.unpack("<i", raw[off : off + 4])
        off += 4
        if count < 0 or off + 4 * count > len(raw):
            raise FileFormatError(f"{path}: invalid label record")
        ids = struct.unpack(f"<{count}i", raw[off : off + 4 * count])
        off += 4 * count
        sets.append(frozenset(ids))
    return sets
