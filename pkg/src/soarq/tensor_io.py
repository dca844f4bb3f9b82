"""Checkpoint loading, packed artifact serialization and run reports.

Packed container layout (all integers little-endian)::

    b"SOQ1"  u16 version  u32 tensor_count
    directory, per tensor:
        u16 name_len, name (utf-8), u8 format (0 nvfp4, 1 mxfp4), u32 block_size,
        u8 ndim, u64 dims[ndim], u64 payload_offset, u64 payload_len
    payloads, per tensor in directory order:
        f32 global scale (nvfp4 only), block-scale bytes, FP4 codes of the
        unpadded elements two per byte (low nibble = even element, high
        nibble = odd element)
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import csv
import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from soarq.block import QuantizedTensor

MAGIC = b"SOQ1"
VERSION = 1
_FORMAT_TAGS = {"nvfp4": 0, "mxfp4": 1}
_TAG_FORMATS = {v: k for k, v in _FORMAT_TAGS.items()}


class CheckpointError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class ArtifactError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class SkippedTensorWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# safetensors input


@dataclass
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    values: np.ndarray  # float64, already reshaped


def _bf16_to_f64(raw: bytes) -> np.ndarray:
    u = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
    return u.view(np.float32).astype(np.float64)


_DTYPES = {
    "F32": ("float32", 4, lambda b: np.frombuffer(b, dtype="<f4").astype(np.float64)),
    "F16": ("float16", 2, lambda b: np.frombuffer(b, dtype="<f2").astype(np.float64)),
    "BF16": ("bfloat16", 2, _bf16_to_f64),
}


def load_checkpoint(path) -> list[TensorRecord]:
    """Read every float32/float16/bfloat16 tensor of a safetensors file as float64.

    Tensors of other dtypes are skipped with a :class:`SkippedTensorWarning`.
    Any structural problem raises :class:`CheckpointError` and nothing is
    returned.
    """
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CheckpointError("file too short for the header length", 0)
    (hlen,) = struct.unpack_from("<Q", data, 0)
    if 8 + hlen > len(data):
        raise CheckpointError(f"header length {hlen} runs past end of file", 0)
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        pos = getattr(e, "pos", getattr(e, "start", 0))
        raise CheckpointError(f"malformed JSON header: {e}", 8 + pos) from None
    if not isinstance(header, dict):
        raise CheckpointError("header is not a JSON object", 8)
    base = 8 + hlen
    records = []
    for name, info in header.items():
        if name == "__metadata__":
            continue
        try:
            dtype = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(v) for v in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"bad header entry for tensor {name!r}", 8) from None
        if any(d < 0 for d in shape) or not (0 <= begin <= end) or base + end > len(data):
            raise CheckpointError(f"data for tensor {name!r} is out of bounds", base + begin)
        if dtype not in _DTYPES:
            warnings.warn(f"skipping tensor {name!r} with unsupported dtype {dtype}", SkippedTensorWarning)
            continue
        label, width, decode = _DTYPES[dtype]
        if end - begin != math.prod(shape) * width:
            raise CheckpointError(f"byte size of tensor {name!r} does not match its shape", base + begin)
        values = decode(data[base + begin : base + end]).reshape(shape)
        records.append(TensorRecord(name, label, shape, values))
    return records


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write float32 tensors as a minimal safetensors file (sorted by name)."""
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + arr.nbytes]}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    hdr = json.dumps(header, separators=(",", ":")).encode()
    hdr += b" " * (-len(hdr) % 8)
    Path(path).write_bytes(struct.pack("<Q", len(hdr)) + hdr + b"".join(chunks))


# ---------------------------------------------------------------------------
# packed artifact


def pack_nibbles(codes: np.ndarray) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(raw: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8)
    out = np.empty(b.size * 2, dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out[:n]


def encode_payload(qt: QuantizedTensor) -> bytes:
    """Scale and code bytes of one tensor exactly as stored in the container."""
    parts = []
    if qt.format == "nvfp4":
        parts.append(struct.pack("<f", qt.global_scale))
    parts.append(qt.block_scales.tobytes())
    parts.append(pack_nibbles(qt.codes[: qt.numel]))
    return b"".join(parts)


def _as_tensor(item) -> QuantizedTensor:
    return item.tensor if hasattr(item, "tensor") else item


def serialize(items) -> bytes:
    tensors = [_as_tensor(x) for x in items]
    payloads = []
    for qt in tensors:
        qt.validate()
        payloads.append(encode_payload(qt))
    directory = []
    offset = 0
    for qt, p in zip(tensors, payloads):
        name = qt.name.encode("utf-8")
        directory.append(struct.pack("<H", len(name)) + name)
        directory.append(struct.pack("<BIB", _FORMAT_TAGS[qt.format], qt.block_size, len(qt.shape)))
        directory.append(struct.pack(f"<{len(qt.shape)}Q", *qt.shape))
        directory.append(struct.pack("<QQ", offset, len(p)))
        offset += len(p)
    body = MAGIC + struct.pack("<HI", VERSION, len(tensors)) + b"".join(directory) + b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, limit: int):
        self.data = data
        self.pos = 0
        self.limit = limit

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.limit:
            raise ArtifactError("truncated artifact", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.limit:
            raise ArtifactError("truncated artifact", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def deserialize(data: bytes) -> list[QuantizedTensor]:
    if len(data) < 14:
        raise ArtifactError("truncated artifact", len(data))
    if data[:4] != MAGIC:
        raise ArtifactError("bad magic", 0)
    limit = len(data) - 4
    (crc,) = struct.unpack_from("<I", data, limit)
    r = _Reader(data, limit)
    r.pos = 4
    (version,) = r.take("<H")
    if version != VERSION:
        raise ArtifactError(f"unsupported version {version}", 4)
    (count,) = r.take("<I")
    if zlib.crc32(data[:limit]) != crc:
        raise ArtifactError("checksum mismatch", limit)
    entries = []
    for _ in range(count):
        entry_pos = r.pos
        (nlen,) = r.take("<H")
        try:
            name = r.raw(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise ArtifactError("tensor name is not utf-8", entry_pos) from None
        tag, block_size, ndim = r.take("<BIB")
        if tag not in _TAG_FORMATS:
            raise ArtifactError(f"unknown format tag {tag}", r.pos - 6)
        if block_size < 1:
            raise ArtifactError("block size must be positive", r.pos - 5)
        shape = r.take(f"<{ndim}Q")
        off, length = r.take("<QQ")
        entries.append((entry_pos, name, _TAG_FORMATS[tag], block_size, shape, off, length))
    base = r.pos
    out = []
    expected_off = 0
    for entry_pos, name, fmt, block_size, shape, off, length in entries:
        if off != expected_off:
            raise ArtifactError(f"payload offset of {name!r} is not contiguous", entry_pos)
        expected_off += length
        numel = math.prod(shape)
        nb = -(-numel // block_size)
        want = (numel + 1) // 2 + nb + (4 if fmt == "nvfp4" else 0)
        if length != want:
            raise ArtifactError(f"payload of {name!r} has {length} bytes, expected {want}", entry_pos)
        r.pos = base + off
        gscale = r.take("<f")[0] if fmt == "nvfp4" else None
        scales = np.frombuffer(r.raw(nb), dtype=np.uint8).copy()
        codes = np.zeros(nb * block_size, dtype=np.uint8)
        codes[:numel] = unpack_nibbles(r.raw((numel + 1) // 2), numel)
        qt = QuantizedTensor(name, shape, fmt, gscale, scales, codes, block_size)
        try:
            qt.validate()
        except ValueError as e:
            raise ArtifactError(f"invalid tensor {name!r}: {e}", base + off) from None
        out.append(qt)
    if base + expected_off != limit:
        raise ArtifactError("trailing bytes after the last payload", base + expected_off)
    return out


def write_packed(path, items) -> None:
    Path(path).write_bytes(serialize(items))


def read_packed(path) -> list[QuantizedTensor]:
    return deserialize(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# reports


def report_records(results) -> list[dict]:
    return [
        {
            "name": r.tensor.name,
            "shape": list(r.tensor.shape),
            "method": r.method,
            "format": r.tensor.format,
            "mse": r.mse,
            "iterations": r.iterations,
            "bytes": r.tensor.payload_nbytes(),
        }
        for r in results
    ]


def write_report(path, results) -> None:
    """JSON report, one record per tensor.  Floats are written with round-trip precision."""
    doc = {"records": report_records(results)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


TRACE_COLUMNS = ["tensor", "iteration", "loss_after_cjso", "loss_after_dss", "rel_improvement"]


def write_trace(path, results) -> None:
    """CSV of per-iteration losses (wall time is left out so files are reproducible)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in results:
            for rec in r.trace:
                w.writerow(
                    [r.tensor.name, rec.iteration, repr(rec.loss_after_cjso), repr(rec.loss_after_dss),
                     repr(rec.rel_improvement)]
                )
