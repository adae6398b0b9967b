# maskrouter/utils/mask_io.py
"""Bit-exact files for masks, scores, heads and backbones.

Mask file (little-endian throughout):

    b"S3RM" | u16 version | u32 layer_count
    per layer: u16 name_len | name (UTF-8) | u64 numel | u64 keep_count
               | ceil(numel/8) bytes, element e at bit (e % 8) of byte e // 8
    u32 CRC-32 (IEEE, reflected 0xEDB88320) over every preceding byte

Scores files (b"S3RS") use the same framing with a float64 payload in place
of the packed bits. Backbone (b"S3RB") and head (b"S3RH") checkpoints store
shaped float64 tensor records. Every file is written to a temporary sibling
and renamed into place.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from maskrouter.engine.model import Backbone, ModelConfig, TaskHead
from maskrouter.engine.tensor import Tensor
from maskrouter.utils.errors import (
    BadMagicError,
    ChecksumError,
    FormatError,
    PadBitsError,
    PopcountError,
    TruncatedFileError,
    UnsupportedVersionError,
    UsageError,
)

logger = logging.getLogger("maskrouter.mask_io")

MASK_MAGIC = b"S3RM"
SCORES_MAGIC = b"S3RS"
BACKBONE_MAGIC = b"S3RB"
HEAD_MAGIC = b"S3RH"
VERSION = 1

_HEADER = struct.Struct("<4sHI")      # magic, version, count
_RECORD = struct.Struct("<QQ")        # numel, keep_count
HEADER_SIZE = _HEADER.size            # 10
TRAILER_SIZE = 4


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def pack_bits(mask: Sequence[int] | np.ndarray) -> bytes:
    """LSB-first packing of a flat 0/1 sequence into ceil(n/8) bytes"""
    flat = np.asarray(mask).reshape(-1)
    if flat.size and not np.isin(flat, (0, 1)).all():
        raise FormatError("mask values must be 0 or 1")
    return np.packbits(flat.astype(np.uint8), bitorder="little").tobytes()


def unpack_bits(data: bytes, numel: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    return bits[:numel].astype(np.float64)


def atomic_write(path: str | Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read_file(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    return path.read_bytes()


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", crc32(body))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.what}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.what}: layer name is not UTF-8") from None


def _open_frame(data: bytes, magic: bytes, what: str) -> tuple[_Reader, int]:
    """Check magic, version and CRC; return a reader over the body and the record count"""
    if len(data) < HEADER_SIZE + TRAILER_SIZE:
        raise TruncatedFileError(f"{what}: only {len(data)} bytes")
    found, version, count = _HEADER.unpack_from(data)
    if found != magic:
        raise BadMagicError(f"{what}: bad magic {found!r}, expected {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{what}: unsupported version {version}")
    body, (stored,) = data[:-TRAILER_SIZE], struct.unpack("<I", data[-TRAILER_SIZE:])
    if crc32(body) != stored:
        raise ChecksumError(f"{what}: CRC mismatch (stored {stored:#010x}, computed {crc32(body):#010x})")
    reader = _Reader(body, what)
    reader.pos = HEADER_SIZE
    return reader, count


def _close_frame(reader: _Reader) -> None:
    if reader.pos != len(reader.data):
        raise FormatError(f"{reader.what}: {len(reader.data) - reader.pos} unexpected trailing bytes")


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


# Masks

def encode_masks(masks: Mapping[str, np.ndarray]) -> bytes:
    parts = [_HEADER.pack(MASK_MAGIC, VERSION, len(masks))]
    for name, mask in masks.items():
        flat = np.asarray(mask).reshape(-1)
        packed = pack_bits(flat)
        parts += [_name_bytes(name), _RECORD.pack(flat.size, int(np.count_nonzero(flat))), packed]
    return _seal(b"".join(parts))


def _layer_shape(name: str, numel: int, shapes: Mapping[str, Sequence[int]]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shapes[name])
    if int(np.prod(shape)) != numel:
        raise FormatError(f"layer {name}: file holds {numel} elements, model shape {shape} needs {int(np.prod(shape))}")
    return shape


def decode_masks(data: bytes, shapes: Mapping[str, Sequence[int]] | None = None) -> dict[str, np.ndarray]:
    """Masks from file bytes; flat unless ``shapes`` names a layer's shape"""
    reader, count = _open_frame(data, MASK_MAGIC, "mask file")
    masks = {}
    for _ in range(count):
        name = reader.name()
        numel, keep = reader.unpack(_RECORD)
        packed = reader.take((numel + 7) // 8)
        bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), bitorder="little")
        if bits[numel:].any():
            raise PadBitsError(f"layer {name}: nonzero pad bits")
        mask = bits[:numel].astype(np.float64)
        if int(mask.sum()) != keep:
            raise PopcountError(f"layer {name}: popcount {int(mask.sum())} != keep_count {keep}")
        if shapes is not None and name in shapes:
            mask = mask.reshape(_layer_shape(name, numel, shapes))
        masks[name] = mask
    _close_frame(reader)
    return masks


def mask_file_size(masks: Mapping[str, np.ndarray]) -> int:
    size = HEADER_SIZE + TRAILER_SIZE
    for name, mask in masks.items():
        numel = int(np.asarray(mask).size)
        size += 2 + len(name.encode("utf-8")) + _RECORD.size + (numel + 7) // 8
    return size


def save_masks(masks: Mapping[str, np.ndarray], path: str | Path) -> Path:
    out = atomic_write(path, encode_masks(masks))
    logger.info(f"Saved {len(masks)} layer masks to {out}")
    return out


def load_masks(path: str | Path, shapes: Mapping[str, Sequence[int]] | None = None) -> dict[str, np.ndarray]:
    return decode_masks(_read_file(path), shapes)


# Scores (same framing, float64 payload; keep_count records the budget in force)

def encode_scores(scores: Mapping[str, np.ndarray], keep_counts: Mapping[str, int]) -> bytes:
    parts = [_HEADER.pack(SCORES_MAGIC, VERSION, len(scores))]
    for name, arr in scores.items():
        flat = np.asarray(arr, dtype="<f8").reshape(-1)
        parts += [_name_bytes(name), _RECORD.pack(flat.size, int(keep_counts[name])), flat.tobytes()]
    return _seal(b"".join(parts))


def decode_scores(data: bytes, shapes: Mapping[str, Sequence[int]] | None = None) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    reader, count = _open_frame(data, SCORES_MAGIC, "scores file")
    scores, keep_counts = {}, {}
    for _ in range(count):
        name = reader.name()
        numel, keep = reader.unpack(_RECORD)
        if keep > numel:
            raise PopcountError(f"layer {name}: keep_count {keep} exceeds numel {numel}")
        arr = np.frombuffer(reader.take(8 * numel), dtype="<f8").astype(np.float64)
        if shapes is not None and name in shapes:
            arr = arr.reshape(_layer_shape(name, numel, shapes))
        scores[name], keep_counts[name] = arr, keep
    _close_frame(reader)
    return scores, keep_counts


def save_scores(scores: Mapping[str, np.ndarray], keep_counts: Mapping[str, int], path: str | Path) -> Path:
    return atomic_write(path, encode_scores(scores, keep_counts))


def load_scores(path: str | Path, shapes=None) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    return decode_scores(_read_file(path), shapes)


# Shaped float64 tensors (backbone, head)

def _encode_tensors(tensors: Mapping[str, Tensor]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        parts += [_name_bytes(name), struct.pack("<B", t.data.ndim)]
        parts += [struct.pack("<Q", dim) for dim in t.shape]
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def _decode_tensors(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = reader.unpack("<I")
    out = {}
    for _ in range(count):
        name = reader.name()
        (ndim,) = reader.unpack("<B")
        shape = tuple(reader.unpack(f"<{ndim}Q")) if ndim else ()
        numel = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(reader.take(8 * numel), dtype="<f8").astype(np.float64).reshape(shape)
    return out


def encode_backbone(backbone: Backbone) -> bytes:
    config = backbone.cfg.model_dump_json().encode("utf-8")
    body = (_HEADER.pack(BACKBONE_MAGIC, VERSION, len(config)) + config
            + struct.pack("<B", int(backbone.frozen)) + _encode_tensors(backbone.params))
    return _seal(body)


def decode_backbone(data: bytes) -> Backbone:
    reader, config_len = _open_frame(data, BACKBONE_MAGIC, "backbone checkpoint")
    try:
        cfg = ModelConfig.model_validate(json.loads(reader.take(config_len).decode("utf-8")))
    except ValueError as e:
        raise FormatError(f"backbone checkpoint: bad config ({e})") from e
    (frozen,) = reader.unpack("<B")
    arrays = _decode_tensors(reader)
    _close_frame(reader)
    return Backbone(cfg, {n: Tensor(a, name=n) for n, a in arrays.items()}, frozen=bool(frozen))


def save_backbone(backbone: Backbone, path: str | Path) -> Path:
    out = atomic_write(path, encode_backbone(backbone))
    logger.info(f"Saved backbone ({backbone.num_parameters} params, frozen={backbone.frozen}) to {out}")
    return out


def load_backbone(path: str | Path) -> Backbone:
    return decode_backbone(_read_file(path))


def encode_head(head: TaskHead) -> bytes:
    return _seal(_HEADER.pack(HEAD_MAGIC, VERSION, 0) + _encode_tensors(head.params()))


def decode_head(data: bytes) -> TaskHead:
    reader, _ = _open_frame(data, HEAD_MAGIC, "head file")
    arrays = _decode_tensors(reader)
    _close_frame(reader)
    try:
        return TaskHead(Tensor(arrays["head.W"], requires_grad=True, name="head.W"),
                        Tensor(arrays["head.b"], requires_grad=True, name="head.b"))
    except KeyError as e:
        raise FormatError(f"head file: missing tensor {e}") from None


def save_head(head: TaskHead, path: str | Path) -> Path:
    return atomic_write(path, encode_head(head))


def load_head(path: str | Path) -> TaskHead:
    return decode_head(_read_file(path))


def file_crc(path: str | Path) -> int:
    return crc32(_read_file(path))
