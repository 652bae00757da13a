"""Persistence: volume container, PGM slice export, checkpoints, run reports.

The volume container is a minimal binary format: magic "ISOV", a u16
version, a u8 dtype code (0 = float32 LE, 1 = uint8), three u32 dims
(z, y, x), then the raw payload, z-major and row-major within a slice.
Checkpoints store a JSON header (schedule, architecture, training metadata)
followed by named float32 tensor records. All writes go through a temp file
plus rename, so interrupted runs never leave a half-written artifact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .core import Image2D, Volume3D, canonical_from_uint8, uint8_from_canonical
from .denoiser import TinyDenoiser
from .schedule import NoiseSchedule, linear_schedule

__all__ = [
    "FormatError",
    "IncompatibleCheckpointError",
    "write_volume",
    "read_volume",
    "read_raw_uint8_volume",
    "export_slice_pgm",
    "import_slice_pgm",
    "store_checkpoint",
    "load_checkpoint",
    "write_report",
]

_VOLUME_MAGIC = b"ISOV"
_VOLUME_VERSION = 1
_VOLUME_HEADER = struct.Struct("<4sHBIII")
_DTYPE_FLOAT32 = 0
_DTYPE_UINT8 = 1

_CKPT_MAGIC = b"ISCK"
_CKPT_VERSION = 1


class FormatError(Exception):
    """A malformed file; carries the path and byte offset of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class IncompatibleCheckpointError(Exception):
    """Checkpoint contents do not match the architecture they declare."""


def _atomic_write(path, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".isorec-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(path, vol: Volume3D, dtype: str = "float32"):
    """Write a volume; float32 round trips exactly, uint8 maps through [-1, 1]."""
    if dtype == "float32":
        code = _DTYPE_FLOAT32
        payload = vol.data.astype("<f4").tobytes()
    elif dtype == "uint8":
        code = _DTYPE_UINT8
        payload = uint8_from_canonical(vol.data).tobytes()
    else:
        raise ValueError(f"dtype must be 'float32' or 'uint8', got {dtype!r}")
    header = _VOLUME_HEADER.pack(
        _VOLUME_MAGIC, _VOLUME_VERSION, code, vol.depth, vol.height, vol.width
    )
    _atomic_write(path, header + payload)


def read_volume(path) -> Volume3D:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _VOLUME_HEADER.size:
        raise FormatError(path, len(blob), "file shorter than the fixed header")
    magic, version, code, nz, ny, nx = _VOLUME_HEADER.unpack_from(blob, 0)
    if magic != _VOLUME_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {_VOLUME_MAGIC!r}")
    if version != _VOLUME_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if code not in (_DTYPE_FLOAT32, _DTYPE_UINT8):
        raise FormatError(path, 6, f"unknown dtype code {code}")
    if min(nz, ny, nx) < 1:
        raise FormatError(path, 7, f"non-positive dims ({nz}, {ny}, {nx})")
    item = 4 if code == _DTYPE_FLOAT32 else 1
    expected = nz * ny * nx * item
    actual = len(blob) - _VOLUME_HEADER.size
    if actual != expected:
        raise FormatError(
            path,
            _VOLUME_HEADER.size,
            f"payload holds {actual} bytes, expected {expected}",
        )
    raw = blob[_VOLUME_HEADER.size :]
    if code == _DTYPE_FLOAT32:
        data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        data = canonical_from_uint8(np.frombuffer(raw, dtype=np.uint8))
    return Volume3D(data.reshape(nz, ny, nx))


def read_raw_uint8_volume(path, dims_path=None) -> Volume3D:
    """Import a headerless uint8 dump with a sidecar text file holding 'z y x'."""
    dims_path = dims_path if dims_path is not None else f"{path}.dims"
    try:
        tokens = open(dims_path, "r", encoding="ascii").read().split()
        nz, ny, nx = (int(t) for t in tokens)
    except (OSError, ValueError) as err:
        raise FormatError(dims_path, 0, f"unreadable dims sidecar: {err}") from err
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != nz * ny * nx:
        raise FormatError(path, 0, f"payload holds {raw.size} bytes, expected {nz * ny * nx}")
    return Volume3D(canonical_from_uint8(raw).reshape(nz, ny, nx))


def export_slice_pgm(img: Image2D, path):
    """Binary PGM (P5, maxval 255) through the canonical-range mapping."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    _atomic_write(path, header + uint8_from_canonical(img.data).tobytes())


def import_slice_pgm(path) -> Image2D:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise FormatError(path, 0, "not a binary PGM (missing P5 magic)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, start, "truncated PGM header")
        fields.append(blob[start:pos])
    pos += 1
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(path, 2, f"non-numeric PGM header fields {fields}") from None
    if maxval != 255:
        raise FormatError(path, 2, f"maxval must be 255, got {maxval}")
    expected = width * height
    if len(blob) - pos != expected:
        raise FormatError(path, pos, f"payload holds {len(blob) - pos} bytes, expected {expected}")
    pixels = np.frombuffer(blob[pos:], dtype=np.uint8).reshape(height, width)
    return Image2D(canonical_from_uint8(pixels))


def store_checkpoint(path, model: TinyDenoiser, schedule: NoiseSchedule):
    """Serialize a model: JSON header plus named (name, shape, float32) records."""
    header = {
        "schedule": {
            "family": schedule.family,
            "t_train": schedule.t_train,
            "beta_start": schedule.beta_start,
            "beta_end": schedule.beta_end,
        },
        "architecture": model.architecture,
        "metadata": model.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [
        _CKPT_MAGIC,
        struct.pack("<H", _CKPT_VERSION),
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        struct.pack("<I", len(model.params)),
    ]
    for name, tensor in model.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.astype("<f4").tobytes())
    _atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, path, blob):
        self.path = path
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(self.path, self.pos, f"truncated while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_checkpoint(path) -> tuple[TinyDenoiser, NoiseSchedule]:
    """Rebuild a model and its training schedule from ``store_checkpoint`` output."""
    with open(path, "rb") as fh:
        reader = _Reader(path, fh.read())
    magic = reader.take(4, "magic")
    if magic != _CKPT_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {_CKPT_MAGIC!r}")
    (version,) = reader.unpack("<H", "version")
    if version != _CKPT_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    (header_len,) = reader.unpack("<I", "header length")
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(path, reader.pos, f"corrupt header: {err}") from err
    (count,) = reader.unpack("<I", "tensor count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = reader.unpack("<B", "tensor rank")
        shape = reader.unpack(f"<{ndim}I", "tensor shape")
        size = int(np.prod(shape)) if ndim else 1
        raw = reader.take(size * 4, f"tensor {name!r} data")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if reader.pos != len(reader.blob):
        raise FormatError(path, reader.pos, "trailing bytes after the last tensor record")

    arch = header.get("architecture", {})
    try:
        model = TinyDenoiser(
            channels=int(arch["channels"]),
            blocks=int(arch["blocks"]),
            emb_dim=int(arch["emb_dim"]),
            params=params,
        )
    except (KeyError, ValueError) as err:
        raise IncompatibleCheckpointError(f"bad architecture descriptor: {err}") from err
    reference = TinyDenoiser.create(model.channels, model.blocks, model.emb_dim)
    if set(params) != set(reference.params):
        raise IncompatibleCheckpointError(
            f"tensor names {sorted(params)} do not match architecture "
            f"{model.architecture}"
        )
    for name, tensor in params.items():
        if tensor.shape != reference.params[name].shape:
            raise IncompatibleCheckpointError(
                f"tensor {name!r} has shape {tensor.shape}, "
                f"expected {reference.params[name].shape}"
            )
    model.metadata = dict(header.get("metadata", {}))

    sched_info = header.get("schedule", {})
    if sched_info.get("family") != "linear":
        raise IncompatibleCheckpointError(f"unsupported schedule family {sched_info.get('family')!r}")
    schedule = linear_schedule(
        int(sched_info["t_train"]),
        float(sched_info["beta_start"]),
        float(sched_info["beta_end"]),
    )
    model.schedule_id = schedule.describe()
    return model, schedule


def write_report(path, record: dict):
    """Write a structured run record as pretty-printed JSON."""
    _atomic_write(path, json.dumps(record, indent=2, sort_keys=True).encode("utf-8"))
