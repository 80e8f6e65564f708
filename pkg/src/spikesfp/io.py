"""Little-endian binary formats for events, normals, images, CVGR-I tensors and weights.

    PEVT  magic, version u32 (=1), width u32, height u32, count u64,
          count x {t_us u64, x u16, y u16, p i8, 3 pad bytes}
    PNRM  magic, width u32, height u32, float32 (nx, ny, nz) per pixel, row-major
    PIMG  magic, width u32, height u32, float32 per pixel, row-major
    PCVG  magic, B u32, H u32, W u32, float32 values bin-major then row-major
    PWTS  magic, entry count u32, per entry: name length u32, UTF-8 name,
          rank u32, extents u32 x rank, float32 payload

Every writer goes through a temporary file and an atomic rename.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .encoding import CvgriTensor
from .events import EventStream

__all__ = [
    "FormatError",
    "atomic_write",
    "write_events",
    "read_events",
    "write_normals",
    "read_normals",
    "write_image",
    "read_image",
    "write_cvgri",
    "read_cvgri",
    "write_weights",
    "read_weights",
]

EVENT_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1", (3,))])
assert EVENT_RECORD.itemsize == 16


class FormatError(ValueError):
    """Malformed or mismatched binary file."""


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, path, magic: bytes):
        self.buf = Path(path).read_bytes()
        self.pos = 0
        if self.take(4) != magic:
            raise FormatError(f"{path}: expected magic {magic!r}")
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{getattr(self, 'path', '?')}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def write_events(path, stream: EventStream) -> None:
    rec = np.zeros(len(stream), dtype=EVENT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    header = b"PEVT" + struct.pack("<IIIQ", 1, stream.width, stream.height, len(stream))
    atomic_write(path, header + rec.tobytes())


def read_events(path, duration: int | None = None, t0: int = 0) -> EventStream:
    """Load a PEVT file.

    The format does not carry the window length; pass ``duration`` to restore
    it, otherwise the last timestamp (relative to ``t0``) is used.
    """
    r = _Reader(path, b"PEVT")
    version, width, height, count = r.unpack("IIIQ")
    if version != 1:
        raise FormatError(f"{path}: unsupported PEVT version {version}")
    rec = r.array(EVENT_RECORD, count)
    r.done()
    t = rec["t"].astype(np.int64)
    if duration is None:
        duration = int(t[-1] - t0) if count else 0
    return EventStream(width, height, duration, rec["x"].copy(), rec["y"].copy(), t,
                       rec["p"].copy(), t0=t0)


def write_normals(path, normals: np.ndarray) -> None:
    normals = np.asarray(normals)
    if normals.ndim != 3 or normals.shape[0] != 3:
        raise FormatError(f"normals must be (3, H, W), got {normals.shape}")
    _, h, w = normals.shape
    body = np.ascontiguousarray(normals.transpose(1, 2, 0), dtype="<f4").tobytes()
    atomic_write(path, b"PNRM" + struct.pack("<II", w, h) + body)


def read_normals(path) -> np.ndarray:
    r = _Reader(path, b"PNRM")
    w, h = r.unpack("II")
    values = r.array("<f4", h * w * 3).reshape(h, w, 3)
    r.done()
    return np.ascontiguousarray(values.transpose(2, 0, 1)).astype(np.float32)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"image must be (H, W), got {image.shape}")
    h, w = image.shape
    atomic_write(path, b"PIMG" + struct.pack("<II", w, h) + image.astype("<f4").tobytes())


def read_image(path) -> np.ndarray:
    r = _Reader(path, b"PIMG")
    w, h = r.unpack("II")
    values = r.array("<f4", h * w).reshape(h, w)
    r.done()
    return values.astype(np.float32)


def write_cvgri(path, tensor) -> None:
    values = tensor.values if isinstance(tensor, CvgriTensor) else np.asarray(tensor)
    if values.ndim != 3:
        raise FormatError(f"CVGR-I must be (B, H, W), got {values.shape}")
    b, h, w = values.shape
    atomic_write(path, b"PCVG" + struct.pack("<III", b, h, w) + values.astype("<f4").tobytes())


def read_cvgri(path) -> CvgriTensor:
    r = _Reader(path, b"PCVG")
    b, h, w = r.unpack("III")
    values = r.array("<f4", b * h * w).reshape(b, h, w)
    r.done()
    return CvgriTensor(values.astype(np.float32))


def write_weights(path, state: dict[str, np.ndarray]) -> None:
    parts = [b"PWTS", struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    atomic_write(path, b"".join(parts))


def read_weights(path) -> dict[str, np.ndarray]:
    r = _Reader(path, b"PWTS")
    (count,) = r.unpack("I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("I")
        shape = r.unpack(f"{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        state[name] = r.array("<f4", size).reshape(shape).astype(np.float32)
    r.done()
    return state
