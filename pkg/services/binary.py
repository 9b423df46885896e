from __future__ import annotations
import logging
import struct
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ByteReader:
    """Little-endian cursor over a byte buffer.

    Every short read raises ``truncated`` with the offset it stopped at, so a
    corrupt file reports where it went wrong.
    """

    def __init__(self, buf: bytes, truncated: type[Exception]):
        self.buf = memoryview(buf)
        self.pos = 0
        self._truncated = truncated

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n > self.remaining:
            raise self._truncated(
                f"truncated at offset {self.pos} reading {what}: need {n} bytes, {self.remaining} left"
            )
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))


def f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def u32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<u4").tobytes()


def read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        log.error("❌ could not read %s (%s)", path, e)
        raise OSError(f"could not read {path}: {e.strerror or e}") from e


def write_bytes(path: str | Path, data: bytes):
    try:
        p = Path(path)
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    except OSError as e:
        log.error("❌ could not write %s (%s)", path, e)
        raise OSError(f"could not write {path}: {e.strerror or e}") from e
