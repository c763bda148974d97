"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SGN1"  u32 version  u32 section_count
    repeated: u16 name_len, name (ascii), u64 payload_len, u32 crc32(payload), payload
    u32 crc32 of every preceding byte

Sections: ``config`` (key = value text), ``params`` and ``adam`` (float32
arrays with shapes), ``log`` (per-epoch rows).
"""
from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .steg_model import ModelParams, NetworkConfig
from .training import AdamState, Checkpoint, LogRow

MAGIC = b"SGN1"
VERSION = 1
SECTIONS = ("config", "params", "adam", "log")


class IntegrityError(ValueError):
    def __init__(self, section: str, message: str):
        super().__init__(f"checkpoint section '{section}': {message}")
        self.section = section


# ---------------------------------------------------------------- encoding helpers

def config_to_text(config: NetworkConfig) -> str:
    lines = []
    for key, value in sorted(config.to_dict().items()):
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> NetworkConfig:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in ("fusion_filters", "decoder_filters"):
            fields[key] = tuple(int(v) for v in value.split(",") if v)
        else:
            fields[key] = int(value)
    return NetworkConfig.from_dict(fields)


def _write_arrays(buf: io.BytesIO, arrays: list[np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, section: str):
        self.data, self.pos, self.section = data, 0, section

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(self.section, f"truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self) -> list[np.ndarray]:
        (count,) = self.unpack("<I")
        out = []
        for _ in range(count):
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            n = int(np.prod(shape, dtype=np.int64))
            out.append(np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape))
        return out

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise IntegrityError(self.section, f"{len(self.data) - self.pos} trailing bytes")


def _encode_sections(c: Checkpoint) -> dict[str, bytes]:
    params = io.BytesIO()
    _write_arrays(params, c.params.arrays())

    adam = io.BytesIO()
    s = c.adam
    adam.write(struct.pack("<Q4d", s.t, s.lr, s.beta1, s.beta2, s.eps))
    _write_arrays(adam, s.m)
    _write_arrays(adam, s.v)

    log = io.BytesIO()
    log.write(struct.pack("<QI", c.epoch, len(c.log)))
    for row in c.log:
        log.write(struct.pack("<I3d", row.epoch, row.loss, row.enc_psnr, row.dec_psnr))

    return {
        "config": config_to_text(c.config).encode("ascii"),
        "params": params.getvalue(),
        "adam": adam.getvalue(),
        "log": log.getvalue(),
    }


def dumps(c: Checkpoint) -> bytes:
    sections = _encode_sections(c)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(sections)))
    for name, payload in sections.items():
        raw = name.encode("ascii")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
        buf.write(payload)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> Checkpoint:
    if len(data) < 12 or data[:4] != MAGIC:
        raise IntegrityError("header", f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise IntegrityError("header", f"unsupported version {version}, expected {VERSION}")

    outer = _Reader(data, "header")
    outer.pos = 12
    sections: dict[str, bytes] = {}
    for i in range(count):
        outer.section = f"#{i}"
        (name_len,) = outer.unpack("<H")
        name = outer.take(name_len).decode("ascii", errors="replace")
        outer.section = name
        length, crc = outer.unpack("<QI")
        payload = outer.take(length)
        if zlib.crc32(payload) != crc:
            raise IntegrityError(name, "checksum mismatch")
        sections[name] = payload
    outer.section = "trailer"
    (file_crc,) = outer.unpack("<I")
    outer.finish()
    if zlib.crc32(data[:-4]) != file_crc:
        raise IntegrityError("file", "whole-file checksum mismatch")
    for name in SECTIONS:
        if name not in sections:
            raise IntegrityError(name, "section missing")

    try:
        config = config_from_text(sections["config"].decode("ascii"))
    except (ValueError, TypeError) as exc:
        raise IntegrityError("config", str(exc)) from exc

    r = _Reader(sections["params"], "params")
    try:
        params = ModelParams.from_arrays(config, r.arrays())
    except ValueError as exc:
        raise IntegrityError("params", str(exc)) from exc
    r.finish()

    r = _Reader(sections["adam"], "adam")
    t, lr, b1, b2, eps = r.unpack("<Q4d")
    m, v = r.arrays(), r.arrays()
    r.finish()
    shapes = [a.shape for a in params.arrays()]
    if [a.shape for a in m] != shapes or [a.shape for a in v] != shapes:
        raise IntegrityError("adam", "moment buffers do not match parameter shapes")
    adam = AdamState(m, v, t, lr, b1, b2, eps)

    r = _Reader(sections["log"], "log")
    epoch, n_rows = r.unpack("<QI")
    rows = [LogRow(*r.unpack("<I3d")) for _ in range(n_rows)]
    r.finish()
    return Checkpoint(config, params, adam, epoch, rows)


def save_checkpoint(c: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(c))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
