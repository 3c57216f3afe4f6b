"""Bit-exact checkpoint files.

Layout (all integers little-endian)::

    b"DRWK"  u32 version  u32 header_len  header (utf-8 key=value lines)
    u32 n_entries
    per entry: u16 name_len, name, u8 ndim, u32 dims[ndim], f32 payload
    b"KWRD"  u32 crc32 of every preceding byte

Model parameters are stored under ``model/``, the EMA shadow under
``ema/`` and the Adam moments under ``opt.m/`` and ``opt.v/``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .backbone import DiffusionRWKV, ModelConfig
from .data import atomic_write

MAGIC = b"DRWK"
FOOTER = b"KWRD"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def format_header(header: dict) -> str:
    lines = []
    for k, v in header.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"header entry {k!r} cannot be written as key=value")
        lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def encode_chunks(header: dict, entries: dict):
    """Yield the file as byte chunks so a large checkpoint never sits in memory twice."""
    htext = format_header(header).encode("utf-8")
    crc = 0

    def emit(chunk):
        nonlocal crc
        crc = zlib.crc32(chunk, crc)
        return chunk

    yield emit(MAGIC + struct.pack("<II", VERSION, len(htext)) + htext + struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise TypeError(f"entry {name} is {a.dtype}; checkpoints hold float32 only")
        nb = name.encode("utf-8")
        yield emit(struct.pack("<H", len(nb)) + nb + struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        yield emit(memoryview(np.ascontiguousarray(a, dtype="<f4")).cast("B"))
    yield FOOTER + struct.pack("<I", crc)


def encode(header: dict, entries: dict) -> bytes:
    return b"".join(encode_chunks(header, entries))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = memoryview(buf), 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _text(raw: bytes) -> str:
    try:
        return bytes(raw).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("undecodable text field") from None


def decode(buf: bytes) -> tuple[dict, dict]:
    r = _Reader(buf)
    buf = r.buf
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} (this build reads {VERSION})")
    # an intact footer lets corruption be reported before any field is parsed
    if len(buf) >= 16 and buf[-8:-4] == FOOTER and struct.unpack("<I", buf[-4:])[0] != zlib.crc32(buf[:-8]):
        raise CheckpointError("checksum mismatch")
    (hlen,) = r.unpack("<I")
    header = parse_header(_text(r.take(hlen)))
    (n,) = r.unpack("<I")
    entries = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = _text(r.take(nlen))
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        count = int(np.prod(dims, dtype=np.int64))
        entries[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    body_end = r.pos
    if r.take(4) != FOOTER:
        raise TruncatedCheckpointError("missing footer")
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(buf[:body_end]):
        raise CheckpointError("checksum mismatch")
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after footer")
    return header, entries


# --- model-level save / load ---------------------------------------------------------

def config_from_header(header: dict) -> ModelConfig:
    kw = {}
    for f in fields(ModelConfig):
        key = "model." + f.name
        if key not in header:
            continue
        raw = header[key]
        if f.type in ("bool", bool):
            kw[f.name] = raw == "True"
        elif f.type in ("int", int):
            kw[f.name] = int(raw)
        else:
            kw[f.name] = raw
    return ModelConfig(**kw)


@dataclass
class Checkpoint:
    header: dict
    config: ModelConfig
    step: int
    model: dict
    ema: dict
    opt_m: dict
    opt_v: dict


def checkpoint_save(path: str, model: DiffusionRWKV, ema=None, opt=None,
                    step: int = 0, extra: Optional[dict] = None) -> None:
    header = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    header["step"] = int(step)
    if opt is not None:
        header["opt.t"] = int(opt.t)
    header.update(extra or {})
    entries = {f"model/{n}": t.data for n, t in model.named_parameters()}
    if ema is not None:
        entries.update({f"ema/{n}": a for n, a in ema.shadow.items()})
    if opt is not None:
        entries.update({f"opt.m/{n}": a for n, a in opt.m.items()})
        entries.update({f"opt.v/{n}": a for n, a in opt.v.items()})
    atomic_write(path, encode_chunks(header, entries))


def checkpoint_load(path: str) -> Checkpoint:
    """Read and validate a checkpoint; nothing is built unless every check passes."""
    with open(path, "rb") as f:
        buf = f.read()
    header, entries = decode(buf)
    try:
        config = config_from_header(header)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"bad model config in header: {e}") from None
    expected = {n: t.shape for n, t in DiffusionRWKV(config).named_parameters()}
    groups = {"model": {}, "ema": {}, "opt.m": {}, "opt.v": {}}
    for name, arr in entries.items():
        g, _, pname = name.partition("/")
        if g not in groups:
            raise CheckpointError(f"unknown entry group in {name!r}")
        if pname not in expected:
            raise ShapeMismatchError(f"{name}: no such parameter for the header config")
        if arr.shape != expected[pname]:
            raise ShapeMismatchError(f"{name}: shape {arr.shape}, config expects {expected[pname]}")
        groups[g][pname] = arr
    if set(groups["model"]) != set(expected):
        missing = sorted(set(expected) - set(groups["model"]))
        raise ShapeMismatchError(f"checkpoint lacks parameters {missing[:3]}...")
    return Checkpoint(header, config, int(header.get("step", 0)), groups["model"],
                      groups["ema"], groups["opt.m"], groups["opt.v"])


def load_model(path: str, use_ema: bool = False) -> DiffusionRWKV:
    ck = checkpoint_load(path)
    model = DiffusionRWKV(ck.config)
    model.load_arrays(ck.ema if use_ema and ck.ema else ck.model)
    return model
