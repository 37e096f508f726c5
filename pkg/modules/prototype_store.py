"""
Prototype store, little-endian:

    b"DGPC"  u32 version  32-byte checkpoint hash  u32 R  u32 C  u32 M
    R x prototype:
        u32 len + domain name (utf-8)   u32 len + task key (utf-8, "" when pooled)
        u32 sample_count   f32 * C global   f32 * M*C local (patch by patch)
    u32 entry count
    entry x bank record:
        u32 len + domain   u32 len + task   u64 sample_id
        f32 * C global     f32 * M*C local
    u32 CRC32 of everything above
"""

import io
import logging
import struct
import zlib

import numpy as np

from modules.dg_engine import BankEntry, DomainPrototype, PromptBank
from modules.errors import CorruptionError, FormatError, StalenessError, VersionError

logger = logging.getLogger("PrototypeStore")

MAGIC = b"DGPC"
VERSION = 1


def _write_str(buf, text):
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_f32(buf, array):
    buf.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, body):
        self.body = body
        self.offset = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.body):
            raise FormatError("prototype store ends early")
        values = struct.unpack_from(fmt, self.body, self.offset)
        self.offset += size
        return values if len(values) > 1 else values[0]

    def raw(self, n):
        if self.offset + n > len(self.body):
            raise FormatError("prototype store ends early")
        out = self.body[self.offset:self.offset + n]
        self.offset += n
        return out

    def text(self):
        return self.raw(self.take("<I")).decode("utf-8")

    def f32(self, *shape):
        count = int(np.prod(shape))
        return np.frombuffer(self.raw(4 * count), dtype="<f4").astype(np.float32).reshape(shape)


def save_prototypes(prototypes, bank, path):
    if not prototypes:
        raise FormatError("refusing to save an empty prototype list")
    if len(bank.checkpoint_hash) != 32:
        raise FormatError("checkpoint hash must be 32 bytes")
    M, C = prototypes[0].z_local.shape

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(bank.checkpoint_hash)
    buf.write(struct.pack("<III", len(prototypes), C, M))
    for p in prototypes:
        if p.z_local.shape != (M, C) or p.z_global.shape != (C,):
            raise FormatError(f"prototype '{p.domain_name}' has inconsistent shape")
        _write_str(buf, p.domain_name)
        _write_str(buf, p.task)
        buf.write(struct.pack("<I", p.sample_count))
        _write_f32(buf, p.z_global)
        _write_f32(buf, p.z_local)
    buf.write(struct.pack("<I", len(bank.entries)))
    for e in bank.entries:
        _write_str(buf, e.domain)
        _write_str(buf, e.task)
        buf.write(struct.pack("<Q", e.sample_id))
        _write_f32(buf, e.f_global)
        _write_f32(buf, e.f_local)

    body = buf.getvalue()
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))
    logger.info(f"💾 Saved {len(prototypes)} prototypes and {len(bank.entries)} bank entries to {path}")


def load_prototypes(path, expected_hash=None):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path} is not a DGPC prototype store")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"prototype store {path} failed its CRC check")

    r = _Reader(body)
    r.raw(4)
    version = r.take("<I")
    if version != VERSION:
        raise VersionError(f"prototype store version {version}, expected {VERSION}")
    digest = r.raw(32)
    if expected_hash is not None and digest != expected_hash:
        raise StalenessError(
            f"prototype store {path} belongs to checkpoint {digest.hex()[:12]}, "
            f"not {expected_hash.hex()[:12]}"
        )
    R, C, M = r.take("<III")
    prototypes = []
    for _ in range(R):
        name, task = r.text(), r.text()
        count = r.take("<I")
        prototypes.append(DomainPrototype(name, task, r.f32(C), r.f32(M, C), count))
    bank = PromptBank(checkpoint_hash=digest)
    for _ in range(r.take("<I")):
        domain, task = r.text(), r.text()
        sample_id = r.take("<Q")
        bank.entries.append(BankEntry(domain, task, sample_id, r.f32(C), r.f32(M, C)))
    if r.offset != len(body):
        raise FormatError(f"prototype store {path} has trailing bytes")
    return prototypes, bank
