"""
Binary checkpoint format, little-endian:

    b"DGPM"                      magic
    u32                          format version
    ModelConfig fields           in declaration order, int -> i64, float -> f64
    u64                          parameter scalar count
    f32 * count                  parameters, named_parameters() order, each flattened row-major
    u32                          CRC32 of everything above

The checkpoint hash is the SHA-256 of the bytes before the CRC.
"""

import hashlib
import logging
import struct
import zlib
from dataclasses import fields

import numpy as np
import torch

from modules.errors import CorruptionError, FormatError, VersionError
from modules.mpm_model import ModelConfig, build_model

logger = logging.getLogger("Checkpoint")

MAGIC = b"DGPM"
VERSION = 1


def _config_layout():
    return [(f.name, "<q" if isinstance(f.default, int) else "<d") for f in fields(ModelConfig)]


def checkpoint_body(model):
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, fmt in _config_layout():
        out.append(struct.pack(fmt, getattr(model.config, name)))
    flat = np.concatenate([
        p.detach().cpu().to(torch.float32).numpy().reshape(-1) for _, p in model.named_parameters()
    ]).astype("<f4")
    out.append(struct.pack("<Q", flat.size))
    out.append(flat.tobytes())
    return b"".join(out)


def checkpoint_hash(model):
    """32-byte SHA-256 identity of the model's parameters and config."""
    return hashlib.sha256(checkpoint_body(model)).digest()


def save_checkpoint(model, path):
    body = checkpoint_body(model)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))
    digest = hashlib.sha256(body).digest()
    logger.info(f"💾 Checkpoint saved to {path} ({digest.hex()[:12]})")
    return digest


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path} is not a DGPM checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"checkpoint {path} failed its CRC check")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")

    offset = 8
    values = {}
    for name, fmt in _config_layout():
        (values[name],) = struct.unpack_from(fmt, body, offset)
        offset += struct.calcsize(fmt)
    config = ModelConfig(**values)
    (count,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    if offset + 4 * count != len(body):
        raise FormatError(f"checkpoint {path} declares {count} parameters but holds {len(body) - offset} bytes")
    flat = np.frombuffer(body, dtype="<f4", count=count, offset=offset)

    model = build_model(config)
    expected = model.parameter_count()
    if count != expected:
        raise FormatError(f"checkpoint holds {count} parameters, config implies {expected}")
    with torch.no_grad():
        start = 0
        for _, p in model.named_parameters():
            p.copy_(torch.from_numpy(flat[start:start + p.numel()].copy()).reshape(p.shape))
            start += p.numel()
    model.eval()
    logger.info(f"📦 Checkpoint loaded from {path}")
    return model
