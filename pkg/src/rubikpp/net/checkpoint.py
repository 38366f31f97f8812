"""Binary checkpoint files.

Layout::

    magic      8 bytes   b"RBKPPCK\\0"
    version    u32 LE
    meta_len   u32 LE
    meta       meta_len bytes of UTF-8 JSON (configs, manifest, optimiser
               hyper-parameters, rng state, metadata, blob CRC32)
    blob       little-endian float32 arrays back to back

Each manifest entry is ``{"name", "shape", "offset"}`` with ``offset`` in
bytes from the start of the blob.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..errors import FormatError
from .models import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .optim import AdamState

MAGIC = b"RBKPPCK\x00"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    generator: Generator
    discriminator: Optional[Discriminator] = None
    g_opt: Optional[AdamState] = None
    d_opt: Optional[AdamState] = None
    rng_state: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _collect(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    arrays = {f"G.{k}": v for k, v in ckpt.generator.params.items()}
    if ckpt.discriminator is not None:
        arrays.update({f"D.{k}": v for k, v in ckpt.discriminator.params.items()})
    for tag, opt in (("G", ckpt.g_opt), ("D", ckpt.d_opt)):
        if opt is None:
            continue
        for k in sorted(opt.m):
            arrays[f"opt{tag}.m.{k}"] = opt.m[k]
            arrays[f"opt{tag}.v.{k}"] = opt.v[k]
    return arrays


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = _collect(ckpt)
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    meta = {
        "generator": ckpt.generator.config.to_json(),
        "discriminator": None if ckpt.discriminator is None else ckpt.discriminator.config.to_json(),
        "g_opt": None if ckpt.g_opt is None else ckpt.g_opt.hyper(),
        "d_opt": None if ckpt.d_opt is None else ckpt.d_opt.hyper(),
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "manifest": manifest,
        "blob_len": len(blob),
        "blob_crc32": zlib.crc32(blob),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes + blob


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = to_bytes(ckpt)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise FormatError(f"write error: {exc}") from exc


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError("bad checkpoint: missing magic")
    version, meta_len = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise FormatError(f"incompatible checkpoint: version {version}, expected {VERSION}")
    try:
        meta = json.loads(data[16:16 + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint: {exc}") from exc
    blob = data[16 + meta_len:]
    if len(blob) != meta.get("blob_len") or zlib.crc32(blob) != meta.get("blob_crc32"):
        raise FormatError("bad checkpoint: truncated or corrupted parameter blob")

    arrays = {}
    for entry in meta["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + 4 * count > len(blob):
            raise FormatError("bad checkpoint: manifest points past the blob")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=_F32, count=count, offset=start).reshape(shape).astype(np.float32)

    def take(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    try:
        gen = Generator(GeneratorConfig(**meta["generator"]), take("G."))
        disc = None
        if meta["discriminator"] is not None:
            disc = Discriminator(DiscriminatorConfig(**meta["discriminator"]), take("D."))
        opts = []
        for tag in ("G", "D"):
            hyper = meta[f"{tag.lower()}_opt"]
            if hyper is None:
                opts.append(None)
                continue
            opts.append(AdamState(**hyper, m=take(f"opt{tag}.m."), v=take(f"opt{tag}.v.")))
    except Exception as exc:  # config/param mismatch of any kind means the file is unusable
        raise FormatError(f"bad checkpoint: {exc}") from exc
    return Checkpoint(gen, disc, opts[0], opts[1], meta["rng_state"], meta["metadata"])


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
