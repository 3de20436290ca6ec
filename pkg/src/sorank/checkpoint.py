"""Binary checkpoint container ("SORC").

Layout, all little-endian: magic, u16 format version, 32-byte config
hash, u32 tensor count, then per tensor a u16-length-prefixed name, u8
rank, u32 per dimension, and the float32 payload. Optimizer state rides
along as tensors under the ``optim.`` prefix, so a reload restores both
parameters and training state bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .model import SorModel
from .optim import SgdState

MAGIC = b"SORC"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_tensors(tensors: dict[str, np.ndarray], config_hash: bytes,
                 path) -> None:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(config_hash)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode()
            arr = np.asarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, "
            f"this build reads version {FORMAT_VERSION}")
    config_hash = blob[6:38]
    (count,) = struct.unpack_from("<I", blob, 38)
    off = 42
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n,
                                offset=off).reshape(dims).copy()
            off += 4 * n
            out[name] = arr
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated checkpoint: {e}") from e
    return out, config_hash


def save_checkpoint(model: SorModel, state: SgdState | None,
                    config_hash: bytes, path) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    if state is not None:
        for name, v in state.velocity.items():
            tensors[f"optim.velocity.{name}"] = v
        tensors["optim.iter"] = np.array([state.iter], dtype=np.float32)
    save_tensors(tensors, config_hash, path)


def load_checkpoint(model: SorModel, path,
                    expected_hash: bytes | None = None) -> SgdState:
    tensors, config_hash = load_tensors(path)
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError(
            f"{path}: checkpoint config hash {config_hash.hex()} does not "
            f"match current config {expected_hash.hex()}")
    state = SgdState()
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} shape {tensors[name].shape} "
                f"!= model shape {p.data.shape}")
        p.data = tensors[name].astype(p.data.dtype)
        vkey = f"optim.velocity.{name}"
        if vkey in tensors:
            state.velocity[name] = tensors[vkey]
    if "optim.iter" in tensors:
        state.iter = int(tensors["optim.iter"][0])
    return state
