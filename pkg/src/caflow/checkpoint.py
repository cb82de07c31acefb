"""Checkpoint container.

Layout (all integers little-endian)::

    b"CAFLOWCK" | u32 format version | u64 manifest length | manifest (UTF-8 JSON, sorted keys)
    u32 tensor count | per tensor: u16 name length, name, u8 ndim, u32 dims..., float32 data

The manifest holds the backbone and training configs, step/epoch counters,
sampler state and RNG state. Tensors are named ``model/<param>`` and
``ema/<param>``; the router classifier is part of both.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from caflow.backbone import BackboneConfig, FlowResNet

MAGIC = b"CAFLOWCK"
FORMAT_VERSION = 1


class CheckpointError(OSError):
    pass


def _pack_tensor(name: str, t: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save(path: str | Path, manifest: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Write atomically; identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    chunks += [_pack_tensor(name, tensors[name]) for name in sorted(tensors)]
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, mlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 20
    manifest = json.loads(data[pos:pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return manifest, tensors


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def model_tensors(model: FlowResNet, ema: FlowResNet | None = None) -> dict[str, torch.Tensor]:
    out = {f"model/{k}": v for k, v in model.state_dict().items()}
    if ema is not None:
        out.update({f"ema/{k}": v for k, v in ema.state_dict().items()})
    return out


def backbone_config_dict(cfg: BackboneConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def build_models(path: str | Path) -> tuple[FlowResNet, FlowResNet, dict]:
    """Reconstruct (raw, ema) models from a checkpoint; EMA falls back to raw if absent."""
    manifest, tensors = load(path)
    cfg = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["backbone"].items()})
    models = []
    for prefix in ("model/", "ema/"):
        state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        if not state:
            state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
        m = FlowResNet(cfg)
        m.load_state_dict(state)
        m.eval()
        models.append(m)
    return models[0], models[1], manifest
