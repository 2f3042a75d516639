"""Self-describing checkpoint files.

Layout: magic ``IDD1``, a little-endian u32 length and that many bytes of
UTF-8 JSON header, then named float32 blocks, each ``u32 name length,
name, u32 ndim, ndim x u32 dims, data``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError
from ..nn import AdamState
from .model import IDDConfig
from .schedule import DiffusionSchedule

MAGIC = b"IDD1"
VERSION = 1


@dataclass
class Checkpoint:
    config: IDDConfig
    schedule: DiffusionSchedule
    params: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)
    adam: AdamState | None = None


def _block(name: str, t: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
    raw = name.encode("utf-8")
    return (struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def dumps(ckpt: Checkpoint) -> bytes:
    blocks = [("param." + k, v) for k, v in ckpt.params.items()]
    header = {
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "meta": ckpt.meta,
    }
    if ckpt.adam is not None:
        a = ckpt.adam
        header["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
        blocks += [("adam.m." + k, v) for k, v in a.m.items()]
        blocks += [("adam.v." + k, v) for k, v in a.v.items()]
    header["blocks"] = len(blocks)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(_block(n, t) for n, t in blocks)


def loads(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    try:
        (hlen,) = struct.unpack_from("<I", buf, 4)
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r} (reader knows {VERSION})")
    pos = 8 + hlen
    blocks = {}
    try:
        for _ in range(header["blocks"]):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            blocks[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint body: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last block")
    adam = None
    if "adam" in header:
        h = header["adam"]
        adam = AdamState(h["lr"], h["beta1"], h["beta2"], h["eps"], h["step"],
                         m={k[7:]: v for k, v in blocks.items() if k.startswith("adam.m.")},
                         v={k[7:]: v for k, v in blocks.items() if k.startswith("adam.v.")})
    params = {k[6:]: v for k, v in blocks.items() if k.startswith("param.")}
    return Checkpoint(IDDConfig.from_dict(header["config"]), DiffusionSchedule.from_dict(header["schedule"]),
                      params, header.get("meta", {}), adam)


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    return loads(path.read_bytes())
