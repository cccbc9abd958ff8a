"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ANRF"                      magic
    u32 version
    u32 n, n bytes               UTF-8 JSON config block
    per network, per layer:      weights then bias, row-major float32 LE
    u32 has_optimizer
    per network (if present):    u64 step, then Adam m and v arrays in
                                 parameter order, float32 LE

The JSON block lists the networks in file order with their ``MlpConfig``
plus free-form metadata (scene bounds, background, training settings).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mlp import AdamState, MlpConfig, MlpParams

MAGIC = b"ANRF"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    networks: dict  # name -> MlpParams, in file order
    optimizer: dict | None = None  # name -> AdamState
    meta: dict = field(default_factory=dict)


def _write_array(fh, a: np.ndarray):
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_array(fh, shape) -> np.ndarray:
    n = int(np.prod(shape))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise CheckpointError("truncated checkpoint")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def dumps(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    block = {
        "networks": [{"name": k, "config": p.config.to_dict()} for k, p in ckpt.networks.items()],
        "meta": ckpt.meta,
    }
    raw = json.dumps(block, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    for params in ckpt.networks.values():
        for a in params.arrays():
            _write_array(fh, a)
    fh.write(struct.pack("<I", 1 if ckpt.optimizer else 0))
    if ckpt.optimizer:
        for name in ckpt.networks:
            st = ckpt.optimizer[name]
            fh.write(struct.pack("<Q", st.step))
            for a in st.m + st.v:
                _write_array(fh, a)
    return fh.getvalue()


def loads(data: bytes) -> Checkpoint:
    fh = io.BytesIO(data)
    if fh.read(4) != MAGIC:
        raise CheckpointError("not an ANRF checkpoint (bad magic)")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = struct.unpack("<I", fh.read(4))
    block = json.loads(fh.read(n).decode("utf-8"))
    networks = {}
    for entry in block["networks"]:
        cfg = MlpConfig.from_dict(entry["config"])
        ws, bs = [], []
        for _, fan_in, fan_out in cfg.layer_shapes():
            ws.append(_read_array(fh, (fan_in, fan_out)))
            bs.append(_read_array(fh, (fan_out,)))
        networks[entry["name"]] = MlpParams(cfg, ws, bs)
    flag = fh.read(4)
    if len(flag) != 4:
        raise CheckpointError("truncated checkpoint")
    optimizer = None
    if struct.unpack("<I", flag)[0]:
        optimizer = {}
        for name, params in networks.items():
            (step,) = struct.unpack("<Q", fh.read(8))
            shapes = [a.shape for a in params.arrays()]
            m = [_read_array(fh, s) for s in shapes]
            v = [_read_array(fh, s) for s in shapes]
            optimizer[name] = AdamState(m, v, step)
    return Checkpoint(networks, optimizer, block.get("meta", {}))


def save(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
