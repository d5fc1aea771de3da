"""Binary checkpoints.

Layout (all integers little-endian)::

    b"XMSC" | u32 version | 32-byte sha256 of the config JSON
    u32 len | config JSON (utf-8)
    u32 n_params, then per parameter:
        u16 len | name | u8 dtype (0=f32, 1=f64) | u8 rank | u32 dims[rank] | payload
    u8 has_optimizer, then if set:
        u64 step | f64 lr, beta1, beta2, eps, base_lr, decay_factor | i64 decay_interval
        first-moment and second-moment arrays per parameter (dtype, rank, dims, payload)
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .optim import Adam, AdamState, StepDecay

MAGIC = b"XMSC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def _write_array(buf, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _CODES[arr.dtype]
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.astype(_DTYPES[code], copy=False).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        code, rank = self.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        dims = self.unpack(f"<{rank}I") if rank else ()
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save_checkpoint(path, model, optimizer: Adam | None = None) -> None:
    cfg_json = model.cfg.to_json().encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(hashlib.sha256(cfg_json).digest())
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    params = model.state_dict()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        _write_array(buf, p.data)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        s, sched = optimizer.state, optimizer.schedule
        buf.write(b"\x01")
        buf.write(struct.pack("<Q6dq", s.step, s.lr, s.beta1, s.beta2, s.eps,
                              sched.base_lr, sched.factor, sched.interval))
        for m, v in zip(s.m, s.v):
            _write_array(buf, m)
            _write_array(buf, v)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(params, config, optimizer_state)``; the last is a dict or None."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not an XMSC checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    (n,) = r.unpack("<I")
    cfg_json = r.take(n)
    if hashlib.sha256(cfg_json).digest() != digest:
        raise CheckpointError("config hash mismatch: checkpoint header does not match its config")
    cfg = ModelConfig.from_dict(json.loads(cfg_json))
    if expected is not None and expected.hash() != digest:
        raise CheckpointError("config hash mismatch: checkpoint was written for a different model config")
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        params[name] = r.array()
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        step, lr, b1, b2, eps, base_lr, factor, interval = r.unpack("<Q6dq")
        m, v = [], []
        for _ in range(count):
            m.append(r.array())
            v.append(r.array())
        opt = {"state": AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v),
               "schedule": StepDecay(base_lr, interval, factor)}
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return params, cfg, opt


def restore(model, params: "OrderedDict[str, np.ndarray]") -> None:
    own = model.state_dict()
    if list(own) != list(params):
        raise CheckpointError("parameter names differ from the model's")
    for name, arr in params.items():
        if own[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {own[name].shape}")
        own[name].data = arr.astype(own[name].dtype).copy()


def load_model(path, expected: ModelConfig | None = None):
    """Rebuild a model (and optimizer, if stored) from a checkpoint."""
    from .model import XMSNet

    params, cfg, opt_state = load_checkpoint(path, expected)
    model = XMSNet(cfg)
    restore(model, params)
    optimizer = None
    if opt_state is not None:
        optimizer = Adam(model.parameters(), lr=opt_state["schedule"].base_lr, schedule=opt_state["schedule"])
        optimizer.state = opt_state["state"]
    return model, optimizer
