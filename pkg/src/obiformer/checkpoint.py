"""Binary checkpoint container.

Layout (little-endian)::

    b"OBIF" | u32 version | u32 len | config text (UTF-8 key=value lines)
    repeated: u32 name_len | name | u32 rank | u32 dims[rank] | float32 data

Record names are prefixed ``param:``, ``buffer:``, ``adam.exp_avg:`` or
``adam.exp_avg_sq:``.  Integer buffers are stored as float32.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import parse_key_values
from .errors import FormatError
from .model import ModelConfig, OBIFormer

MAGIC = b"OBIF"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    model: OBIFormer
    optimizer_state: dict = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)
    step: int = 0


def _config_text(kv: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())


def write_records(fh, records) -> None:
    for name, array in records:
        arr = np.array(array, dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        fh.write(_U32.pack(len(encoded)))
        fh.write(encoded)
        fh.write(_U32.pack(arr.ndim))
        for d in arr.shape:
            fh.write(_U32.pack(d))
        fh.write(arr.tobytes())


def save_checkpoint(path, model: OBIFormer, optimizer_state: dict | None = None,
                    train_config: dict[str, str] | None = None, step: int = 0) -> Path:
    """Write atomically: a temporary file is renamed into place."""
    path = Path(path)
    kv = {k: str(v) for k, v in model.cfg.to_dict().items()}
    kv.update(train_config or {})
    kv["step"] = str(int(step))
    records = [(f"param:{n}", p.detach().cpu().numpy()) for n, p in model.named_parameters()]
    records += [(f"buffer:{n}", b.detach().cpu().numpy()) for n, b in model.named_buffers()]
    for name, st in (optimizer_state or {}).items():
        records.append((f"adam.exp_avg:{name}", st["exp_avg"].cpu().numpy()))
        records.append((f"adam.exp_avg_sq:{name}", st["exp_avg_sq"].cpu().numpy()))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    text = _config_text(kv).encode("utf-8")
    buf.write(_U32.pack(len(text)))
    buf.write(text)
    write_records(buf, records)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an OBIF checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = parse_key_values(r.take(r.u32()).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: config text is not UTF-8") from exc
    arrays = {}
    while not r.done:
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: record name is not UTF-8") from exc
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    return config, arrays


def load_checkpoint(path) -> Checkpoint:
    """Rebuild the model, Adam moments and config; nothing is returned on error."""
    config, arrays = read_checkpoint(path)
    try:
        model = OBIFormer(ModelConfig.from_dict(config))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad model config: {exc}") from exc
    state = model.state_dict()
    loaded = {}
    for key, target in state.items():
        kind = "param" if key in dict(model.named_parameters()) else "buffer"
        arr = arrays.get(f"{kind}:{key}")
        if arr is None:
            raise FormatError(f"{path}: missing record {kind}:{key}")
        if tuple(arr.shape) != tuple(target.shape):
            raise FormatError(f"{path}: record {key} has shape {arr.shape}, expected {tuple(target.shape)}")
        loaded[key] = torch.from_numpy(arr).to(target.dtype)
    model.load_state_dict(loaded)
    optimizer_state = {}
    for name in dict(model.named_parameters()):
        m, v = arrays.get(f"adam.exp_avg:{name}"), arrays.get(f"adam.exp_avg_sq:{name}")
        if m is not None and v is not None:
            optimizer_state[name] = {"exp_avg": torch.from_numpy(m), "exp_avg_sq": torch.from_numpy(v)}
    return Checkpoint(model, optimizer_state, config, int(config.get("step", 0)))
