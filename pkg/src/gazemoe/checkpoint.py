"""Single-file binary checkpoints.

Layout (little-endian)::

    b"GZMX" | u32 version | u64 blob_len | blob (UTF-8 key = value text)
    u32 tensor_count
    per tensor: u32 name_len | name (UTF-8) | u32 rank | rank * u64 dims | f32 payload
    u32 CRC32 of every preceding byte

The blob holds the run configuration followed by ``checkpoint.*`` metadata
keys (step counter, data seed, optimizer step). Optimizer moments are stored
as ordinary tensors named ``optim.m.<param>`` and ``optim.v.<param>``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from gazemoe.config import RunConfig, apply_overrides, dump_flat, parse_flat, profile_config
from gazemoe.errors import ConfigError, IntegrityError
from gazemoe.model import GazeModel, build_model
from gazemoe.optim import AdamW, AdamWState

MAGIC = b"GZMX"
VERSION = 1
META_PREFIX = "checkpoint."


@dataclass
class Checkpoint:
    config: RunConfig
    tensors: Dict[str, np.ndarray]  # insertion order is the on-disk order
    meta: Dict[str, int] = field(default_factory=dict)

    def model_state(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}


def _encode(ckpt: Checkpoint) -> bytes:
    flat = ckpt.config.to_flat()
    flat.update({META_PREFIX + k: int(v) for k, v in sorted(ckpt.meta.items())})
    blob = dump_flat(flat).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupt")

    r = _Reader(body)
    r.take(8)
    (blob_len,) = r.unpack("<Q")
    try:
        flat = parse_flat(r.take(blob_len).decode("utf-8"), str(path))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise IntegrityError(f"{path}: unreadable config header: {exc}") from exc
    meta = {k[len(META_PREFIX):]: int(flat.pop(k)) for k in list(flat) if k.startswith(META_PREFIX)}
    cfg = profile_config(flat.pop("profile", "desk"))
    apply_overrides(cfg, flat)

    tensors: Dict[str, np.ndarray] = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise IntegrityError(f"{path}: {len(body) - r.pos} trailing bytes after tensor table")
    return Checkpoint(cfg.validate(), tensors, meta)


def snapshot(cfg: RunConfig, model: GazeModel, optimizer: Optional[AdamW] = None, step: int = 0) -> Checkpoint:
    tensors = {name: t.data for name, t in model.named_tensors()}
    meta = {"step": step, "data_seed": cfg.data_seed}
    if optimizer is not None:
        meta["optimizer_step"] = optimizer.state.step
        for name in optimizer.params:
            if name in optimizer.state.m:
                tensors["optim.m." + name] = optimizer.state.m[name]
                tensors["optim.v." + name] = optimizer.state.v[name]
    return Checkpoint(cfg, tensors, meta)


def save_checkpoint(path: Union[str, Path], cfg: RunConfig, model: GazeModel,
                    optimizer: Optional[AdamW] = None, step: int = 0) -> None:
    write_checkpoint(path, snapshot(cfg, model, optimizer, step))


def restore_model(ckpt: Checkpoint) -> GazeModel:
    model = build_model(ckpt.config)
    state = ckpt.model_state()
    # frozen buffers are rebuilt from the encoder seed; the stored copies must agree
    for name, buf in model.named_buffers():
        stored = state.pop(name, None)
        if stored is None or stored.shape != buf.shape or not np.array_equal(stored, buf.data):
            raise IntegrityError(f"frozen tensor {name!r} differs from the one rebuilt from the config")
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"checkpoint tensors do not match the configured model: {exc}") from exc
    return model


def restore_optimizer(ckpt: Checkpoint, model: GazeModel) -> AdamW:
    t = ckpt.config.train
    opt = AdamW(model.named_parameters(), t.weight_decay, (t.beta1, t.beta2), t.adam_eps)
    opt.state = AdamWState(step=ckpt.meta.get("optimizer_step", 0))
    for name in opt.params:
        if "optim.m." + name in ckpt.tensors:
            opt.state.m[name] = ckpt.tensors["optim.m." + name].copy()
            opt.state.v[name] = ckpt.tensors["optim.v." + name].copy()
    return opt
