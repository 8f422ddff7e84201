"""Single-file training checkpoints.

Layout, little-endian::

    magic "BROWCKPT" | u32 version | u64 step | 64-byte ASCII config hash
    u32 block count
    per block: u16 name length | name (UTF-8) | u8 dtype code | u8 ndim
               | u64 * ndim shape | u64 byte length | raw data
    32-byte SHA-256 of everything above

Tensor blocks keep their dtype (float32 for the default training dtype).
Scalars of the schedule and optimizer plus the config go into a JSON block
named ``meta``; RNG state goes into a raw byte block.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..config import Config, config_from_dict
from .engine import DTYPES, ScheduleState, TrainState, init_train_state

MAGIC = b"BROWCKPT"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIQ64s")

_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


class CheckpointError(ValueError):
    pass


def write_blocks(fh: io.BufferedIOBase | io.BytesIO, blocks: list[tuple[str, np.ndarray]]) -> None:
    fh.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr)
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"block {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        data = arr.astype(_CODES[code], copy=False).tobytes()
        fh.write(struct.pack("<H", len(raw_name)) + raw_name)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<Q", len(data)))
        fh.write(data)


def read_blocks(buf: memoryview, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    blocks = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        name = bytes(buf[off + 2:off + 2 + n]).decode("utf-8")
        off += 2 + n
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if code not in _CODES:
            raise CheckpointError(f"block {name!r}: unknown dtype code {code}")
        arr = np.frombuffer(buf[off:off + nbytes], dtype=_CODES[code]).reshape(shape)
        blocks[name] = arr.astype(arr.dtype.newbyteorder("="))
        off += nbytes
    return blocks, off


def encode_container(step: int, config_hash: str, blocks: list[tuple[str, np.ndarray]]) -> bytes:
    body = io.BytesIO()
    body.write(_HEAD.pack(MAGIC, FORMAT_VERSION, step, config_hash.encode("ascii")))
    write_blocks(body, blocks)
    payload = body.getvalue()
    return payload + hashlib.sha256(payload).digest()


def decode_container(data: bytes) -> tuple[int, str, dict[str, np.ndarray]]:
    if len(data) < _HEAD.size + 36:
        raise CheckpointError("checkpoint truncated")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    magic, version, step, chash = _HEAD.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blocks, off = read_blocks(memoryview(payload), _HEAD.size)
    if off != len(payload):
        raise CheckpointError("trailing bytes after last block")
    return step, chash.decode("ascii"), blocks


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def state_blocks(state: TrainState) -> list[tuple[str, np.ndarray]]:
    blocks = []
    for name, p in state.pair.student.named_parameters():
        blocks.append((f"student/{name}", _np(p)))
    for name, p in state.pair.teacher.named_parameters():
        blocks.append((f"teacher/{name}", _np(p)))
    opt = state.optimizer.state_dict()
    for idx in sorted(opt["state"]):
        for key in sorted(opt["state"][idx]):
            blocks.append((f"optim/{idx}/{key}", _np(torch.as_tensor(opt["state"][idx][key]))))
    blocks.append(("schedule/center", _np(state.schedule.teacher_center)))
    blocks.append(("rng/torch", _np(torch.get_rng_state())))
    sch = state.schedule
    meta = {
        "config": state.config.to_dict(),
        "schedule": {"step": sch.step, "total_steps": sch.total_steps, "warmup_steps": sch.warmup_steps,
                     "current_lr": sch.current_lr, "current_lambda": sch.current_lambda,
                     "current_tau_t": sch.current_tau_t},
        "param_groups": [{k: v for k, v in g.items() if k != "params"} for g in opt["param_groups"]],
        "history": state.history,
    }
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    blocks.append(("meta", np.frombuffer(raw, dtype=np.uint8)))
    return blocks


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_container(state.schedule.step, state.config.training_hash(), state_blocks(state))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected: Config | None = None, steps_per_epoch: int | None = None,
                    restore_rng: bool = True) -> TrainState:
    """Rebuild a TrainState; ``expected`` must hash equal to the saved config when given."""
    step, chash, blocks = decode_container(Path(path).read_bytes())
    meta = json.loads(bytes(blocks["meta"]).decode("utf-8"))
    cfg = config_from_dict(meta["config"])
    if cfg.training_hash() != chash:
        raise CheckpointError("stored config does not match the header hash")
    if expected is not None and expected.training_hash() != chash:
        raise CheckpointError("config hash mismatch: checkpoint was written with a different configuration")
    if expected is not None:
        cfg = expected

    sch = meta["schedule"]
    state = init_train_state(cfg, 1)
    dtype = DTYPES[cfg.train.dtype]

    def tensor(name):
        if name not in blocks:
            raise CheckpointError(f"missing block {name!r}")
        return torch.from_numpy(np.array(blocks[name]))

    with torch.no_grad():
        for prefix, module in (("student", state.pair.student), ("teacher", state.pair.teacher)):
            for name, p in module.named_parameters():
                value = tensor(f"{prefix}/{name}")
                if value.shape != p.shape:
                    raise CheckpointError(f"shape mismatch for {prefix}/{name}")
                p.copy_(value.to(dtype))
    opt_state = {}
    for key in blocks:
        if key.startswith("optim/"):
            _, idx, field_name = key.split("/")
            opt_state.setdefault(int(idx), {})[field_name] = tensor(key)
    groups = state.optimizer.state_dict()["param_groups"]
    for g, saved in zip(groups, meta["param_groups"]):
        g.update(saved)
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    state.schedule = ScheduleState(
        step=sch["step"], total_steps=sch["total_steps"], warmup_steps=sch["warmup_steps"],
        current_lr=sch["current_lr"], current_lambda=sch["current_lambda"],
        current_tau_t=sch["current_tau_t"], teacher_center=tensor("schedule/center").to(dtype),
    )
    if step != state.schedule.step:
        raise CheckpointError("header step disagrees with schedule state")
    state.history = meta.get("history", [])
    if restore_rng:
        torch.set_rng_state(tensor("rng/torch"))
    return state
