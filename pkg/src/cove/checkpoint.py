"""Binary model checkpoints (magic ``CVMD``), little-endian, float32 payloads.

Layout::

    b"CVMD" | u32 version | u8 variant | u8 gate_mode | u32 n, d, N, M | u32 k
    | i64 seed | n x u8 expert tags | u32 gate rows, cols
    | u32 len + utf-8 JSON extras
    | per expert: u8 tag, u32 block count, blocks
    | W_g block | 32-byte SHA-256 of the training log

A block is ``u16 name length, name, u8 ndim, ndim x u32 dims, float32 data``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .experts import DEFAULT_MAX_LEN, ExpertKind, _UserExpert
from .fusion import GATE_MODES, VARIANTS, CoVEModel

MAGIC = b"CVMD"
VERSION = 1


@dataclass
class CheckpointHeader:
    variant: str
    gate_mode: str
    num_experts: int
    dim: int
    num_items: int
    num_users: int
    k_gate: int
    seed: int
    roster: list[ExpertKind]
    gate_shape: tuple[int, int]
    extras: dict = field(default_factory=dict)
    log_digest: bytes = b"\x00" * 32


def _num_users(model: CoVEModel) -> int:
    return max((e.num_users for e in model.experts if isinstance(e, _UserExpert)), default=0)


def _write_block(fh, name: str, tensor: torch.Tensor) -> None:
    raw = name.encode("utf-8")
    arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
    fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"{path}: truncated checkpoint")
    return data


def _read_block(fh, path) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read(fh, 2, path))
    name = _read(fh, n, path).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read(fh, 1, path))
    shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, path))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read(fh, 4 * count, path), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(model: CoVEModel, path, *, seed: int = 0, k_gate: int | None = None,
                    log_text: str = "", extras: dict | None = None) -> None:
    """Persist ``model``; all parameters are written as float32."""
    n, d = model.num_experts, model.dim
    meta = {"max_len": max((e.max_len for e in model.experts if hasattr(e, "max_len")), default=DEFAULT_MAX_LEN),
            "gate_input_mode": next((e.gate_input_mode for e in model.experts if isinstance(e, _UserExpert)), "hidden")}
    meta.update(extras or {})
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IBB", VERSION, VARIANTS.index(model.variant), GATE_MODES.index(model.gate_mode)))
        fh.write(struct.pack("<5I", n, d, model.num_items, _num_users(model), k_gate or 0))
        fh.write(struct.pack("<q", seed))
        fh.write(bytes(e.kind.tag for e in model.experts))
        fh.write(struct.pack("<2I", *model.gate.weight.shape))
        fh.write(struct.pack("<I", len(meta_raw)) + meta_raw)
        for e in model.experts:
            blocks = list(e.named_parameters())
            fh.write(struct.pack("<BI", e.kind.tag, len(blocks)))
            for name, p in blocks:
                _write_block(fh, name, p)
        _write_block(fh, "gate.weight", model.gate.weight)
        fh.write(hashlib.sha256(log_text.encode("utf-8")).digest())


def load_checkpoint(path) -> tuple[CoVEModel, CheckpointHeader]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        version, variant, gate_mode = struct.unpack("<IBB", _read(fh, 6, path))
        if version != VERSION:
            raise DataError(f"{path}: checkpoint format version {version}, this build reads version {VERSION}")
        n, d, num_items, num_users, k = struct.unpack("<5I", _read(fh, 20, path))
        (seed,) = struct.unpack("<q", _read(fh, 8, path))
        roster = [ExpertKind.from_tag(t) for t in _read(fh, n, path)]
        gate_shape = struct.unpack("<2I", _read(fh, 8, path))
        (meta_len,) = struct.unpack("<I", _read(fh, 4, path))
        extras = json.loads(_read(fh, meta_len, path).decode("utf-8"))
        header = CheckpointHeader(VARIANTS[variant], GATE_MODES[gate_mode], n, d, num_items, num_users, k,
                                  seed, roster, tuple(gate_shape), extras)
        if gate_shape != (n * d, n):
            raise DataError(f"{path}: gate shape {gate_shape} inconsistent with n={n}, d={d}")
        model = CoVEModel.build(roster, max(num_users, 1), num_items, d, header.variant, header.gate_mode,
                                extras.get("max_len", DEFAULT_MAX_LEN), extras.get("gate_input_mode", "hidden"))
        model = model.float()
        for kind, expert in zip(roster, model.experts):
            tag, count = struct.unpack("<BI", _read(fh, 5, path))
            if ExpertKind.from_tag(tag) != kind:
                raise DataError(f"{path}: expert block tagged {ExpertKind.from_tag(tag).value}, roster says {kind.value}")
            params = dict(expert.named_parameters())
            if count != len(params):
                raise DataError(f"{path}: {kind.value} expert has {count} blocks, expected {len(params)}")
            for _ in range(count):
                name, data = _read_block(fh, path)
                _assign(params, name, data, path)
        name, data = _read_block(fh, path)
        _assign({"gate.weight": model.gate.weight}, name, data, path)
        header.log_digest = _read(fh, 32, path)
    return model, header


def _assign(params: dict, name: str, data: np.ndarray, path) -> None:
    if name not in params:
        raise DataError(f"{path}: unexpected block {name!r}")
    p = params[name]
    if tuple(p.shape) != data.shape:
        raise DataError(f"{path}: block {name} has shape {data.shape}, expected {tuple(p.shape)}")
    with torch.no_grad():
        p.copy_(torch.from_numpy(data))
