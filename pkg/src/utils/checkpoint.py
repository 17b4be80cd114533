"""
Checkpoint Module for CLIPin Desk
Binary "CLPN" checkpoints: a JSON header (dims, step, config echo, corpus
seed) followed by a named tensor table with float64 little-endian payloads.

Layout::

    b"CLPN" | u32 version | u32 header_len | header JSON
    u32 n_tensors | n x (u32 name_len | name | u32 ndim | u64 x ndim shape | <f8 payload)
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Tuple

import numpy as np
import torch

from config.config import DimsConfig
from core.errors import CheckpointFormatError
from core.model import ModelState, OnlineParams
from core.numerics import DTYPE

logger = logging.getLogger(__name__)

MAGIC = b"CLPN"
FORMAT_VERSION = 1
OPTIMIZER_SLOTS = ("exp_avg", "exp_avg_sq", "step")


@dataclass
class Checkpoint:
    state: ModelState
    optimizer_state: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    corpus_seed: int = 0
    version: int = FORMAT_VERSION


def _scalar_dtype() -> torch.dtype:
    return torch.float64 if torch.get_default_dtype() == torch.float64 else torch.float32


def _tensor_table(state: ModelState, optimizer: Optional[torch.optim.Optimizer]) -> List[Tuple[str, torch.Tensor]]:
    table = [(f"online.{name}", p) for name, p in state.online_named_parameters()]
    table += [(f"target.{name}", p) for name, p in state.target_named_parameters()]
    if optimizer is not None:
        for name, p in state.online_named_parameters():
            slots = optimizer.state.get(p)
            if not slots:
                continue
            for slot in OPTIMIZER_SLOTS:
                table.append((f"adam.{slot}.{name}", torch.as_tensor(slots[slot])))
    return table


def _write_u32(handle: BinaryIO, value: int) -> None:
    handle.write(struct.pack("<I", value))


def _read_exact(handle: BinaryIO, n: int) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise CheckpointFormatError("truncated checkpoint")
    return data


def _read_u32(handle: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(handle, 4))[0]


def save_checkpoint(path, state: ModelState, optimizer: Optional[torch.optim.Optimizer] = None,
                    config: Optional[Dict[str, Any]] = None, corpus_seed: int = 0) -> Path:
    """
    Write a checkpoint; blocks until the file is complete.

    Args:
        path (str): Output file
        state (ModelState): Online + target parameters and step counter
        optimizer (Optimizer): AdamW whose moments are stored alongside
        config (dict): Flat config echo
        corpus_seed (int): Seed the training corpus was generated from

    Returns:
        Path: The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": {k: v for k, v in vars(state.dims).items()},
        "step": int(state.step),
        "share_pre_projectors": bool(state.share_pre_projectors),
        "config": config or {},
        "corpus_seed": int(corpus_seed),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    table = _tensor_table(state, optimizer)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(MAGIC)
        _write_u32(handle, FORMAT_VERSION)
        _write_u32(handle, len(header_bytes))
        handle.write(header_bytes)
        _write_u32(handle, len(table))
        for name, tensor in table:
            name_bytes = name.encode("utf-8")
            values = tensor.detach().cpu().numpy().astype("<f8", copy=False)
            _write_u32(handle, len(name_bytes))
            handle.write(name_bytes)
            _write_u32(handle, values.ndim)
            handle.write(struct.pack(f"<{values.ndim}Q", *values.shape))
            handle.write(np.ascontiguousarray(values).tobytes())
    tmp.replace(path)
    logger.info(f"Checkpoint written: {path} (step {state.step}, {len(table)} tensors)")
    return path


def _read_header(handle: BinaryIO) -> Tuple[int, Dict[str, Any]]:
    if _read_exact(handle, 4) != MAGIC:
        raise CheckpointFormatError("not a CLPN checkpoint (bad magic)")
    version = _read_u32(handle)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(_read_exact(handle, _read_u32(handle)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint header: {e}") from e
    return version, header


def _iter_entries(handle: BinaryIO, with_payload: bool):
    for _ in range(_read_u32(handle)):
        name = _read_exact(handle, _read_u32(handle)).decode("utf-8")
        ndim = _read_u32(handle)
        shape = struct.unpack(f"<{ndim}Q", _read_exact(handle, 8 * ndim)) if ndim else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if with_payload:
            values = np.frombuffer(_read_exact(handle, nbytes), dtype="<f8").reshape(shape)
            yield name, shape, torch.from_numpy(values.astype(np.float64))
        else:
            handle.seek(nbytes, 1)
            yield name, shape, None


def read_checkpoint_table(path) -> Tuple[Dict[str, Any], List[Tuple[str, Tuple[int, ...]]]]:
    """
    List a checkpoint's header and tensor names/shapes without building the model.

    Returns:
        tuple: (header dict with "version" added, [(name, shape), ...])
    """
    with open(path, "rb") as handle:
        version, header = _read_header(handle)
        header["version"] = version
        entries = [(name, tuple(shape)) for name, shape, _ in _iter_entries(handle, with_payload=False)]
    return header, entries


def load_checkpoint(path) -> Checkpoint:
    """
    Rebuild a ModelState (and raw optimizer moments) from a checkpoint.

    Raises:
        FileNotFoundError: If the file doesn't exist
        CheckpointFormatError: On bad magic, version, or missing / misshapen tensors
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as handle:
        version, header = _read_header(handle)
        tensors = {name: tensor for name, _, tensor in _iter_entries(handle, with_payload=True)}

    dims = DimsConfig(**header["dims"])
    online = OnlineParams(dims, share_pre_projectors=header["share_pre_projectors"]).to(DTYPE)
    state = ModelState(dims, online)
    with torch.no_grad():
        for prefix, params in (("online", state.online_named_parameters()),
                               ("target", state.target_named_parameters())):
            for name, p in params:
                key = f"{prefix}.{name}"
                if key not in tensors:
                    raise CheckpointFormatError(f"checkpoint is missing tensor {key}")
                if tuple(tensors[key].shape) != tuple(p.shape):
                    raise CheckpointFormatError(f"{key}: expected shape {tuple(p.shape)}, "
                                                f"got {tuple(tensors[key].shape)}")
                p.copy_(tensors[key])
    state.step = int(header["step"])

    moments: Dict[str, Dict[str, torch.Tensor]] = {}
    for key, tensor in tensors.items():
        if key.startswith("adam."):
            _, slot, name = key.split(".", 2)
            moments.setdefault(name, {})[slot] = tensor
    logger.info(f"Checkpoint loaded: {path} (step {state.step})")
    return Checkpoint(state, moments, header.get("config", {}), int(header.get("corpus_seed", 0)), version)


def restore_optimizer(optimizer: torch.optim.Optimizer, state: ModelState,
                      moments: Dict[str, Dict[str, torch.Tensor]]) -> None:
    """Install saved AdamW moments onto the matching online parameters."""
    params = dict(state.online_named_parameters())
    for name, slots in moments.items():
        if name not in params:
            raise CheckpointFormatError(f"optimizer state for unknown parameter {name}")
        missing = [s for s in OPTIMIZER_SLOTS if s not in slots]
        if missing:
            raise CheckpointFormatError(f"optimizer state for {name} lacks {missing}")
        optimizer.state[params[name]] = {
            "step": slots["step"].to(_scalar_dtype()).reshape(()),
            "exp_avg": slots["exp_avg"].clone(),
            "exp_avg_sq": slots["exp_avg_sq"].clone(),
        }
