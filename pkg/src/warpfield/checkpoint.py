"""Binary checkpoints.

Layout: the 10-byte magic ``WARPFIELD1``, a little-endian uint64 giving the
length of a UTF-8 JSON header, the header, then every array as consecutive
little-endian float64 values.  The header holds the run config snapshot,
iteration counter, optimizer scalars, RNG state and a section table with the
name, shape and element offset of each array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .fields import ModelConfig, SceneModel
from .training import OptimizerState

MAGIC = b"WARPFIELD"
VERSION = b"1"
HEADER = MAGIC + VERSION


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: SceneModel
    optimizer: OptimizerState | None
    iteration: int
    config: dict
    rng_state: dict | None = None
    extras: dict | None = None


def _tensor_table(model: SceneModel, optimizer: OptimizerState | None):
    names, arrays = [], []
    for section, params in model.sections().items():
        for k, p in enumerate(params):
            names.append(f"{section}/{k}")
            arrays.append(p.values)
    if optimizer is not None:
        if len(optimizer.m) != len(arrays):
            raise CheckpointError("optimizer state does not match the model parameters")
        for prefix, moments in (("adam-m", optimizer.m), ("adam-v", optimizer.v)):
            for name, arr in zip(list(names), moments):
                names.append(f"{prefix}/{name}")
                arrays.append(arr)
    return names, arrays


def save_checkpoint(path: str, model: SceneModel, optimizer: OptimizerState | None = None, iteration: int = 0,
                    config: dict | None = None, rng: np.random.Generator | None = None,
                    extras: dict | None = None) -> None:
    names, arrays = _tensor_table(model, optimizer)
    table, offset = [], 0
    for name, arr in zip(names, arrays):
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "model": model.config.to_dict(),
        "is_test": model.latents.is_test.astype(int).tolist(),
        "iteration": int(iteration),
        "config": config or {},
        "optimizer": None if optimizer is None else {
            "step": optimizer.step, "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
        },
        "rng": None if rng is None else rng.bit_generator.state,
        "extras": extras or {},
        "tensors": table,
        "total": offset,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(HEADER)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < len(HEADER) + 8:
        raise CorruptCheckpointError("checkpoint file is truncated")
    if not data.startswith(MAGIC):
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    version = data[len(MAGIC) : len(HEADER)]
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version!r} is not supported (expected {VERSION!r})")
    (size,) = struct.unpack("<Q", data[len(HEADER) : len(HEADER) + 8])
    start = len(HEADER) + 8
    if len(data) < start + size:
        raise CorruptCheckpointError("checkpoint header is truncated")
    try:
        header = json.loads(data[start : start + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"checkpoint header is unreadable: {exc}") from None
    return header, start + size


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    header, start = _read_header(data)
    payload = data[start:]
    if len(payload) != 8 * header["total"]:
        raise CorruptCheckpointError(
            f"checkpoint payload has {len(payload)} bytes, expected {8 * header['total']}"
        )
    values = np.frombuffer(payload, dtype="<f8")
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        tensors[entry["name"]] = values[entry["offset"] : entry["offset"] + n].reshape(entry["shape"])

    model = SceneModel(ModelConfig(**header["model"]))
    names, params = [], []
    for section, group in model.sections().items():
        for k, p in enumerate(group):
            names.append(f"{section}/{k}")
            params.append(p)
    for name, p in zip(names, params):
        if name not in tensors:
            raise CorruptCheckpointError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != p.shape:
            raise CorruptCheckpointError(f"tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.values[...] = tensors[name].astype(p.dtype)
    model.latents.is_test = np.asarray(header["is_test"], dtype=bool)

    optimizer = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        m = [tensors[f"adam-m/{n}"].astype(p.dtype) for n, p in zip(names, params)]
        v = [tensors[f"adam-v/{n}"].astype(p.dtype) for n, p in zip(names, params)]
        optimizer = OptimizerState(m, v, o["step"], o["beta1"], o["beta2"], o["eps"])
    return Checkpoint(model, optimizer, header["iteration"], header["config"], header["rng"], header["extras"])


def restore_rng(state: dict | None, seed: int = 0) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if state is not None:
        rng.bit_generator.state = state
    return rng
