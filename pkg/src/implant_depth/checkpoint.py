"""Checkpoint container: one binary blob of named arrays plus a text manifest.

The manifest starts with a version line, then one tab-separated row per
array: name, dtype, shape (comma-joined, empty for scalars), byte offset,
byte count.  Arrays are stored little-endian in name order.  The container
holds both model parameters (``model.*``) and optimizer state (``optim.*``),
so a reloaded checkpoint reproduces training bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

CONTAINER_VERSION = 1
WEIGHTS_NAME = "weights.bin"
MANIFEST_NAME = "weights.manifest"
STATE_NAME = "state.json"
CONFIG_NAME = "config.ini"


def save_arrays(directory: str | Path, arrays: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        original = np.asarray(arrays[name])
        arr = np.ascontiguousarray(original)  # note: promotes 0-d to (1,)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        payload = arr.tobytes()
        shape = ",".join(str(n) for n in original.shape)
        rows.append(f"{name}\t{arr.dtype.name}\t{shape}\t{offset}\t{len(payload)}")
        chunks.append(payload)
        offset += len(payload)
    manifest = f"version={CONTAINER_VERSION}\n" + "".join(r + "\n" for r in rows)
    (directory / MANIFEST_NAME).write_text(manifest, encoding="utf-8")
    (directory / WEIGHTS_NAME).write_bytes(b"".join(chunks))


def load_arrays(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    weights_path = directory / WEIGHTS_NAME
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise CheckpointError(f"missing manifest {manifest_path}") from None
    if not lines or not lines[0].startswith("version="):
        raise CheckpointError(f"{manifest_path}: missing version header")
    version = lines[0].partition("=")[2]
    if version != str(CONTAINER_VERSION):
        raise CheckpointError(
            f"{manifest_path}: unknown container version {version!r} "
            f"(expected {CONTAINER_VERSION})"
        )
    try:
        blob = weights_path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"missing weights blob {weights_path}") from None

    arrays: dict[str, np.ndarray] = {}
    expected_end = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise CheckpointError(
                f"{manifest_path}:{lineno}: expected 5 tab-separated fields"
            )
        name, dtype_name, shape_str, offset_str, nbytes_str = parts
        try:
            dtype = np.dtype(dtype_name).newbyteorder("<")
            offset = int(offset_str)
            nbytes = int(nbytes_str)
            shape = tuple(int(s) for s in shape_str.split(",")) if shape_str else ()
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{manifest_path}:{lineno}: {exc}") from None
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"{manifest_path}:{lineno}: array '{name}' extends to byte "
                f"{offset + nbytes} but blob holds {len(blob)}"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count * dtype.itemsize != nbytes:
            raise CheckpointError(
                f"{manifest_path}:{lineno}: array '{name}' shape {shape} x "
                f"{dtype.name} needs {count * dtype.itemsize} bytes, manifest "
                f"says {nbytes}"
            )
        arrays[name] = np.frombuffer(
            blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        expected_end = max(expected_end, offset + nbytes)
    if expected_end != len(blob):
        raise CheckpointError(
            f"{weights_path}: blob holds {len(blob)} bytes but manifest "
            f"accounts for {expected_end}"
        )
    return arrays


def model_to_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        f"model.{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }


def arrays_to_model(arrays: dict[str, np.ndarray], model: torch.nn.Module) -> None:
    state = model.state_dict()
    missing = [k for k in state if f"model.{k}" not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint missing model arrays: {missing[:5]}")
    loaded = {}
    for key, tensor in state.items():
        arr = arrays[f"model.{key}"]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"array 'model.{key}' has shape {arr.shape}, model expects "
                f"{tuple(tensor.shape)}"
            )
        loaded[key] = torch.from_numpy(arr).to(tensor.dtype)
    model.load_state_dict(loaded)


def optimizer_to_arrays(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arrays[f"optim.{idx}.{key}"] = value.detach().cpu().numpy()
    return arrays


def arrays_to_optimizer(arrays: dict[str, np.ndarray],
                        optimizer: torch.optim.Optimizer) -> None:
    state: dict[int, dict[str, torch.Tensor]] = {}
    for name, arr in arrays.items():
        if not name.startswith("optim."):
            continue
        _, idx_str, key = name.split(".", 2)
        state.setdefault(int(idx_str), {})[key] = torch.from_numpy(arr.copy())
    base = optimizer.state_dict()
    base["state"] = state
    optimizer.load_state_dict(base)


def save_checkpoint(directory: str | Path, model: torch.nn.Module,
                    optimizer: torch.optim.Optimizer | None,
                    config_text: str, epoch: int,
                    metric_history: list[dict]) -> None:
    directory = Path(directory)
    arrays = model_to_arrays(model)
    if optimizer is not None:
        arrays.update(optimizer_to_arrays(optimizer))
    save_arrays(directory, arrays)
    state = {
        "format_version": CONTAINER_VERSION,
        "epoch": epoch,
        "metric_history": metric_history,
    }
    (directory / STATE_NAME).write_text(
        json.dumps(state, indent=2) + "\n", encoding="utf-8")
    (directory / CONFIG_NAME).write_text(config_text, encoding="utf-8")


def load_checkpoint(directory: str | Path, model: torch.nn.Module,
                    optimizer: torch.optim.Optimizer | None = None
                    ) -> tuple[int, list[dict], str]:
    """Restore model (and optimizer) state; returns (epoch, history, config)."""
    directory = Path(directory)
    arrays = load_arrays(directory)
    arrays_to_model(arrays, model)
    if optimizer is not None:
        arrays_to_optimizer(arrays, optimizer)
    state_path = directory / STATE_NAME
    try:
        state = json.loads(state_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"missing state file {state_path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{state_path}: invalid JSON: {exc}") from None
    if state.get("format_version") != CONTAINER_VERSION:
        raise CheckpointError(
            f"{state_path}: unknown checkpoint version "
            f"{state.get('format_version')!r}"
        )
    try:
        config_text = (directory / CONFIG_NAME).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CheckpointError(f"missing config snapshot in {directory}") from None
    return int(state["epoch"]), list(state["metric_history"]), config_text
