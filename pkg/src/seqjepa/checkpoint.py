"""Binary checkpoint container.

Layout: magic "SJCK", format version u16 LE, a JSON manifest (u64 LE byte
length + UTF-8 payload) carrying format version, config hash, step,
current tau and the RNG seed, then named parameter arrays. Each array is
stored as (u64 name length, UTF-8 name, u64 rank, dims as u64 LE, data as
f32 LE row-major). Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SJCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _collect_arrays(model, optimizer=None) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        if name == "step":  # restored from the manifest instead
            continue
        arrays["model." + name] = tensor.detach().cpu().numpy().astype("<f4")
    if optimizer is not None:
        names = [n for n, _ in model.online_parameters()]
        params = [p for _, p in model.online_parameters()]
        for name, p in zip(names, params):
            state = optimizer.state.get(p)
            if not state:
                continue
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    arr = val.detach().cpu().numpy().astype("<f4")
                else:
                    arr = np.asarray(float(val), dtype="<f4")
                arrays[f"optim.{name}.{key}"] = arr
    return arrays


def save_checkpoint(
    path: str | Path,
    model,
    optimizer=None,
    *,
    step: int,
    tau: float,
    seed: int,
    config_hash: str,
) -> None:
    arrays = _collect_arrays(model, optimizer)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "step": step,
        "tau": tau,
        "seed": seed,
        "n_arrays": len(arrays),
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(str(e)) from e
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file")
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<Q", take(8))
    try:
        manifest = json.loads(take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupted manifest: {e}") from e
    for key in ("format_version", "config_hash", "step", "tau", "seed", "n_arrays"):
        if key not in manifest:
            raise CheckpointError(f"manifest missing field {key!r}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(manifest["n_arrays"]):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        arrays[name] = data.copy()
    if off != len(raw):
        raise CheckpointError("trailing bytes after last array")
    return manifest, arrays


def restore_model(model, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    for name, tensor in state.items():
        if name == "step":
            state[name] = torch.tensor(manifest["step"], dtype=torch.long)
            continue
        key = "model." + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing array {key!r}")
        arr = arrays[key]
        if arr.size != tensor.numel():
            raise CheckpointError(
                f"shape mismatch for {key}: {arr.shape} vs {tuple(tensor.shape)}"
            )
        arr = arr.reshape(tuple(tensor.shape))
        state[name] = torch.from_numpy(arr).to(tensor.dtype)
    model.load_state_dict(state)


def restore_optimizer(optimizer, model, arrays: dict[str, np.ndarray]) -> None:
    for name, p in model.online_parameters():
        keys = {
            k[len(f"optim.{name}.") :]: k
            for k in arrays
            if k.startswith(f"optim.{name}.")
        }
        if not keys:
            continue
        state = {}
        for short, full in keys.items():
            arr = arrays[full]
            if short == "step":
                state[short] = torch.tensor(np.float32(arr))
            else:
                state[short] = torch.from_numpy(arr.copy())
        optimizer.state[p] = state
