"""Self-describing checkpoint container with byte-stable round trips.

Layout: magic "CTPK", a little-endian u16 version and u64 header
length, a JSON header, then the concatenated raw tensor payload. The
header stores the full nested state structure with tensors replaced by
named references into the payload, so save -> load -> save reproduces
the file byte for byte (torch's own serializer does not guarantee
that). A config hash in the state guards against resuming a run under a
different configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointError

__all__ = ["save_checkpoint", "load_checkpoint", "peek_header"]

MAGIC = b"CTPK"
VERSION = 1


def _pack(obj: Any, tensors: list[tuple[str, torch.Tensor]]) -> Any:
    if torch.is_tensor(obj):
        name = f"t{len(tensors)}"
        tensors.append((name, obj))
        return {"__tensor__": name}
    if isinstance(obj, dict):
        return {"__kv__": [[_pack(k, tensors), _pack(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_pack(v, tensors) for v in obj]}
    if isinstance(obj, list):
        return [_pack(v, tensors) for v in obj]
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__} into a checkpoint")


def _unpack(obj: Any, tensors: dict[str, torch.Tensor]) -> Any:
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__kv__" in obj:
            return {_unpack(k, tensors): _unpack(v, tensors) for k, v in obj["__kv__"]}
        if "__tuple__" in obj:
            return tuple(_unpack(v, tensors) for v in obj["__tuple__"])
        raise CheckpointError("malformed checkpoint header structure")
    if isinstance(obj, list):
        return [_unpack(v, tensors) for v in obj]
    return obj


def save_checkpoint(path: str | Path, state: dict[str, Any]) -> Path:
    """Serialize a nested state dict (tensors, scalars, containers)."""
    from .ioutil import atomic_write_bytes

    tensors: list[tuple[str, torch.Tensor]] = []
    structure = _pack(state, tensors)

    entries = []
    payload = bytearray()
    for name, tensor in tensors:
        t = tensor.detach().cpu().contiguous()
        raw = t.numpy().tobytes()
        entries.append(
            {
                "name": name,
                "dtype": str(t.dtype).removeprefix("torch."),
                "shape": list(t.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)

    header = json.dumps(
        {"state": structure, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    blob = MAGIC + struct.pack("<H", VERSION) + struct.pack("<Q", len(header)) + header + bytes(payload)
    path = Path(path)
    atomic_write_bytes(path, blob)
    return path


def _read_header(data: bytes, path: Path) -> tuple[dict, int]:
    if len(data) < 14 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 6)
    start = 14
    if len(data) < start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    return header, start + header_len


def peek_header(path: str | Path) -> dict:
    """Read only the JSON header (cheap config/hash inspection)."""
    data = Path(path).read_bytes()
    header, _ = _read_header(data, Path(path))
    return header


def load_checkpoint(
    path: str | Path,
    expected_config_hash: str | None = None,
    force: bool = False,
) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    header, payload_start = _read_header(data, path)

    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor payload for {entry['name']}")
        dtype = getattr(torch, entry["dtype"])
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype
        arr = np.frombuffer(data[start:end], dtype=np_dtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)

    state = _unpack(header["state"], tensors)
    stored_hash = state.get("config_hash")
    if expected_config_hash is not None and stored_hash != expected_config_hash and not force:
        raise CheckpointError(
            f"{path}: config hash mismatch (checkpoint {stored_hash!r}, "
            f"requested {expected_config_hash!r}); pass force to override"
        )
    return state
