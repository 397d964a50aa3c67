"""Directory checkpoints: a JSON manifest plus one raw little-endian binary
payload per parameter.

Layout:

    <dir>/manifest.json          config, extra metadata, parameter index
    <dir>/weights/<name>.bin     raw row-major little-endian values

The format is deliberately free of framework serialization so payloads can be
inspected or re-read from any language with a binary reader.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from dts.errors import ContractError, FormatError

_TORCH_TO_NAME = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_NAME_TO_NUMPY = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "uint8": "|u1",
    "bool": "|b1",
}

FORMAT_NAME = "dts-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, module: nn.Module, config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> Path:
    """Write the module's state (parameters and persistent buffers)."""
    path = Path(path)
    (path / "weights").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tensor in module.state_dict().items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NAME:
            raise FormatError(f"unsupported dtype {t.dtype} for {name}")
        dtype_name = _TORCH_TO_NAME[t.dtype]
        rel = f"weights/{name}.bin"
        np.asarray(t.numpy(), dtype=_NAME_TO_NUMPY[dtype_name]).tofile(path / rel)
        entries.append({"name": name, "shape": list(t.shape),
                        "dtype": dtype_name, "file": rel})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config or {},
        "extra": extra or {},
        "parameters": entries,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise FormatError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"not a {FORMAT_NAME} directory: {path}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')}")
    for key in ("config", "extra", "parameters"):
        if key not in manifest:
            raise FormatError(f"manifest missing '{key}'")
    return manifest


def load_checkpoint(path):
    """Read a checkpoint directory -> (manifest, {name: tensor})."""
    path = Path(path)
    manifest = load_manifest(path)
    state = {}
    for entry in manifest["parameters"]:
        dtype_name = entry["dtype"]
        if dtype_name not in _NAME_TO_NUMPY:
            raise FormatError(f"unknown dtype '{dtype_name}' in manifest")
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise FormatError(f"missing weight file {entry['file']}")
        shape = tuple(entry["shape"])
        np_dtype = np.dtype(_NAME_TO_NUMPY[dtype_name])
        expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        raw = fpath.read_bytes()
        if len(raw) != expected:
            raise FormatError(
                f"{entry['file']}: expected {expected} bytes, got {len(raw)}")
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return manifest, state


def load_into(module: nn.Module, path, strict: bool = True) -> dict:
    """Load a checkpoint's state into an existing module (shapes must match)."""
    manifest, state = load_checkpoint(path)
    own = module.state_dict()
    if strict:
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(
                f"state mismatch: missing {missing}, unexpected {unexpected}")
    for name, tensor in state.items():
        if name in own and tuple(own[name].shape) != tuple(tensor.shape):
            raise ContractError(
                f"{name}: checkpoint shape {tuple(tensor.shape)} != "
                f"module shape {tuple(own[name].shape)}")
    module.load_state_dict(state, strict=strict)
    return manifest
