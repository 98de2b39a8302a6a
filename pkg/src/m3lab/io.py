"""Binary formats: a one-line JSON header followed by little-endian float32 data."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ToyLMM

LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def _read_header(f) -> dict:
    line = f.readline()
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad header line: {e}") from None


def write_grid(path: str | Path, grid) -> None:
    arr = np.asarray(grid)
    if arr.ndim != 3:
        raise FormatError(f"expected an (H, W, C) grid, got shape {arr.shape}")
    h, w, c = arr.shape
    header = json.dumps({"h": h, "w": w, "c": c}, separators=(",", ":"))
    with open(path, "wb") as f:
        f.write(header.encode() + b"\n")
        f.write(arr.astype(LE_F32).tobytes(order="C"))


def read_grid(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = _read_header(f)
        payload = f.read()
    try:
        h, w, c = int(header["h"]), int(header["w"]), int(header["c"])
    except (KeyError, TypeError, ValueError):
        raise FormatError("grid header needs integer h, w and c") from None
    if min(h, w, c) < 1:
        raise FormatError(f"grid dimensions must be positive, got {(h, w, c)}")
    if len(payload) != h * w * c * 4:
        raise FormatError(f"expected {h * w * c * 4} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=LE_F32).reshape(h, w, c).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise FormatError("grid contains non-finite values")
    return arr


def param_bytes(model: ToyLMM, names=None) -> bytes:
    parts = []
    for name, p in model.named_parameters():
        if names is None or name in names:
            parts.append(p.detach().cpu().numpy().astype(LE_F32).tobytes())
    return b"".join(parts)


def param_hash(model: ToyLMM, names=None) -> str:
    return hashlib.sha256(param_bytes(model, names)).hexdigest()


def save_checkpoint(path: str | Path, model: ToyLMM, extra: dict | None = None) -> str:
    """Write ``model`` and return the sha256 of the file contents."""
    header = {
        "format": "m3lab-checkpoint/1",
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "params": [[n, list(p.shape)] for n, p in model.named_parameters()],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, separators=(",", ":")).encode() + b"\n" + param_bytes(model)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> ToyLMM:
    with open(path, "rb") as f:
        header = _read_header(f)
        payload = f.read()
    try:
        cfg = ModelConfig(**header["config"])
        entries = header["params"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"incomplete checkpoint header: {e}") from None
    model = ToyLMM(cfg, seed=int(header.get("seed", 0)))
    expected = [[n, list(p.shape)] for n, p in model.named_parameters()]
    if entries != expected:
        raise FormatError("checkpoint parameter shapes do not match its config")
    total = sum(p.numel() for p in model.parameters())
    if len(payload) != 4 * total:
        raise FormatError(f"expected {4 * total} payload bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype=LE_F32)
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(flat[offset:offset + n].copy()).reshape(p.shape))
            offset += n
    return model
