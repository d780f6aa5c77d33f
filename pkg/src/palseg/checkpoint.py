"""Flat tensor container used for model checkpoints.

File layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
raw little-endian tensor payload. The header lists every tensor as
``{"path", "dtype", "shape", "offset", "nbytes"}`` plus the model config, its
hash, free-form metadata and a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, SegNet, build_model

MAGIC = b"PALCKPT1"


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, torch.Tensor], extra: dict | None = None) -> None:
    chunks, index, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append(
            {"path": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(extra or {})
    header["tensors"] = index
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)


def read_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    if start + n > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = blob[start + n :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload integrity check failed (truncated or modified)")
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["path"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return tensors, header


def save_checkpoint(model: SegNet, path, meta: dict | None = None) -> None:
    extra = {
        "format": 1,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        "meta": meta or {},
    }
    write_tensors(path, model.state_dict(), extra)


def load_into(model: SegNet, tensors: dict[str, torch.Tensor]) -> None:
    """Copy tensors into ``model``; every state path must be present with its exact shape."""
    state = model.state_dict()
    problems = []
    for k, v in state.items():
        if k not in tensors:
            problems.append(f"{k}: missing from checkpoint")
        elif tuple(tensors[k].shape) != tuple(v.shape):
            problems.append(f"{k}: checkpoint {tuple(tensors[k].shape)} vs model {tuple(v.shape)}")
    problems += [f"{k}: not a model parameter" for k in tensors if k not in state]
    if problems:
        shown = problems[:20] + ([f"... {len(problems) - 20} more"] if len(problems) > 20 else [])
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(shown))
    model.load_state_dict({k: tensors[k].to(v.dtype) for k, v in state.items()})


def load_checkpoint(path, config: ModelConfig | None = None, allow_config_mismatch: bool = False):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``.

    With ``config`` the stored config hash must match unless
    ``allow_config_mismatch`` is set, in which case the weights are loaded into a
    model built from ``config`` and shapes are still checked.
    """
    tensors, header = read_tensors(path)
    stored = ModelConfig.from_dict(header["config"])
    if config is not None and config.config_hash() != header["config_hash"]:
        if not allow_config_mismatch:
            raise CheckpointError(
                f"{path}: config hash {header['config_hash']} does not match "
                f"requested config {config.config_hash()}"
            )
    cfg = config or stored
    cfg_no_pretrain = ModelConfig.from_dict({**cfg.to_dict(), "pretrained_encoder": None})
    model = build_model(cfg_no_pretrain)
    model.cfg = cfg
    load_into(model, tensors)
    return model, header.get("meta", {})
