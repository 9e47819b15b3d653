"""Single-file checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"PNCKPT\\x00\\x01"
    bytes 8..15   u64    header length H
    bytes 16..    H bytes of UTF-8 JSON header
    then          payload: concatenated little-endian float32 arrays

The header holds ``metadata`` (epoch, seed, config, arch digest, metric
history, ...), an ``arrays`` directory of ``{name, shape, offset, nbytes}``
entries (offsets relative to the payload start) and ``payload_sha256``. The
file is fully validated before anything is returned, so a corrupt file never
produces a partial load.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from portionnet.errors import IntegrityError

MAGIC = b"PNCKPT\x00\x01"
FORMAT_VERSION = 1
_OPT_KEYS = ("exp_avg", "exp_avg_sq", "step")


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def arch_digest(self) -> str:
        return self.metadata.get("arch_digest", "")

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if not k.startswith("optim.")}


def collect_state(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> tuple[dict, dict]:
    """Flatten model (and optimizer) state into named arrays plus JSON-able optimizer metadata."""
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        groups = []
        for g in optimizer.param_groups:
            hyper = {k: v for k, v in g.items() if k != "params"}
            hyper["betas"] = list(hyper.get("betas", ()))
            groups.append({"hyper": hyper, "params": [names[id(p)] for p in g["params"]]})
            for p in g["params"]:
                for key, val in optimizer.state.get(p, {}).items():
                    arrays[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        opt_meta = {"param_groups": groups}
    return arrays, opt_meta


def save_checkpoint(path, model, optimizer=None, metadata: dict | None = None) -> Path:
    arrays, opt_meta = collect_state(model, optimizer)
    meta = dict(metadata or {})
    if opt_meta is not None:
        meta["optimizer"] = opt_meta
    return write_container(path, arrays, meta)


def write_container(path, arrays: dict[str, np.ndarray], metadata: dict) -> Path:
    path = Path(path)
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "dtype": "float32-le",
            "metadata": metadata,
            "arrays": directory,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        },
        sort_keys=True,
    ).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise IntegrityError(f"{path}: unreadable header ({err})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[16 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload checksum mismatch (file corrupt or truncated)")
    arrays = {}
    for entry in header["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload) or n != 4 * int(np.prod(entry["shape"], dtype=np.int64)):
            raise IntegrityError(f"{path}: array {entry['name']} out of bounds")
        arrays[entry["name"]] = np.frombuffer(payload[start : start + n], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    ckpt = Checkpoint(arrays, header.get("metadata", {}))
    if expected_digest is not None and ckpt.arch_digest != expected_digest:
        raise IntegrityError(
            f"{path}: architecture digest mismatch: checkpoint has {ckpt.arch_digest!r}, expected {expected_digest!r}"
        )
    return ckpt


def restore_model(ckpt: Checkpoint, model=None):
    """Build (or fill) a PortionNet from a checkpoint, refusing mismatched architectures."""
    from portionnet.config import ModelConfig
    from portionnet.model import PortionNet

    cfg = ModelConfig.model_validate(ckpt.metadata["config"]["model"])
    if cfg.digest() != ckpt.arch_digest:
        raise IntegrityError(f"checkpoint config digest {cfg.digest()!r} != recorded {ckpt.arch_digest!r}")
    if model is None:
        model = PortionNet(cfg)
    elif model.config.digest() != ckpt.arch_digest:
        raise IntegrityError(
            f"architecture digest mismatch: model has {model.config.digest()!r}, checkpoint has {ckpt.arch_digest!r}"
        )
    state = ckpt.model_state()
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise IntegrityError(f"checkpoint lacks {len(missing)} tensors, e.g. {sorted(missing)[:3]}")
    model.load_state_dict(state, strict=True)
    return model


def restore_optimizer(ckpt: Checkpoint, model, optimizer) -> None:
    meta = ckpt.metadata.get("optimizer")
    if meta is None:
        raise IntegrityError("checkpoint has no optimizer state")
    params = dict(model.named_parameters())
    for group, saved in zip(optimizer.param_groups, meta["param_groups"]):
        hyper = dict(saved["hyper"])
        hyper["betas"] = tuple(hyper.get("betas", group.get("betas")))
        group.update(hyper)
        for name in saved["params"]:
            p = params[name]
            state = {}
            for key in _OPT_KEYS:
                arr = ckpt.arrays.get(f"optim.{name}.{key}")
                if arr is not None:
                    state[key] = torch.from_numpy(arr.copy())
            if state:
                optimizer.state[p] = state
