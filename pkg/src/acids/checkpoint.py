"""Binary checkpoint format.

Layout: 8-byte magic, little-endian uint64 header length, a UTF-8 JSON header,
then contiguous little-endian float32 blobs. The header lists every blob with
its name, group, shape and byte offset into the blob section, so files can be
read without this package.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .encoder import ClusterNet, ModelConfig, register_domain
from .errors import IncompatibleCheckpoint
from .prob_core import SmoothedJointState

MAGIC = b"ACIDSCK1"
SCHEMA_VERSION = 1
BLOB_DTYPE = "<f4"


def config_hash(config: ModelConfig) -> str:
    text = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Checkpoint:
    model: ClusterNet
    state: Optional[object] = None  # trainer.TrainState
    train_config: Optional[dict] = None
    adapt_config: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.model.config)


class _BlobWriter:
    def __init__(self):
        self.entries: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, group: str, tensor) -> None:
        arr = np.ascontiguousarray(torch.as_tensor(tensor).detach().cpu().numpy(), dtype=BLOB_DTYPE)
        data = arr.tobytes()
        self.entries.append({"name": name, "group": group, "shape": list(arr.shape), "offset": self.offset,
                             "nbytes": len(data)})
        self.chunks.append(data)
        self.offset += len(data)


def _optimizer_header(opt_state: dict, writer: _BlobWriter) -> dict:
    steps = {}
    for idx, slot in opt_state["state"].items():
        for key, value in slot.items():
            if key == "step":
                steps[str(idx)] = float(value)
            else:
                writer.add(f"{idx}.{key}", "optimizer", value)
    groups = []
    for group in opt_state["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()})
    return {"param_groups": groups, "steps": steps}


def save_checkpoint(path, model: ClusterNet, state=None, train_config=None, adapt_config=None,
                    extra: Optional[dict] = None) -> Path:
    """Serialize ``model`` and, optionally, a training state and configs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    writer = _BlobWriter()
    for name, p in model.named_parameters():
        writer.add(name, "parameter", p)
    for name, b in model.named_buffers():
        writer.add(name, "bn_statistics", b)

    header = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(model.config),
        "model_config": model.config.to_dict(),
        "bank_map": [[d, b] for d, b in model.bank_map.items()],
        "source_domains": list(model.source_domains),
        "train_config": _plain(train_config),
        "adapt_config": _plain(adapt_config),
        "extra": extra or {},
        "state": None,
    }
    if state is not None:
        smoothing = {}
        for head, states in state.smoothing.items():
            smoothing[head] = []
            for r, s in enumerate(states):
                smoothing[head].append({"alpha": s.alpha, "initialized": s.initialized})
                if s.initialized:
                    writer.add(f"{head}.{r}", "smoothing", s.p_hat)
        header["state"] = {
            "epoch": state.epoch,
            "step": state.step,
            "stopped_early": state.stopped_early,
            "main_mi_history": list(state.main_mi_history),
            "smoothing": smoothing,
            "optimizer": _optimizer_header(state.optimizer, writer) if state.optimizer is not None else None,
        }
    header["blobs"] = writer.entries
    header["blob_dtype"] = "float32-le"
    raw = json.dumps(header, indent=1, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for chunk in writer.chunks:
            fh.write(chunk)
    return path


def _plain(cfg):
    if cfg is None or isinstance(cfg, dict):
        return cfg
    return cfg.to_dict()


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise IncompatibleCheckpoint(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
    if header.get("schema_version") != SCHEMA_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint schema {header.get('schema_version')}")
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path) -> Checkpoint:
    header, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    blobs = {}
    for e in header["blobs"]:
        arr = np.frombuffer(raw, dtype=BLOB_DTYPE, count=e["nbytes"] // 4, offset=e["offset"])
        blobs[(e["group"], e["name"])] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))

    config = ModelConfig(**header["model_config"])
    if config_hash(config) != header["config_hash"]:
        raise IncompatibleCheckpoint("config hash does not match the stored model config")
    model = ClusterNet(config)
    for d, b in header["bank_map"]:
        register_domain(model, d, share_with=None if d == b else b)
    model.source_domains = list(header["source_domains"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(blobs[("parameter", name)])
        for name, b in model.named_buffers():
            b.copy_(blobs[("bn_statistics", name)])

    state = None
    if header["state"] is not None:
        from .trainer import TrainState

        st = header["state"]
        smoothing = {}
        for head, entries in st["smoothing"].items():
            smoothing[head] = []
            for r, e in enumerate(entries):
                s = SmoothedJointState(alpha=e["alpha"])
                if e["initialized"]:
                    s.p_hat = blobs[("smoothing", f"{head}.{r}")]
                smoothing[head].append(s)
        optimizer = None
        if st["optimizer"] is not None:
            opt = st["optimizer"]
            slots = {}
            for (group, name), t in blobs.items():
                if group == "optimizer":
                    idx, key = name.split(".", 1)
                    slots.setdefault(int(idx), {})[key] = t
            for idx, step in opt["steps"].items():
                slots.setdefault(int(idx), {})["step"] = torch.tensor(step, dtype=torch.float32)
            groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in opt["param_groups"]]
            optimizer = {"state": slots, "param_groups": groups}
        state = TrainState(epoch=st["epoch"], step=st["step"], optimizer=optimizer, smoothing=smoothing,
                           stopped_early=st["stopped_early"], main_mi_history=list(st["main_mi_history"]))
    return Checkpoint(model=model, state=state, train_config=header["train_config"],
                      adapt_config=header["adapt_config"], extra=header["extra"], header=header)
