"""Model wrapper shared by both policy kinds, plus the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"STRLCKPT"
    4 bytes   format version (uint32)
    8 bytes   header length N (uint64)
    N bytes   UTF-8 JSON header
    payload   raw little-endian float tensors, in header order

The header carries the model kind, ModelConfig, LifConfig, NormStats, free-form
metadata and one ``{"name", "shape", "dtype", "offset", "nbytes"}`` entry per tensor.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dense, snn
from .dataset import NormStats, TokenBatch
from .numerics import Tensor
from .snn import LifConfig, ModelConfig, SpikeTrace

MAGIC = b"STRLCKPT"
FORMAT_VERSION = 1
KINDS = ("snn", "dt")


class CheckpointError(ValueError):
    pass


@dataclass
class Policy:
    kind: str
    cfg: ModelConfig
    lif: LifConfig
    params: dict[str, Tensor]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @classmethod
    def create(cls, kind: str, cfg: ModelConfig, lif: LifConfig | None = None, seed: int = 0, dtype=None) -> "Policy":
        return cls(kind, cfg, lif or LifConfig(), snn.init_params(cfg, seed, dtype))

    def forward(self, batch: TokenBatch, trace: SpikeTrace | None = None) -> Tensor:
        if self.kind == "snn":
            return snn.forward(batch, self.params, self.cfg, self.lif, trace)
        return dense.dt_forward(batch, self.params, self.cfg, trace)

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return snn.count_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError("parameter names differ from the model layout")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = v.astype(self.params[k].data.dtype, copy=True)


@dataclass
class Checkpoint:
    policy: Policy
    stats: NormStats
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in ckpt.policy.params.items():
        arr = np.ascontiguousarray(t.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "strl-checkpoint",
        "kind": ckpt.policy.kind,
        "model_config": asdict(ckpt.policy.cfg),
        "lif_config": asdict(ckpt.policy.lif),
        "norm_stats": ckpt.stats.to_dict(),
        "meta": ckpt.meta,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        head = fh.read(12)
        if len(head) != 12:
            raise CheckpointError(f"{path}: truncated header")
        version, n = struct.unpack("<IQ", head)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        raw = fh.read(n)
    try:
        return json.loads(raw.decode("utf-8")), 20 + n
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, start = read_header(path)
    cfg = ModelConfig(**header["model_config"])
    lif = LifConfig(**header["lif_config"])
    data = Path(path).read_bytes()[start:]
    params = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        params[e["name"]] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    policy = Policy(header["kind"], cfg, lif, params)
    expected = set(snn.init_params(cfg, 0).keys())
    if set(params) != expected:
        raise CheckpointError(f"{path}: tensor names do not match the model layout")
    return Checkpoint(policy, NormStats.from_dict(header["norm_stats"]), header.get("meta", {}))
