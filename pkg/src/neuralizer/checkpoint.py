"""Versioned checkpoint persistence.

NLZ1 layout: 4-byte magic ``NLZ1``, little-endian u16 format version,
u32-length-prefixed JSON metadata block, u32 tensor count, then a tensor
table of (u16 name length, utf-8 name, NTF1 tensor blob) entries.
Parameters and Adam moments live in the tensor table; everything else
(model kind and config, step, best validation loss, RNG state, history,
holdout) is metadata. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ntf import FormatError, dump_ntf, parse_ntf
from .optim import AdamState

MAGIC = b"NLZ1"
VERSION = 1


@dataclass
class Checkpoint:
    model_kind: str                      # "neuralizer" | "baseline"
    model_config: dict
    params: dict[str, np.ndarray]
    adam: AdamState
    step: int = 0
    best_val: float = float("inf")
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    holdout: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _metadata(ckpt: Checkpoint) -> dict:
    return {
        "model_kind": ckpt.model_kind,
        "model_config": ckpt.model_config,
        "step": ckpt.step,
        "best_val": ckpt.best_val,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "holdout": ckpt.holdout,
        "meta": ckpt.meta,
        "adam": {"step": ckpt.adam.step, "lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1,
                 "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
    }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        tensors[f"param.{name}"] = arr
    for name, arr in ckpt.adam.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in ckpt.adam.v.items():
        tensors[f"adam.v.{name}"] = arr

    meta_blob = json.dumps(_metadata(ckpt)).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", ckpt.version),
             struct.pack("<I", len(meta_blob)), meta_blob,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(dump_ntf(tensors[name]))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", buf, 6)
    pos = 10
    if len(buf) < pos + meta_len + 4:
        raise FormatError("truncated checkpoint metadata")
    try:
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint metadata: {e}") from None
    pos += meta_len
    (n_tensors,) = struct.unpack_from("<I", buf, pos)
    pos += 4

    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        if len(buf) < pos + 2:
            raise FormatError("truncated tensor table")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + name_len:
            raise FormatError("truncated tensor name")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        arr, pos = parse_ntf(buf, pos)
        tensors[name] = arr
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after tensor table")

    params = {n[len("param."):]: a for n, a in tensors.items() if n.startswith("param.")}
    adam_meta = meta["adam"]
    adam = AdamState(
        step=int(adam_meta["step"]), lr=adam_meta["lr"], beta1=adam_meta["beta1"],
        beta2=adam_meta["beta2"], eps=adam_meta["eps"],
        m={n[len("adam.m."):]: a for n, a in tensors.items() if n.startswith("adam.m.")},
        v={n[len("adam.v."):]: a for n, a in tensors.items() if n.startswith("adam.v.")},
    )
    if set(adam.m) and set(adam.m) != set(params):
        raise FormatError("optimizer moments do not match parameter names")

    return Checkpoint(
        model_kind=meta["model_kind"],
        model_config=meta["model_config"],
        params=params,
        adam=adam,
        step=int(meta["step"]),
        best_val=float(meta["best_val"]),
        rng_state=meta.get("rng_state"),
        history=meta.get("history", []),
        holdout=meta.get("holdout"),
        meta=meta.get("meta", {}),
        version=version,
    )
