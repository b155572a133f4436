"""Versioned binary container for named float64 arrays.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8
JSON header, then the raw little-endian float64 array bytes back to
back.  The header records the schema version, free-form metadata, and
one entry per array (name, shape, offset into the payload).  Round
trips are bit-exact.  Writes go through a temp file and an atomic
rename, so a crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .model import Backbone, BackboneConfig, ClassifierHead
from .pet import (
    AdapterParams,
    AttachmentPoint,
    LoRAParams,
    LowRankDelta,
    PETSet,
    PrefixParams,
)
from .tensor import Tensor

MAGIC = b"PETCKPT\x01"
SCHEMA = 1


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_params(path: str, named, meta: dict | None = None) -> None:
    """Write named arrays (or tensors) plus metadata to one file."""
    entries = []
    chunks = []
    offset = 0
    for name, value in named:
        arr = np.ascontiguousarray(
            value.data if isinstance(value, Tensor) else value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"schema": SCHEMA, "meta": meta or {}, "entries": entries},
                        sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    atomic_write_bytes(path, payload)


def load_params(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header["schema"] != SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {header['schema']}")
    body = blob[16 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, header["meta"]


# ---------------------------------------------------------------------------
# model pieces


def save_backbone(path: str, backbone: Backbone) -> None:
    meta = {"kind": "backbone", "frozen": backbone.frozen,
            "config": vars(backbone.cfg)}
    save_params(path, backbone.named_params(), meta)


def load_backbone(path: str) -> Backbone:
    arrays, meta = load_params(path)
    if meta.get("kind") != "backbone":
        raise ValueError(f"{path} does not hold a backbone")
    cfg = BackboneConfig(**meta["config"])
    params = {name: Tensor(arr) for name, arr in arrays.items()}
    bb = Backbone(cfg, params)
    if meta["frozen"]:
        bb.freeze()
    return bb


def save_head(path: str, head: ClassifierHead) -> None:
    meta = {"kind": "head", "feature_dim": head.feature_dim,
            "ranges": [list(r) for r in head.ranges]}
    save_params(path, head.named_params(), meta)


def load_head(path: str) -> ClassifierHead:
    arrays, meta = load_params(path)
    if meta.get("kind") != "head":
        raise ValueError(f"{path} does not hold a classifier head")
    head = ClassifierHead(meta["feature_dim"])
    for idx, rng in enumerate(meta["ranges"]):
        w = Tensor(arrays[f"head{idx}.w"])
        b = Tensor(arrays[f"head{idx}.b"])
        head.blocks.append((w, b))
        head.ranges.append((int(rng[0]), int(rng[1])))
    return head


def save_petset(path: str, pets: PETSet) -> None:
    meta = {"kind": "petset", "pet_kind": pets.kind, "size": pets.size,
            "extra": pets.extra,
            "points": [{"block": pt.block, "site": pt.site}
                       for pt, _ in pets.entries],
            "prefix_flags": _prefix_flags(pets)}
    save_params(path, pets.named_params(), meta)


def _prefix_flags(pets: PETSet) -> dict:
    for _, params in pets.entries:
        if isinstance(params, PrefixParams):
            return {"compensate": params.compensate,
                    "learnable_scales": params.learnable_scales,
                    "lambda_requires_grad": params.lambda_requires_grad}
    return {}


def load_petset(path: str) -> PETSet:
    arrays, meta = load_params(path)
    if meta.get("kind") != "petset":
        raise ValueError(f"{path} does not hold a module set")
    kind = meta["pet_kind"]
    extra = meta["extra"]
    entries = []
    for point in meta["points"]:
        block, site = point["block"], point["site"]
        pre = f"b{block}.{site}."

        def arr(name):
            return Tensor(arrays[pre + name])

        if kind == "adapter":
            scale = arr("scale") if (pre + "scale") in arrays else None
            params = AdapterParams(arr("w_down"), arr("w_up"), scale,
                                   extra.get("mode", "parallel"),
                                   extra.get("activation", "gelu"))
        elif kind == "lora":
            params = LoRAParams(
                LowRankDelta(arr("q.w_down"), arr("q.w_up"), arr("q.scale")),
                LowRankDelta(arr("v.w_down"), arr("v.w_up"), arr("v.scale")))
        elif kind == "prefix":
            flags = meta["prefix_flags"]
            learnable = flags["learnable_scales"]
            s_k = arr("s_k") if learnable else Tensor(np.asarray(1.0))
            s_v = arr("s_v") if learnable else Tensor(np.asarray(1.0))
            params = PrefixParams(arr("p_k"), arr("p_v"), s_k, s_v,
                                  flags["compensate"], learnable,
                                  flags["lambda_requires_grad"])
        else:
            raise ValueError(f"unknown module kind {kind!r} in {path}")
        entries.append((AttachmentPoint(block, site), params))
    return PETSet(kind, meta["size"], entries, extra)
