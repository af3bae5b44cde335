"""Checkpoint container: length-prefixed JSON index followed by raw float64 arrays.

Layout::

    bytes 0..7    little-endian uint64 L, length of the index
    bytes 8..8+L  UTF-8 JSON {"version", "meta", "arrays": {name: {"shape", "offset"}}}
    remainder     concatenated little-endian float64 payloads; offsets are
                  relative to the start of this section
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

from .aam_head import ModelVariant, build_model
from .backbone_fpn import BackboneConfig
from .errors import ConfigurationError, FormatError

VERSION = "a2fpn-ckpt-v1"


def encode_checkpoint(state: Dict[str, np.ndarray], meta: dict) -> bytes:
    arrays, chunks, offset = {}, [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        arrays[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    index = json.dumps({"version": VERSION, "meta": meta, "arrays": arrays}, sort_keys=True).encode("utf-8")
    return struct.pack("<Q", len(index)) + index + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(buf) < 8:
        raise FormatError("checkpoint shorter than its length prefix", len(buf))
    (n,) = struct.unpack("<Q", buf[:8])
    if 8 + n > len(buf):
        raise FormatError(f"index length {n} runs past end of file", 8)
    try:
        index = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint index: {exc}", 8) from None
    if index.get("version") != VERSION:
        raise FormatError(f"unsupported checkpoint version {index.get('version')!r}", 8)
    base = 8 + n
    state = {}
    for name, info in index["arrays"].items():
        count = int(np.prod(info["shape"], dtype=np.int64))
        start = base + info["offset"]
        if start + 8 * count > len(buf):
            raise FormatError(f"array {name!r} truncated", start)
        state[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=start).reshape(info["shape"]).copy()
    return state, index["meta"]


def variant_meta(variant: ModelVariant, seed: int) -> dict:
    bb = variant.backbone
    return {
        "kind": variant.kind,
        "num_classes": variant.num_classes,
        "d_p": variant.d_p,
        "seed": seed,
        "stem_channels": bb.stem_channels,
        "stage_channels": list(bb.stage_channels),
        "blocks_per_stage": bb.blocks_per_stage,
    }


def save_checkpoint(path, model, state: Dict[str, np.ndarray] = None, extra: dict = None) -> None:
    meta = variant_meta(model.variant, model.seed)
    if extra:
        meta.update(extra)
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model.state_dict() if state is None else state, meta))


def load_checkpoint(path, expect_classes: int = None, expect_d_p: int = None):
    """Rebuild the model stored at ``path``; returns (model, meta)."""
    with open(path, "rb") as fh:
        state, meta = decode_checkpoint(fh.read())
    if expect_classes is not None and meta["num_classes"] != expect_classes:
        raise ConfigurationError(f"checkpoint has K={meta['num_classes']}, expected {expect_classes}")
    if expect_d_p is not None and meta["d_p"] != expect_d_p:
        raise ConfigurationError(f"checkpoint has d_p={meta['d_p']}, expected {expect_d_p}")
    bb = BackboneConfig(
        stem_channels=meta["stem_channels"],
        stage_channels=tuple(meta["stage_channels"]),
        blocks_per_stage=meta["blocks_per_stage"],
        pyramid_channels=meta["d_p"],
    )
    variant = ModelVariant(meta["kind"], meta["num_classes"], meta["d_p"], bb)
    model = build_model(variant, meta["seed"])
    model.load_state_dict(state)
    model.eval()
    return model, meta
