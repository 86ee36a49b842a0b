"""Framework-agnostic checkpoint files.

Layout (all little-endian):

    bytes 0..8    magic ``OPADCKPT``
    bytes 8..12   u32 format version (currently 1)
    bytes 12..16  u32 header length N
    bytes 16..16+N  header JSON: variant tag, width multiplier, attention
                    weights and the ordered tensor index (name/dtype/shape)
    rest          raw tensor buffers in index order

Loaders refuse unknown magic or versions outright rather than guessing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .dual_branch import AblationVariant, IsapadNet, NetConfig, make_variant
from .errors import CheckpointError
from .isam import AttentionConfig

MAGIC = b"OPADCKPT"
VERSION = 1


def save_checkpoint(net: IsapadNet, path: str | Path, extra: dict | None = None) -> None:
    state = net.state_dict()
    index = []
    buffers = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":  # keep everything little-endian on disk
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())
    header = {
        "variant": net.variant.value,
        "width_multiplier": net.cfg.width_multiplier,
        "isam_base_width": net.cfg.isam_base_width,
        "attention": {"w1": net.attention.w1, "w2": net.attention.w2},
        "tensors": index,
        "extra": extra or {},
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for buf in buffers:
            f.write(buf)


def load_checkpoint(path: str | Path) -> tuple[IsapadNet, dict]:
    """Rebuild the network a checkpoint describes and load its weights."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    try:
        variant = AblationVariant(header["variant"])
        cfg = NetConfig(
            width_multiplier=header["width_multiplier"],
            isam_base_width=header.get("isam_base_width"),
        )
        attention = AttentionConfig(**header["attention"])
        index = header["tensors"]
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete header: {exc}") from exc

    net = make_variant(variant, cfg, attention, seed=0)
    state = {}
    offset = 16 + hlen
    for item in index:
        dtype = np.dtype(item["dtype"])
        shape = tuple(item["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated tensor {item['name']}")
        state[item["name"]] = torch.from_numpy(
            np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        )
        offset += nbytes
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not fit the declared topology: {exc}") from exc
    return net, header.get("extra", {})
