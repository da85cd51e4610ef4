"""Binary checkpoint and embedding file formats.

Checkpoint (``.mfcp``)::

    b"MFCP" | u32 version | u32 header_len | header (UTF-8 JSON) | payloads

The header holds ``config``, ``seed``, free-form ``meta`` and an ordered
``tensors`` list of ``{"name", "shape"}``.  Payloads follow in the same
order, each a C-order float32 little-endian array.

Embeddings (``.mfl``)::

    b"MFL1" | u32 samples | u32 channels | u32 dim
    | availability bitmap: samples*channels bits, row-major, LSB-first,
      zero-padded to a whole byte
    | float32 little-endian vectors [samples, channels, dim]

All integers are little-endian.  A JSON sidecar (``<file>.json``) carries
channel membership, sample ids and the config echo.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .masking import ChannelSet
from .model import EmbeddingSet

CHECKPOINT_MAGIC = b"MFCP"
CHECKPOINT_VERSION = 1
EMBEDDING_MAGIC = b"MFL1"


class FormatError(ValueError):
    pass


def save_checkpoint(path, state: dict, config: dict, seed: int, meta: dict | None = None) -> None:
    tensors = []
    payloads = []
    for name, t in state.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.asarray(arr, dtype="<f4", order="C")
        tensors.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"config": config, "seed": int(seed), "meta": meta or {}, "tensors": tensors},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[OrderedDict, dict]:
    """Returns (ordered name -> float32 tensor, header dict)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    state = OrderedDict()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(raw):
            raise FormatError(f"{path}: truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return state, header


def write_embeddings(path, emb: EmbeddingSet, extra: dict | None = None) -> None:
    N, C, D = emb.vectors.shape
    bits = np.packbits(np.asarray(emb.available, dtype=bool).ravel(), bitorder="little")
    vectors = np.where(emb.available[..., None], emb.vectors, 0.0).astype("<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<III", N, C, D))
        fh.write(bits.tobytes())
        fh.write(vectors.tobytes())
    sidecar = {
        "mode": emb.mode,
        "channels": [list(c.members) for c in emb.channels],
        "ids": list(emb.ids),
        **(extra or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1))


def read_embeddings(path) -> tuple[EmbeddingSet, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    N, C, D = struct.unpack_from("<III", raw, 4)
    nbits = (N * C + 7) // 8
    if 16 + nbits + 4 * N * C * D != len(raw):
        raise FormatError(f"{path}: size does not match header counts")
    bits = np.frombuffer(raw, dtype=np.uint8, count=nbits, offset=16)
    available = np.unpackbits(bits, count=N * C, bitorder="little").astype(bool).reshape(N, C)
    vectors = np.frombuffer(raw, dtype="<f4", count=N * C * D, offset=16 + nbits).reshape(N, C, D)
    side_path = Path(str(path) + ".json")
    sidecar = json.loads(side_path.read_text()) if side_path.exists() else {}
    channels = [ChannelSet(tuple(c)) for c in sidecar.get("channels", [])]
    emb = EmbeddingSet(vectors.astype(np.float32), available, channels, sidecar.get("mode", ""),
                       sidecar.get("ids", []))
    return emb, sidecar
