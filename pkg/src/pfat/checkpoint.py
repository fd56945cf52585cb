"""Binary model checkpoints.

Layout: the magic ``PFATCKPT``, a little-endian uint32 header length, a
UTF-8 JSON header (sorted keys), then every array as row-major
little-endian float64 in the order listed by ``header["arrays"]``.
Identical bytes mean identical models.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import AdapterLayer, ClientModel, FusedModel

MAGIC = b"PFATCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(model):
    if isinstance(model, ClientModel):
        for r, layer in enumerate(model.layers):
            yield f"layer{r}.w_pre", layer.w_pre
            yield f"layer{r}.a_fixed", layer.a_fixed
            yield f"layer{r}.b_train", layer.b_train
    else:
        for r, w in enumerate(model.layers):
            yield f"layer{r}.weight", w
    yield "classifier", model.classifier


def to_bytes(model: ClientModel | FusedModel) -> bytes:
    adapter = isinstance(model, ClientModel)
    weights = model.effective_weights() if not adapter else [l.w_pre for l in model.layers]
    arrays = list(_arrays(model))
    header = {
        "version": VERSION,
        "kind": "adapter" if adapter else "fused",
        "client_id": int(model.client_id),
        "num_layers": len(model.layers),
        "dims": [int(weights[0].shape[0])] + [int(w.shape[1]) for w in weights],
        "rank": int(model.layers[0].rank) if adapter and model.layers else 0,
        "C": int(model.num_classes),
        "activations": list(model.activations),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<I", len(head)) + head + body


def from_bytes(data: bytes) -> ClientModel | FusedModel:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(data[start:start + n].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    offset = start + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        chunk = data[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"truncated checkpoint at {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(data):
        raise CheckpointError("trailing bytes after last array")
    acts = header["activations"]
    L = header["num_layers"]
    if header["kind"] == "adapter":
        layers = [
            AdapterLayer(arrays[f"layer{r}.w_pre"], arrays[f"layer{r}.a_fixed"],
                         arrays[f"layer{r}.b_train"], acts[r])
            for r in range(L)
        ]
        return ClientModel(layers, arrays["classifier"], header["client_id"])
    return FusedModel([arrays[f"layer{r}.weight"] for r in range(L)], acts,
                      arrays["classifier"], header["client_id"])


def save(model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model))


def load(path):
    return from_bytes(Path(path).read_bytes())
