"""CSRP v1 model container.

Layout::

    b"CSRP" | u32 LE version (=1) | u64 LE topology length L
    L bytes of UTF-8 JSON topology | tensor payload

The topology lists layers and head nodes with their hyperparameters and,
for every tensor, its name, shape and byte offset into the payload. Tensors
are stored back to back, row-major, little-endian fp32 or fp64.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .graph import (
    Branch,
    ModelGraph,
    ModuleNode,
    SequentialLayerSpec,
)
from .runtime import Activation, BatchNormParams, Linear, SeParams, TdnnLayer

MAGIC = b"CSRP"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class PayloadMismatchError(ContainerError):
    pass


class _Writer:
    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).newbyteorder("<")
        self.chunks: list[bytes] = []
        self.offset = 0

    def tensor(self, name, arr) -> dict:
        a = np.ascontiguousarray(np.asarray(arr), dtype=self.dtype)
        raw = a.tobytes()
        entry = {"name": name, "shape": list(a.shape), "offset": self.offset, "nbytes": len(raw)}
        self.chunks.append(raw)
        self.offset += len(raw)
        return entry


def _conv_doc(c: TdnnLayer, w: _Writer, prefix: str) -> dict:
    tensors = [w.tensor(f"{prefix}.weight", c.weight), w.tensor(f"{prefix}.bias", c.bias)]
    if c.pad_value is not None:
        tensors.append(w.tensor(f"{prefix}.pad_value", c.pad_value))
    return {"dilation": c.dilation, "groups": c.groups, "tensors": tensors}


def _bn_doc(b: BatchNormParams, w: _Writer, prefix: str) -> dict:
    return {"eps": b.eps, "tensors": [w.tensor(f"{prefix}.{k}", getattr(b, k))
                                      for k in ("mean", "std", "scale", "shift")]}


def _node_doc(node: ModuleNode, w: _Writer, prefix: str) -> dict:
    p = node.payload
    doc = {"kind": node.kind}
    if node.kind == "conv":
        doc.update(_conv_doc(p, w, prefix))
    elif node.kind == "batchnorm":
        doc.update(_bn_doc(p, w, prefix))
    elif node.kind == "activation":
        doc.update({"activation": p.kind, "slope": p.slope})
    elif node.kind == "se":
        doc["tensors"] = [w.tensor(f"{prefix}.{k}", getattr(p, k))
                          for k in ("w_reduce", "b_reduce", "w_expand", "b_expand")]
    elif node.kind == "fc":
        doc["tensors"] = [w.tensor(f"{prefix}.weight", p.weight), w.tensor(f"{prefix}.bias", p.bias)]
    elif node.kind == "branch_group":
        branches = []
        for k, br in enumerate(p):
            bd = {"identity": br.conv is None}
            if br.pre_bn is not None:
                bd["pre_bn"] = _bn_doc(br.pre_bn, w, f"{prefix}.b{k}.bn")
            if br.conv is not None:
                bd["conv"] = _conv_doc(br.conv, w, f"{prefix}.b{k}.conv")
            branches.append(bd)
        doc["branches"] = branches
    return doc


def to_bytes(model: ModelGraph) -> bytes:
    w = _Writer(model.dtype)
    topo = {
        "format": "CSRP",
        "version": VERSION,
        "name": model.name,
        "dtype": model.dtype,
        "seed": model.seed,
        "training": model.training,
        "meta": model.meta,
        "layers": [
            {"order": layer.order,
             "nodes": [_node_doc(n, w, f"l{li}.n{ni}") for ni, n in enumerate(layer.nodes)]}
            for li, layer in enumerate(model.layers)
        ],
        "head": [_node_doc(n, w, f"h{ni}") for ni, n in enumerate(model.head)],
        "payload_bytes": w.offset,
    }
    text = json.dumps(topo, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(w.chunks)


def save(model: ModelGraph, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


class _Reader:
    def __init__(self, payload: memoryview, dtype: str):
        self.payload = payload
        self.dtype = np.dtype(dtype).newbyteorder("<")
        self.cursor = 0

    def tensors(self, doc: dict) -> dict[str, np.ndarray]:
        out = {}
        for t in doc["tensors"]:
            shape = tuple(t["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * self.dtype.itemsize
            if t["offset"] != self.cursor or t["nbytes"] != nbytes:
                raise PayloadMismatchError(f"tensor {t['name']} at offset {t['offset']} ({t['nbytes']} bytes) "
                                           f"does not follow the previous tensor at {self.cursor}")
            end = self.cursor + nbytes
            if end > len(self.payload):
                raise TruncatedPayloadError(f"payload ends before tensor {t['name']} "
                                            f"({len(self.payload)} < {end} bytes)")
            arr = np.frombuffer(self.payload[self.cursor:end], dtype=self.dtype).reshape(shape)
            out[t["name"].rsplit(".", 1)[1]] = arr.astype(self.dtype.newbyteorder("="))
            self.cursor = end
        return out


def _conv_from(doc, r: _Reader) -> TdnnLayer:
    t = r.tensors(doc)
    return TdnnLayer(t["weight"], t["bias"], doc["dilation"], doc["groups"], t.get("pad_value"))


def _bn_from(doc, r: _Reader) -> BatchNormParams:
    t = r.tensors(doc)
    return BatchNormParams(t["mean"], t["std"], t["scale"], t["shift"], doc["eps"])


def _node_from(doc, r: _Reader) -> ModuleNode:
    kind = doc["kind"]
    if kind == "conv":
        return ModuleNode(kind, _conv_from(doc, r))
    if kind == "batchnorm":
        return ModuleNode(kind, _bn_from(doc, r))
    if kind == "activation":
        return ModuleNode(kind, Activation(doc["activation"], doc["slope"]))
    if kind == "se":
        t = r.tensors(doc)
        return ModuleNode(kind, SeParams(t["w_reduce"], t["b_reduce"], t["w_expand"], t["b_expand"]))
    if kind == "stats_pool":
        return ModuleNode(kind)
    if kind == "fc":
        t = r.tensors(doc)
        return ModuleNode(kind, Linear(t["weight"], t["bias"]))
    if kind == "branch_group":
        branches = []
        for bd in doc["branches"]:
            pre = _bn_from(bd["pre_bn"], r) if "pre_bn" in bd else None
            conv = None if bd["identity"] else _conv_from(bd["conv"], r)
            branches.append(Branch(conv, pre))
        return ModuleNode(kind, branches)
    raise ContainerError(f"unknown node kind {kind!r}")


def from_bytes(data: bytes) -> ModelGraph:
    if len(data) < _HEADER.size:
        if not MAGIC.startswith(bytes(data[:4])):
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError(f"file is {len(data)} bytes, shorter than the header")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, this reader handles {VERSION}")
    start = _HEADER.size
    if start + length > len(data):
        raise TruncatedPayloadError("file ends inside the topology document")
    try:
        topo = json.loads(bytes(data[start:start + length]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable topology document: {exc}") from exc
    payload = memoryview(data)[start + length:]
    declared = topo.get("payload_bytes")
    if declared is not None and len(payload) < declared:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {declared} bytes present")
    r = _Reader(payload, topo["dtype"])
    try:
        layers = [SequentialLayerSpec([_node_from(n, r) for n in layer["nodes"]], layer["order"])
                  for layer in topo["layers"]]
        head = [_node_from(n, r) for n in topo["head"]]
    except KeyError as exc:
        raise ContainerError(f"topology document is missing field {exc}") from exc
    if r.cursor != len(payload) or (declared is not None and declared != r.cursor):
        raise PayloadMismatchError(f"topology describes {r.cursor} payload bytes, file holds {len(payload)}")
    return ModelGraph(layers, head, name=topo["name"], dtype=topo["dtype"], seed=topo["seed"],
                      training=topo["training"], meta=topo.get("meta", {}))


def load(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
