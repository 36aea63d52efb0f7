"""Binary checkpoint format.

Layout (little endian)::

    b"CRLCKPT"  u32 version  u32 network_count
    per network:  u16 name_len  name(utf8)  u32 layer_count
      per layer:  u32 rows  u32 cols  f64[rows*cols] weights (row major)
                  f64[rows] biases  u8 activation_tag  f64 budget (inf = none)
    u32 meta_len  meta (utf8 JSON)

Floats are stored verbatim, so a round trip is bit exact.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .net import ACTIVATION_TAGS, TAG_ACTIVATIONS, LipschitzMlp

MAGIC = b"CRLCKPT"
VERSION = 1


def _write_net(buf, name, net):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(net.weights)))
    for W, b, act, budget in zip(net.weights, net.biases, net.activations, net.budgets):
        rows, cols = W.shape
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        buf.write(struct.pack("<B", ACTIVATION_TAGS[act]))
        buf.write(struct.pack("<d", budget))


def dumps(networks, meta=None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(networks)))
    for name, net in networks.items():
        _write_net(buf, name, net)
    raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, k):
        if self.pos + k > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + k]
        self.pos += k
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


@dataclass
class Checkpoint:
    networks: dict
    meta: dict
    version: int = VERSION


def loads(data):
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    nets = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (layers,) = r.unpack("<I")
        Ws, bs, acts, budgets = [], [], [], []
        for _ in range(layers):
            rows, cols = r.unpack("<II")
            Ws.append(np.frombuffer(r.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(float))
            bs.append(np.frombuffer(r.take(8 * rows), dtype="<f8").astype(float))
            (tag,) = r.unpack("<B")
            if tag not in TAG_ACTIVATIONS:
                raise CheckpointError(f"unknown activation tag {tag}")
            acts.append(TAG_ACTIVATIONS[tag])
            budgets.append(r.unpack("<d")[0])
        try:
            nets[name] = LipschitzMlp.from_layers(Ws, bs, acts, budgets)
        except Exception as exc:
            raise CheckpointError(f"network {name!r} is malformed: {exc}") from None
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"metadata is not valid JSON: {exc}") from None
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint metadata")
    return Checkpoint(nets, meta, version)


def save(path, networks, meta=None):
    data = dumps(networks, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    return loads(data)


def encode_float(v):
    """JSON-safe float (infinities become strings)."""
    v = float(v)
    return v if math.isfinite(v) else repr(v)


def decode_float(v):
    return float(v)
