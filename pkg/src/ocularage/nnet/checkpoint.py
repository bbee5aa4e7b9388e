"""Binary checkpoint format.

Layout: magic ``OCAG``, u32 LE version, u64 LE header length, UTF-8 JSON
header, then little-endian float32 blobs in the order the header lists them.
The header carries a SHA-256 of the blob payload so bit flips are caught.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpoint, IoError, VersionMismatch
from .network import Network
from .optim import AdamState

MAGIC = b"OCAG"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    network: Network
    optimizer: AdamState | None = None
    epoch: int = 0
    rng_state: dict | None = None
    metadata: dict = field(default_factory=dict)


def _blobs(ckpt: Checkpoint):
    for name, t in ckpt.network.state_tensors().items():
        yield f"net.{name}", t
    if ckpt.optimizer is not None:
        for name in sorted(ckpt.optimizer.m):
            yield f"adam.m.{name}", ckpt.optimizer.m[name]
            yield f"adam.v.{name}", ckpt.optimizer.v[name]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, payload = [], []
    for name, t in _blobs(ckpt):
        arr = np.ascontiguousarray(t, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = {
        "topology": ckpt.network.topology(),
        "precision": ckpt.network.precision,
        "tensors": entries,
        "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "payload_sha256": hashlib.sha256(b"".join(payload)).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
            f.write(raw)
            for chunk in payload:
                f.write(chunk)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size:
        raise CorruptCheckpoint("file shorter than the checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        tensors_meta = header["tensors"]
        topology = header["topology"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    offset = start + hlen
    expected = offset + 4 * sum(int(np.prod(e["shape"])) for e in tensors_meta)
    if expected != len(data):
        raise CorruptCheckpoint(f"payload length {len(data) - offset} does not match header "
                                f"({expected - offset} bytes)")
    digest = header.get("payload_sha256")
    if digest is not None and hashlib.sha256(data[offset:]).hexdigest() != digest:
        raise CorruptCheckpoint("payload checksum mismatch")
    tensors = {}
    for e in tensors_meta:
        n = int(np.prod(e["shape"]))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
        offset += 4 * n
    try:
        net = Network.from_topology(topology)
        net.load_state({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
    except Exception as exc:
        raise CorruptCheckpoint(f"topology does not match tensors: {exc}") from exc
    net.precision = header.get("precision", "fp32")
    opt = None
    if header.get("optimizer_step") is not None:
        opt = AdamState(step=header["optimizer_step"])
        for k, v in tensors.items():
            if k.startswith("adam.m."):
                opt.m[k[7:]] = v
            elif k.startswith("adam.v."):
                opt.v[k[7:]] = v
    return Checkpoint(net, opt, header.get("epoch", 0), header.get("rng_state"),
                      header.get("metadata", {}))
