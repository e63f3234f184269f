"""Checkpoint file: text header followed by raw little-endian float32 payloads.

Layout::

    GGAN <version>
    [architecture]
    key = <json>
    [metadata]
    key = <json>
    [tensors]
    name dim0,dim1,...
    END
    <payload bytes, tensors in header order>
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import build_from_descriptor, describe
from .nn import Module

MAGIC = "GGAN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    architecture: dict
    tensors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    # -- conversion ---------------------------------------------------------
    @classmethod
    def from_module(cls, net: Module, prefix: str = "", metadata: dict | None = None,
                    role_key: str | None = None) -> "Checkpoint":
        ck = cls({})
        ck.add_module(net, role_key or describe(net)["role"], prefix)
        ck.metadata.update(metadata or {})
        return ck

    def add_module(self, net: Module, key: str, prefix: str = "") -> None:
        self.architecture[key] = describe(net)
        prefix = prefix or key + "."
        for name, arr in net.state_dict().items():
            self.tensors[prefix + name] = np.asarray(arr, dtype=np.float32)

    def build(self, key: str, prefix: str | None = None) -> Module:
        if key not in self.architecture:
            raise CheckpointError(f"checkpoint has no {key!r} network")
        net = build_from_descriptor(self.architecture[key])
        prefix = key + "." if prefix is None else prefix
        state = {name[len(prefix):]: arr for name, arr in self.tensors.items()
                 if name.startswith(prefix)}
        net.load_state_dict(state)
        return net

    # -- bytes --------------------------------------------------------------
    def to_bytes(self) -> bytes:
        lines = [f"{MAGIC} {FORMAT_VERSION}", "[architecture]"]
        lines += [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in self.architecture.items()]
        lines.append("[metadata]")
        lines += [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in self.metadata.items()]
        lines.append("[tensors]")
        payload = []
        for name, arr in self.tensors.items():
            if " " in name:
                raise CheckpointError(f"tensor name {name!r} contains a space")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            lines.append(f"{name} {','.join(str(d) for d in arr.shape)}")
            payload.append(arr.tobytes())
        lines.append("END")
        return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        end = blob.find(b"\nEND\n")
        if not blob.startswith(MAGIC.encode()) or end < 0:
            raise CheckpointError("not a checkpoint file")
        header = blob[:end].decode("utf-8").split("\n")
        magic, _, version = header[0].partition(" ")
        if magic != MAGIC:
            raise CheckpointError("bad magic")
        if version.strip() != str(FORMAT_VERSION):
            raise CheckpointError(f"unsupported checkpoint version {version!r}")
        section, arch, meta, shapes = None, {}, {}, []
        for line in header[1:]:
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                continue
            if section in ("architecture", "metadata"):
                key, _, value = line.partition(" = ")
                (arch if section == "architecture" else meta)[key] = json.loads(value)
            elif section == "tensors":
                name, _, dims = line.partition(" ")
                shape = tuple(int(d) for d in dims.split(",")) if dims else ()
                shapes.append((name, shape))
        pos = end + len(b"\nEND\n")
        tensors = {}
        for name, shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            tensors[name] = arr.reshape(shape).astype(np.float32)
            pos += 4 * count
        if pos != len(blob):
            raise CheckpointError("trailing bytes after tensor payload")
        return cls(arch, tensors, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
