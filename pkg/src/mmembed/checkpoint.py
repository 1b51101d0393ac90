"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"MMEMBCK1"
    4 bytes   uint32 header length H
    H bytes   UTF-8 header text
    ...       tensor payloads, float32 little-endian, row-major, in header order

The header is ``key = value`` lines grouped in sections::

    format_version = 1
    [config]
    d_model = 64
    ...
    [meta]
    kind = cpt
    [tensors]
    token_embedding.weight = 128,64
    ...

Values are written with ``repr`` so parsing them back and re-saving produces
the same bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .errors import InputError

MAGIC = b"MMEMBCK1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: BackboneConfig
    tensors: dict[str, np.ndarray]  # float32, insertion order is file order
    meta: dict[str, str] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(p)}


def _format_value(v) -> str:
    if isinstance(v, str):
        return v
    return repr(v)


def _parse_config(items: dict[str, str]) -> BackboneConfig:
    kwargs = {}
    for f in fields(BackboneConfig):
        if f.name not in items:
            raise InputError(f"checkpoint header is missing config key {f.name!r}")
        raw = items[f.name]
        kwargs[f.name] = int(raw) if f.type in (int, "int") else raw
    return BackboneConfig(**kwargs)


def encode_header(ckpt: Checkpoint) -> bytes:
    lines = [f"format_version = {FORMAT_VERSION}", "[config]"]
    for f in fields(BackboneConfig):
        lines.append(f"{f.name} = {_format_value(getattr(ckpt.config, f.name))}")
    lines.append("[meta]")
    for k, v in ckpt.meta.items():
        lines.append(f"{k} = {v}")
    lines.append("[tensors]")
    for name, arr in ckpt.tensors.items():
        lines.append(f"{name} = {','.join(str(d) for d in arr.shape)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def save(ckpt: Checkpoint, path: str | Path) -> None:
    header = encode_header(ckpt)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C"))


def load(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise InputError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = data[12 : 12 + hlen].decode("utf-8")
    sections: dict[str, dict[str, str]] = {"": {}}
    current = ""
    for line in header.splitlines():
        if not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = {}
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise InputError(f"{path}: malformed header line {line!r}")
        sections[current][key] = value
    version = int(sections[""].get("format_version", "-1"))
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint format version {version}")
    config = _parse_config(sections.get("config", {}))
    offset = 12 + hlen
    tensors: dict[str, np.ndarray] = {}
    for name, shape_txt in sections.get("tensors", {}).items():
        shape = tuple(int(d) for d in shape_txt.split(",")) if shape_txt else ()
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(data):
            raise InputError(f"{path}: truncated payload for tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise InputError(f"{path}: {len(data) - offset} trailing bytes after tensor payloads")
    return Checkpoint(config=config, tensors=tensors, meta=dict(sections.get("meta", {})))


def state_to_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{k}": v.detach().cpu().to(torch.float32).numpy().copy()
        for k, v in module.state_dict().items()
    }


def load_module_state(module: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    unexpected = sorted(set(tensors) - set(own))
    if missing or unexpected:
        raise InputError(f"checkpoint tensors do not match module: missing={missing} unexpected={unexpected}")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise InputError(f"shape mismatch for {k}: checkpoint {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    dtype = next(iter(own.values())).dtype
    module.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})


def config_diff(a: BackboneConfig, b: BackboneConfig) -> list[str]:
    """Shape-relevant differences between two configs (precision and attention mode ignored)."""
    out = []
    for f in fields(BackboneConfig):
        if f.name in ("dtype", "attention_mode"):
            continue
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if va != vb:
            out.append(f"{f.name}: checkpoint={va!r} config={vb!r}")
    return out
