"""Binary model checkpoints.

Layout (integers little-endian):

    magic "ICRL" | version u32 | entry_count u32
    per entry (sorted by name, so identical params give identical bytes):
        name_len u16 | name (UTF-8) | ndim u32 | dims u32 * ndim
        values, float32 little-endian
    config_len u32 | config text block (UTF-8 "key=value" lines, sorted)

The config block carries whatever run settings produced the parameters so
a checkpoint is self-describing across tools.
"""

from __future__ import annotations

import struct

import numpy as np

from .data import FormatError, _Reader
from .tensor import Tensor

CKPT_MAGIC = b"ICRL"
CKPT_VERSION = 1


def encode_config(config: dict) -> str:
    lines = []
    for key in sorted(config):
        value = config[key]
        text = str(value)
        if "\n" in text or "=" in str(key):
            raise FormatError(f"config entry {key!r} not representable as key=value")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + ("\n" if lines else "")


def decode_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


def save_checkpoint(path, params: dict[str, Tensor], config: dict) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = encode_config(config).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path, requires_grad: bool = True) -> tuple[dict[str, Tensor], dict[str, str]]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    count = r.u32("entry count")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name = r.take(r.u16("name length"), "name").decode("utf-8")
        ndim = r.u32("ndim")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "dims"))
        n_values = int(np.prod(dims)) if ndim else 1
        raw = r.take(4 * n_values, f"values of {name!r}")
        params[name] = Tensor(np.frombuffer(raw, dtype="<f4").reshape(dims).copy(),
                              requires_grad=requires_grad)
    config_len = r.u32("config length")
    config = decode_config(r.take(config_len, "config block").decode("utf-8"))
    if r.offset != len(blob):
        raise FormatError(f"{len(blob) - r.offset} trailing bytes at offset {r.offset}")
    return params, config
