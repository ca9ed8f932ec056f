"""Dataset containers, the FSDS on-disk format, class splits, synthetic
cluster generators, and the flip/crop augmentation used in training.

FSDS layout (all integers little-endian):

    magic "FSDS" | version u32 | class_count u32
    per class:
        name_len u16 | name (UTF-8)
        instance_count u32 | channels u32 | height u32 | width u32
        instance data, float32, row-major
    crc32 u32 over all preceding bytes

Containers are immutable after load and safe to share read-only.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractViolation

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1


class FormatError(ContractViolation):
    """Malformed file; the message names the failing byte offset."""


@dataclass
class DatasetContainer:
    class_names: list[str]
    instances: list[np.ndarray]          # one (n_i, c, h, w) float32 array per class
    provenance: str = ""

    def __post_init__(self):
        if not self.class_names:
            raise ContractViolation("container must hold at least one class")
        if len(self.class_names) != len(self.instances):
            raise ContractViolation("class name and instance list lengths differ")
        shape = None
        for name, block in zip(self.class_names, self.instances):
            if block.ndim != 4 or block.shape[0] < 1:
                raise ContractViolation(f"class {name!r} needs >= 1 instance of shape (c,h,w)")
            if shape is None:
                shape = block.shape[1:]
            elif block.shape[1:] != shape:
                raise ContractViolation(
                    f"class {name!r} instance shape {block.shape[1:]} != {shape}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def instance_shape(self) -> tuple[int, int, int]:
        return tuple(self.instances[0].shape[1:])


# -- FSDS serialization --------------------------------------------------------


def save_container(container: DatasetContainer, path) -> None:
    """Write FSDS bytes; identical containers produce identical files."""
    parts = [FSDS_MAGIC, struct.pack("<I", FSDS_VERSION),
             struct.pack("<I", container.n_classes)]
    for name, block in zip(container.class_names, container.instances):
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        n, c, h, w = block.shape
        parts.append(struct.pack("<IIII", n, c, h, w))
        parts.append(np.ascontiguousarray(block, dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"truncated file: needed {n} bytes for {what} "
                              f"at offset {self.offset}")
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_container(path) -> DatasetContainer:
    """Parse and validate an FSDS file (magic, version, checksum)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise FormatError("truncated file: missing checksum at offset 0")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    r = _Reader(body)
    magic = r.take(4, "magic")
    if magic != FSDS_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    version = r.u32("version")
    if version != FSDS_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    n_classes = r.u32("class count")
    if n_classes == 0:
        raise FormatError("empty class list at offset 8")
    names, blocks = [], []
    for _ in range(n_classes):
        name_len = r.u16("name length")
        names.append(r.take(name_len, "class name").decode("utf-8"))
        n, c, h, w = (r.u32(f) for f in ("instance count", "channels", "height", "width"))
        at = r.offset
        raw = r.take(n * c * h * w * 4, "instance data")
        blocks.append(np.frombuffer(raw, dtype="<f4").reshape(n, c, h, w).copy())
        if n < 1:
            raise FormatError(f"class with zero instances at offset {at}")
    if r.offset != len(body):
        raise FormatError(f"{len(body) - r.offset} trailing bytes at offset {r.offset}")
    if stored_crc != actual_crc:
        raise FormatError(f"checksum mismatch at offset {len(body)}: "
                          f"stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    return DatasetContainer(names, blocks, provenance=str(path))


# -- class splits ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        groups = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ContractViolation("split sections overlap")


def split_classes(container: DatasetContainer, ratios=None, lists=None,
                  seed: int = 0) -> SplitSpec:
    """Disjoint train/val/test class partitions.

    Either ``ratios`` (train, val, test fractions summing to <= 1, applied
    to a seed-shuffled class order) or explicit ``lists`` of global class
    ids.  Overlapping lists are rejected.
    """
    if (ratios is None) == (lists is None):
        raise ContractViolation("provide exactly one of ratios or lists")
    n = container.n_classes
    if lists is not None:
        train, val, test = (tuple(int(i) for i in part) for part in lists)
        for i in (*train, *val, *test):
            if not 0 <= i < n:
                raise ContractViolation(f"class id {i} outside [0,{n})")
        return SplitSpec(train, val, test)
    r_train, r_val, r_test = (float(r) for r in ratios)
    if min(r_train, r_val, r_test) < 0 or r_train + r_val + r_test > 1 + 1e-9:
        raise ContractViolation("ratios must be non-negative and sum to <= 1")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(r_train * n))
    n_val = int(round(r_val * n))
    n_test = int(round(r_test * n))
    if n_train + n_val + n_test > n:
        n_test = n - n_train - n_val
    train = tuple(int(i) for i in order[:n_train])
    val = tuple(int(i) for i in order[n_train:n_train + n_val])
    test = tuple(int(i) for i in order[n_train + n_val:n_train + n_val + n_test])
    return SplitSpec(train, val, test)


def save_split(split: SplitSpec, path) -> None:
    lines = []
    for section, ids in (("train", split.train), ("val", split.val), ("test", split.test)):
        lines.append(f"[{section}]")
        lines.extend(str(i) for i in ids)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_split(path) -> SplitSpec:
    sections: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    current = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise FormatError(f"unknown split section {current!r} on line {lineno}")
            elif current is None:
                raise FormatError(f"class id before any section on line {lineno}")
            else:
                sections[current].append(int(line))
    return SplitSpec(tuple(sections["train"]), tuple(sections["val"]),
                     tuple(sections["test"]))


# -- synthetic clusters -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 8
    per_class: int = 30
    channels: int = 3
    size: int = 32
    separation: float = 10.0
    noise: float = 0.1
    outlier_fraction: float = 0.0
    outlier_rule: str = "other-class"   # or "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.separation <= 0:
            raise ContractViolation("separation must be > 0")
        if not 0 <= self.outlier_fraction < 1:
            raise ContractViolation("outlier fraction must lie in [0,1)")
        if self.outlier_rule not in ("other-class", "uniform"):
            raise ContractViolation(f"unknown outlier rule {self.outlier_rule!r}")


def _class_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """One center image per class: mid-gray plus ``separation`` times a
    random unit direction in flattened image space, clipped to [0,1].
    Distinct centers then sit roughly sqrt(2)*separation apart, while the
    within-class noise has scale ``noise`` along any fixed direction, which
    is what makes a nearest-centroid oracle essentially perfect at the
    default separation/noise ratio."""
    dim = spec.channels * spec.size * spec.size
    directions = rng.standard_normal((spec.classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = np.clip(0.5 + spec.separation * directions, 0.0, 1.0)
    return centers.reshape(spec.classes, spec.channels, spec.size, spec.size)


def _draw(center: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(center + noise * rng.standard_normal(center.shape), 0.0, 1.0)


def _generate(spec: SyntheticSpec) -> tuple[DatasetContainer, list[np.ndarray]]:
    # outlier replacement uses its own derived stream, so the clean portion
    # of the dataset is bit-identical across outlier fractions
    rng = np.random.default_rng(spec.seed)
    outlier_rng = np.random.default_rng([spec.seed, 0x0F1A65])
    centers = _class_centers(spec, rng)
    names = [f"blob{i:03d}" for i in range(spec.classes)]
    blocks: list[np.ndarray] = []
    flags: list[np.ndarray] = []
    n_out = int(round(spec.outlier_fraction * spec.per_class))
    for ci in range(spec.classes):
        block = np.clip(
            centers[ci] + spec.noise * rng.standard_normal(
                (spec.per_class, spec.channels, spec.size, spec.size)),
            0.0, 1.0)
        flag = np.zeros(spec.per_class, dtype=bool)
        if n_out:
            chosen = outlier_rng.choice(spec.per_class, size=n_out, replace=False)
            flag[chosen] = True
            for i in chosen:
                if spec.outlier_rule == "uniform":
                    block[i] = outlier_rng.uniform(
                        0.0, 1.0, (spec.channels, spec.size, spec.size))
                else:
                    donor = int(outlier_rng.integers(spec.classes - 1))
                    if donor >= ci:
                        donor += 1
                    block[i] = _draw(centers[donor], spec.noise, outlier_rng)
        blocks.append(block.astype(np.float32))
        flags.append(flag)
    container = DatasetContainer(names, blocks,
                                 provenance=f"synthetic(seed={spec.seed})")
    return container, flags


def gen_blobs(spec: SyntheticSpec) -> DatasetContainer:
    """Separable isotropic clusters; pure function of the spec."""
    if spec.outlier_fraction != 0:
        raise ContractViolation("gen_blobs expects outlier_fraction == 0")
    return _generate(spec)[0]


def gen_outlier_blobs(spec: SyntheticSpec) -> tuple[DatasetContainer, list[np.ndarray]]:
    """Clusters where a fixed fraction of each class's instances is replaced
    per the draw rule (another class's cluster, or uniform noise).  Returns
    the container plus a per-class boolean flag array marking the replaced
    instances.  With outlier_fraction == 0 this is exactly ``gen_blobs``."""
    return _generate(spec)


def save_flags(flags: list[np.ndarray], rule: str, path) -> None:
    payload = {"rule": rule, "flags": [[int(v) for v in f] for f in flags]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_flags(path) -> tuple[list[np.ndarray], str]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return [np.asarray(f, dtype=bool) for f in payload["flags"]], payload["rule"]


# -- training-time augmentation ----------------------------------------------------


def random_flip_crop(images: np.ndarray, rng: np.random.Generator,
                     pad: int = 4) -> np.ndarray:
    """Horizontal flip (p=0.5) plus zero-padded random crop, per image.

    Operates on pre-decoded (B,c,h,w) arrays; pad=0 disables the crop.
    """
    b, c, h, w = images.shape
    out = images.copy()
    flips = rng.random(b) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    if pad:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
        for i in range(b):
            dy, dx = offsets[i]
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out
