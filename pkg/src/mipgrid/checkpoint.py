"""Versioned little-endian checkpoint format.

Layout (all integers unsigned little-endian)::

    "MGRD" | u32 version
    header: u8 family | u8 scale kind | u32 S | u32 K | u32 R_density
            | u32 R_appearance | 3 x u32 resolution
            | u32 n_maps, per map: u32 n, n x f64 anchors
    u32 len | config echo (utf-8 key = value text)
    u32 len | RNG state (utf-8 JSON)
    u32 n_blocks, per block:
        u16 len | name | u8 dtype (0 f32, 1 f64) | u8 ndim | ndim x u32 | payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import config as config_text
from .field import RadianceField
from .scalecoord import ScaleIndexMap
from .train import TrainConfig

MAGIC = b"MGRD"
VERSION = 1
FAMILIES = ("vm", "planes")
KINDS = ("disc", "cont", "2d")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    family: str
    scale_kind: str
    scales: int
    kernel_size: int
    ranks: tuple  # (density, appearance)
    resolution: tuple
    anchors: tuple  # one tuple of anchors per scale index map
    config: str
    rng_state: dict
    blocks: dict = dc_field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_field(cls, fld: RadianceField, cfg: TrainConfig, rng_state=None) -> "Checkpoint":
        c = fld.config
        cfg = cfg.replace(resolution=tuple(c.resolution))
        return cls(
            family=c.family,
            scale_kind=c.scale_kind,
            scales=c.scales,
            kernel_size=c.kernel_size,
            ranks=(c.density_rank, c.appearance_rank),
            resolution=tuple(int(r) for r in c.resolution),
            anchors=tuple(tuple(float(a) for a in m.anchors) for m in fld.index_maps),
            config=config_text.dumps(cfg),
            rng_state=rng_state or {},
            blocks={k: np.array(v, dtype=np.float64) for k, v in fld.parameters().items()},
        )

    def train_config(self) -> TrainConfig:
        return config_text.loads(self.config)

    def to_field(self) -> RadianceField:
        """Rebuild the radiance field; every parameter is restored bitwise."""
        cfg = self.train_config()
        maps = tuple(ScaleIndexMap(a) for a in self.anchors)
        fld = RadianceField.create(cfg.field_config(), np.random.default_rng(0), maps)
        if not cfg.learn_kernels:
            for banks in fld.banks.values():
                for b in banks:
                    b.trainable = False
        missing = set(fld.parameters()) - set(self.blocks)
        if missing:
            raise CheckpointError(f"checkpoint lacks blocks: {sorted(missing)}")
        fld.load_parameters(self.blocks)
        return fld


def _u32(buf, *vals):
    buf.write(struct.pack(f"<{len(vals)}I", *vals))


def _text(buf, s: str):
    b = s.encode("utf-8")
    _u32(buf, len(b))
    buf.write(b)


def dumps(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, ck.version)
    buf.write(struct.pack("<BB", FAMILIES.index(ck.family), KINDS.index(ck.scale_kind)))
    _u32(buf, ck.scales, ck.kernel_size, *ck.ranks, *ck.resolution)
    _u32(buf, len(ck.anchors))
    for a in ck.anchors:
        _u32(buf, len(a))
        buf.write(struct.pack(f"<{len(a)}d", *a))
    _text(buf, ck.config)
    _text(buf, json.dumps(ck.rng_state, sort_keys=True))
    _u32(buf, len(ck.blocks))
    for name, arr in ck.blocks.items():
        arr = np.asarray(arr)
        code = {np.dtype("float32"): 0, np.dtype("float64"): 1}.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"block {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        _u32(buf, *arr.shape)
        buf.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def text(self):
        (n,) = self.unpack("I")
        return self.take(n).decode("utf-8")


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    fam, kind = r.unpack("BB")
    if fam >= len(FAMILIES) or kind >= len(KINDS):
        raise CheckpointError("corrupt header: unknown family or scale kind")
    s, k, rd, ra, h, w, l = r.unpack("7I")
    (n_maps,) = r.unpack("I")
    anchors = []
    for _ in range(n_maps):
        (n,) = r.unpack("I")
        anchors.append(r.unpack(f"{n}d"))
    cfg = r.text()
    rng_state = json.loads(r.text())
    (n_blocks,) = r.unpack("I")
    blocks = {}
    for _ in range(n_blocks):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("BB")
        if code not in DTYPES:
            raise CheckpointError(f"block {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"{ndim}I")
        dt = DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last block")
    return Checkpoint(
        FAMILIES[fam], KINDS[kind], s, k, (rd, ra), (h, w, l), tuple(anchors), cfg, rng_state, blocks, version
    )


def save(path, ck: Checkpoint) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(dumps(ck))
    tmp.replace(p)


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads(data)
