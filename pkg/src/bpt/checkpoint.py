"""Binary checkpoint container.

Layout (all little-endian)::

    b"BPTC" | u16 version | u8 kind (0 training, 1 deploy)
    u32 n_config | n_config x (u16 key_len, key, u32 val_len, JSON value)
    u32 n_meta   | same key-value encoding
    u32 n_tensors| n_tensors x record
    u32 crc32 of everything before it

A record is ``u16 name_len, name, u8 dtype`` followed by either a float64
payload (``u8 ndim, ndim x u32 shape, values``) or, for packed weights, a
serialized BitMatrix and ``u32 n_scales, n_scales x f64``.

Training checkpoints hold shadow weights in float64; deploy checkpoints
replace every binary weight by its packed bits and alpha scales.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binarize import ScaledBinary
from .bitops import BitMatrix
from .model import ModelConfig, PointTransformer

MAGIC = b"BPTC"
VERSION = 1
TRAINING, DEPLOY = 0, 1
_F64, _PACKED = 0, 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: int
    config: dict
    tensors: dict  # name -> np.ndarray | ScaledBinary
    meta: dict = field(default_factory=dict)


# -- encoding -----------------------------------------------------------------------


def _kv(d: dict) -> bytes:
    out = [struct.pack("<I", len(d))]
    for k in sorted(d):
        kb = k.encode()
        vb = json.dumps(d[k], sort_keys=True, separators=(",", ":")).encode()
        out.append(struct.pack("<H", len(kb)) + kb + struct.pack("<I", len(vb)) + vb)
    return b"".join(out)


def _record(name: str, value) -> bytes:
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb
    if isinstance(value, ScaledBinary):
        scale = np.ascontiguousarray(np.ravel(value.scale), dtype="<f8")
        return head + struct.pack("<B", _PACKED) + value.bits.to_bytes() + struct.pack("<I", scale.size) + scale.tobytes()
    arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
    return head + struct.pack("<BB", _F64, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    body = [MAGIC, struct.pack("<HB", VERSION, ckpt.kind), _kv(ckpt.config), _kv(ckpt.meta)]
    body.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        body.append(_record(name, ckpt.tensors[name]))
    data = b"".join(body)
    return data + struct.pack("<I", zlib.crc32(data))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        try:
            vals = struct.unpack_from(fmt, self.data, self.pos)
        except struct.error:
            raise CheckpointError("truncated checkpoint") from None
        self.pos += struct.calcsize(fmt)
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def kv(self) -> dict:
        (n,) = self.take("<I")
        out = {}
        for _ in range(n):
            (kl,) = self.take("<H")
            key = self.raw(kl).decode()
            (vl,) = self.take("<I")
            out[key] = json.loads(self.raw(vl))
        return out


def decode(data: bytes) -> Checkpoint:
    if len(data) < 11 or data[:4] != MAGIC:
        raise CheckpointError("not a BPTC checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(data[:-4])
    r.pos = 4
    version, kind = r.take("<HB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in (TRAINING, DEPLOY):
        raise CheckpointError(f"unknown checkpoint kind {kind}")
    config, meta = r.kv(), r.kv()
    (n,) = r.take("<I")
    tensors = {}
    for _ in range(n):
        (nl,) = r.take("<H")
        name = r.raw(nl).decode()
        (dtype,) = r.take("<B")
        if dtype == _F64:
            (ndim,) = r.take("<B")
            shape = r.take(f"<{ndim}I")
            count = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(r.raw(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        elif dtype == _PACKED:
            try:
                bits, r.pos = BitMatrix.from_bytes(r.data, r.pos)
            except ValueError as e:
                raise CheckpointError(f"bad packed record {name!r}: {e}") from None
            (ns,) = r.take("<I")
            scale = np.frombuffer(r.raw(8 * ns), dtype="<f8").astype(np.float64)
            tensors[name] = ScaledBinary(bits, scale)
        else:
            raise CheckpointError(f"unknown tensor dtype {dtype} for {name!r}")
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after tensor records")
    return Checkpoint(kind, config, tensors, meta)


# -- model <-> checkpoint -----------------------------------------------------------


def _model_tensors(model: PointTransformer, deploy: bool) -> dict:
    tensors = {}
    binary = dict(model.binary_layers())
    for name, p in model.named_parameters():
        tensors[name] = p.data
    for name, buf in model.named_buffers():
        tensors[name] = buf
    for lname, layer in binary.items():
        key = f"{lname}.weight"
        if deploy or layer.weight is None:
            if layer.weight is not None:
                layer.freeze()
            tensors[key] = layer.packed
    return tensors


def from_model(model: PointTransformer, deploy: bool = False, meta: dict | None = None) -> Checkpoint:
    if not deploy and any(m.weight is None for _, m in model.binary_layers()):
        raise CheckpointError("model has no shadow weights left; only a deploy checkpoint can be written")
    return Checkpoint(DEPLOY if deploy else TRAINING, model.cfg.to_dict(), _model_tensors(model, deploy), meta or {})


def to_model(ckpt: Checkpoint, seed: int = 0) -> PointTransformer:
    try:
        cfg = ModelConfig.from_dict(ckpt.config)
    except (ValueError, TypeError, KeyError) as e:
        raise CheckpointError(f"bad model config in checkpoint: {e}") from None
    model = PointTransformer(cfg, seed)
    binary = dict(model.binary_layers())
    expected = set(dict(model.named_parameters())) | set(dict(model.named_buffers()))
    if set(ckpt.tensors) != expected:
        missing = sorted(expected - set(ckpt.tensors))[:3]
        extra = sorted(set(ckpt.tensors) - expected)[:3]
        raise CheckpointError(f"tensor names do not match the config (missing {missing}, unexpected {extra})")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, value in ckpt.tensors.items():
        if isinstance(value, ScaledBinary):
            lname = name.rsplit(".", 1)[0]
            layer = binary.get(lname)
            if layer is None or value.bits.shape != (layer.out_dim, layer.in_dim):
                raise CheckpointError(f"packed record {name!r} does not fit the model")
            layer.weight = None
            layer.packed = value
            layer.use_packed = True
            continue
        target = params[name].data if name in params else buffers[name]
        if target.shape != value.shape:
            raise CheckpointError(f"{name}: shape {value.shape} != expected {target.shape}")
        np.copyto(target, value)
    if ckpt.kind == DEPLOY:
        model.set_packed(True)
    return model.eval()


def save(path, model: PointTransformer, deploy: bool = False, meta: dict | None = None) -> bytes:
    data = encode(from_model(model, deploy, meta))
    Path(path).write_bytes(data)
    return data


def load(path, seed: int = 0) -> tuple[PointTransformer, Checkpoint]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint {p} does not exist")
    ckpt = decode(p.read_bytes())
    return to_model(ckpt, seed), ckpt
