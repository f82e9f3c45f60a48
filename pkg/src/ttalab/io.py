"""Bit-exact binary formats for every artifact.

All integers are little-endian; all floats are little-endian IEEE-754 binary64.
Every file ends with a 32-byte SHA-256 over all preceding bytes.

Common prefix:   magic (4 ASCII bytes) | version u16
Checkpoint  "TTA1":  prefix | model block
Projector   "TTAJ":  prefix | source hash (32) | depth u8 | width u32 | hidden u32 | in_dim u32 | unit block
Penalty     "TTAP":  prefix | source hash (32) | str variant | n_samples u32 | L u16 | L x str name |
                     L x f64 similarity | L x f64 penalty
Prototypes  "TTAQ":  prefix | source hash (32) | str source_kind | alpha f64 | tau f64 | C u32 | d u32 |
                     C x u8 initialized | C*d x f64
Dataset     "TTAD":  prefix | num_classes u32 | n u32 | channels u32 | height u32 | width u32 |
                     n*c*h*w x f64 images | n x i64 labels

str    = u16 byte length | UTF-8 bytes
model block = input ndim u8 | ndim x u32 dims | encoder_end u32 | bn_mode u8 (0 running, 1 batch) | unit block
unit block  = n_units u16 | per unit: str name | kind u8 (0 linear, 1 conv2d, 2 batchnorm, 3 activation) |
              str attrs ("k=v;k=v") | n_params u8 | per param: ndim u8, ndim x u32 dims |
              then all parameter payloads in declaration order |
              then for each batchnorm unit: running mean, running var (f64 each)
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .nsp import Projector, PrototypeBank
from .swr import PenaltyVector, SwrVariant
from .tensorcore import Activation, BatchNorm, Conv2d, Linear, Model

VERSION = 1
HASH_LEN = 32
KINDS = ("linear", "conv2d", "batchnorm", "activation")


class FormatError(ValueError):
    pass


class HashMismatch(FormatError):
    pass


# ---------------------------------------------------------------------------
# low-level writer/reader
# ---------------------------------------------------------------------------


class _Writer:
    def __init__(self, magic: bytes):
        self.buf = bytearray(magic)
        self.u16(VERSION)

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u16(self, v):
        self.buf += struct.pack("<H", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def f64(self, v):
        self.buf += struct.pack("<d", v)

    def raw(self, b):
        self.buf += b

    def string(self, s):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.buf += b

    def array(self, a, dtype="<f8"):
        self.buf += np.ascontiguousarray(a, dtype=dtype).tobytes()

    def finish(self) -> bytes:
        body = bytes(self.buf)
        return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        if len(data) < len(magic) + 2 + HASH_LEN:
            raise FormatError("file too short")
        body, digest = data[:-HASH_LEN], data[-HASH_LEN:]
        if hashlib.sha256(body).digest() != digest:
            raise HashMismatch("content hash mismatch (file corrupted)")
        if body[:4] != magic:
            raise FormatError(f"bad magic {body[:4]!r}, expected {magic!r}")
        self.data = body
        self.pos = 4
        self.digest = digest
        version = self.u16()
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}")

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u16(self):
        return struct.unpack("<H", self._take(2))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, n):
        return self._take(n)

    def string(self):
        return self._take(self.u16()).decode("utf-8")

    def array(self, shape, dtype="<f8"):
        count = int(np.prod(shape)) if len(shape) else 1
        size = np.dtype(dtype).itemsize
        native = np.dtype(dtype).newbyteorder("=")
        return np.frombuffer(self._take(count * size), dtype=dtype).astype(native).reshape(shape)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError("trailing bytes in file")


# ---------------------------------------------------------------------------
# unit blocks
# ---------------------------------------------------------------------------


def _format_attrs(attrs):
    return ";".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in attrs.items())


def _parse_attrs(text):
    out = {}
    for part in filter(None, text.split(";")):
        k, v = part.split("=", 1)
        out[k] = v
    return out


def _write_units(w: _Writer, units):
    w.u16(len(units))
    for u in units:
        w.string(u.name)
        w.u8(KINDS.index(u.kind))
        w.string(_format_attrs(u.attrs()))
        w.u8(len(u.params))
        for p in u.params:
            w.u8(p.data.ndim)
            for d in p.shape:
                w.u32(d)
    for u in units:
        for p in u.params:
            w.array(p.data)
    for u in units:
        if isinstance(u, BatchNorm):
            w.array(u.running_mean)
            w.array(u.running_var)


def _read_units(r: _Reader):
    specs = []
    for _ in range(r.u16()):
        name = r.string()
        kind = KINDS[r.u8()]
        attrs = _parse_attrs(r.string())
        shapes = []
        for _ in range(r.u8()):
            shapes.append(tuple(r.u32() for _ in range(r.u8())))
        specs.append((name, kind, attrs, shapes))
    units = []
    for name, kind, attrs, shapes in specs:
        if kind == "linear":
            out_f, in_f = shapes[0]
            u = Linear(name, in_f, out_f)
        elif kind == "conv2d":
            u = Conv2d(name, shapes[0][1], shapes[0][0])
        elif kind == "batchnorm":
            u = BatchNorm(name, shapes[0][0], eps=float(attrs["eps"]), momentum=float(attrs["momentum"]))
        else:
            u = Activation(name, attrs["op"])
        if [p.shape for p in u.params] != shapes:
            raise FormatError(f"unit '{name}' parameter shapes do not match its kind")
        units.append(u)
    for u in units:
        for p in u.params:
            p.data = r.array(p.shape)
    for u in units:
        if isinstance(u, BatchNorm):
            n = u.running_mean.shape
            u.running_mean = r.array(n)
            u.running_var = r.array(n)
    return units


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


def dumps_checkpoint(model: Model) -> bytes:
    w = _Writer(b"TTA1")
    shape = tuple(model.input_shape)
    w.u8(len(shape))
    for d in shape:
        w.u32(d)
    w.u32(model.encoder_end)
    w.u8(0 if model.bn_mode == "running" else 1)
    _write_units(w, model.units)
    return w.finish()


def loads_checkpoint(data: bytes) -> Model:
    r = _Reader(data, b"TTA1")
    shape = tuple(r.u32() for _ in range(r.u8()))
    encoder_end = r.u32()
    bn_mode = "running" if r.u8() == 0 else "batch"
    units = _read_units(r)
    r.done()
    return Model(units, encoder_end, bn_mode, shape)


def checkpoint_hash(model_or_bytes) -> bytes:
    data = model_or_bytes if isinstance(model_or_bytes, (bytes, bytearray)) else dumps_checkpoint(model_or_bytes)
    return bytes(data[-HASH_LEN:])


# ---------------------------------------------------------------------------
# pre-deployment artifacts
# ---------------------------------------------------------------------------


def _source(r: _Reader):
    return bytes(r.raw(HASH_LEN))


def _check_hash(h):
    if h is None or len(h) != HASH_LEN:
        raise FormatError("artifact needs the 32-byte source checkpoint hash")
    return h


def dumps_projector(projector: Projector, source_hash: bytes) -> bytes:
    w = _Writer(b"TTAJ")
    w.raw(_check_hash(source_hash))
    w.u8(projector.depth)
    w.u32(projector.width)
    w.u32(projector.hidden)
    w.u32(projector.in_dim)
    w.u8(int(projector.trainable))
    _write_units(w, projector.units)
    return w.finish()


def loads_projector(data: bytes):
    r = _Reader(data, b"TTAJ")
    src = _source(r)
    depth, width, hidden, in_dim = r.u8(), r.u32(), r.u32(), r.u32()
    trainable = bool(r.u8())
    proj = Projector(in_dim, depth=depth, width=width, hidden=hidden, trainable=trainable)
    proj.units = _read_units(r)
    r.done()
    return proj, src


def dumps_penalty(pv: PenaltyVector, source_hash: bytes) -> bytes:
    w = _Writer(b"TTAP")
    w.raw(_check_hash(source_hash))
    w.string(pv.variant.format())
    w.u32(pv.n_samples)
    w.u16(len(pv.unit_names))
    for n in pv.unit_names:
        w.string(n)
    w.array(pv.similarities)
    w.array(pv.penalties)
    return w.finish()


def loads_penalty(data: bytes):
    r = _Reader(data, b"TTAP")
    src = _source(r)
    variant = SwrVariant.parse(r.string())
    n_samples = r.u32()
    L = r.u16()
    names = [r.string() for _ in range(L)]
    s = r.array((L,))
    w = r.array((L,))
    r.done()
    return PenaltyVector(s, w, names, variant, n_samples), src


def dumps_prototypes(bank: PrototypeBank, source_hash: bytes) -> bytes:
    w = _Writer(b"TTAQ")
    w.raw(_check_hash(source_hash))
    w.string(bank.source_kind)
    w.f64(bank.alpha)
    w.f64(bank.tau)
    C, d = bank.prototypes.shape
    w.u32(C)
    w.u32(d)
    w.array(bank.initialized, dtype="u1")
    w.array(bank.prototypes)
    return w.finish()


def loads_prototypes(data: bytes):
    r = _Reader(data, b"TTAQ")
    src = _source(r)
    kind = r.string()
    alpha, tau = r.f64(), r.f64()
    C, d = r.u32(), r.u32()
    init = r.array((C,), dtype="u1").astype(bool)
    q = r.array((C, d))
    r.done()
    return PrototypeBank(q, alpha, tau, kind, init), src


def dumps_dataset(ds: Dataset) -> bytes:
    w = _Writer(b"TTAD")
    n, c, h, wd = ds.images.shape
    w.u32(ds.num_classes)
    for v in (n, c, h, wd):
        w.u32(v)
    w.array(ds.images)
    w.array(ds.labels, dtype="<i8")
    return w.finish()


def loads_dataset(data: bytes) -> Dataset:
    r = _Reader(data, b"TTAD")
    num_classes = r.u32()
    n, c, h, w = (r.u32() for _ in range(4))
    images = r.array((n, c, h, w))
    labels = r.array((n,), dtype="<i8")
    r.done()
    return Dataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def save_checkpoint(model, path):
    data = dumps_checkpoint(model)
    write_bytes(path, data)
    return checkpoint_hash(data)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    return loads_checkpoint(data), checkpoint_hash(data)
