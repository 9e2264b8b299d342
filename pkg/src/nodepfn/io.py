"""Binary dataset and checkpoint formats.

Both formats are little-endian, versioned, end in a SHA-256 digest of all
preceding bytes, and are written atomically (temp file + rename).  Loaders
validate every invariant and name the offending field and byte offset.

Dataset file layout (version 1)::

    8s   magic "NPFNDATA"
    u32  version
    u32  flags            bit0 directed (must be 0), bit1 predictions, bit2 meta
    u64  n, u64 d, u32 C, u32 reserved, u64 E
    f64  features[n*d]    row-major
    i32  labels[n]        -1 = unknown
    i64  edges[E*2]       sorted unique pairs with i < j
    u8   train_mask[ceil(n/8)], test_mask[ceil(n/8)]   little-endian bit order
    [predictions]  u64 m, u32 K, u32 reserved, i64 node_ids[m],
                   i32 classes[K], f64 probs[m*K], i32 argmax[m]
    [meta]         u64 length, UTF-8 JSON
    32s  sha256

Checkpoint file layout (version 1)::

    8s   magic "NPFNCKPT"
    u32  version, u32 flags (bit0 optimizer state present)
    u64 length + JSON model config
    u64 length + JSON metadata (training/prior configs)
    tensor table: u32 count, then per tensor
        u16 name length, name, u8 dtype (1=f32, 2=f64), u8 ndim, u64 dims, raw values
    [optimizer]  u64 step, u64 skipped, tensor table of "m.*" and "v.*"
    position: u64 epoch, u64 step_in_epoch, u64 global_step, u64 seed
    32s  sha256
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph, PpdMatrix

DATASET_MAGIC = b"NPFNDATA"
CHECKPOINT_MAGIC = b"NPFNCKPT"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FormatError(ValueError):
    """A file violates its format or invariants."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def fail(self, field_name: str, msg: str, offset: int | None = None):
        off = self.pos if offset is None else offset
        raise FormatError(f"{self.what}: field '{field_name}' at offset {off}: {msg}")

    def take(self, n: int, field_name: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            self.fail(field_name, f"truncated (need {n} bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field_name: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, field_name))

    def array(self, dtype: str, count: int, field_name: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, field_name), dtype=dt).copy()


def _verify_digest(buf: bytes, what: str) -> bytes:
    if len(buf) < 32:
        raise FormatError(f"{what}: file too short")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{what}: field 'sha256' at offset {len(body)}: checksum mismatch")
    return body


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass
class DatasetFile:
    graph: Graph
    train_ids: np.ndarray
    test_ids: np.ndarray
    predictions: PpdMatrix | None = None
    meta: dict = field(default_factory=dict)


def _bitmap(ids: np.ndarray, n: int) -> bytes:
    mask = np.zeros(n, dtype=np.uint8)
    mask[ids] = 1
    return np.packbits(mask, bitorder="little").tobytes()


def dataset_bytes(ds: DatasetFile) -> bytes:
    g = ds.graph
    n, d = g.X.shape
    flags = (2 if ds.predictions is not None else 0) | (4 if ds.meta else 0)
    parts = [
        DATASET_MAGIC,
        struct.pack("<II", DATASET_VERSION, flags),
        struct.pack("<QQIIQ", n, d, g.C, 0, g.n_edges),
        np.ascontiguousarray(g.X, dtype="<f8").tobytes(),
        np.ascontiguousarray(g.y, dtype="<i4").tobytes(),
        np.ascontiguousarray(g.edges, dtype="<i8").tobytes(),
        _bitmap(np.asarray(ds.train_ids), n),
        _bitmap(np.asarray(ds.test_ids), n),
    ]
    if ds.predictions is not None:
        p = ds.predictions
        m, k = p.probs.shape
        parts += [
            struct.pack("<QII", m, k, 0),
            np.ascontiguousarray(p.node_ids, dtype="<i8").tobytes(),
            np.ascontiguousarray(p.classes, dtype="<i4").tobytes(),
            np.ascontiguousarray(p.probs, dtype="<f8").tobytes(),
            np.ascontiguousarray(p.argmax_labels(), dtype="<i4").tobytes(),
        ]
    if ds.meta:
        blob = canonical_json(ds.meta)
        parts += [struct.pack("<Q", len(blob)), blob]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_dataset(path, graph: Graph, train_ids, test_ids, predictions=None, meta=None) -> None:
    ds = DatasetFile(graph, np.asarray(train_ids), np.asarray(test_ids), predictions, meta or {})
    atomic_write(path, dataset_bytes(ds))


def parse_dataset(buf: bytes) -> DatasetFile:
    what = "dataset"
    body = _verify_digest(buf, what)
    r = _Reader(body, what)
    if r.take(8, "magic") != DATASET_MAGIC:
        r.fail("magic", "not a dataset file", 0)
    version, flags = r.unpack("<II", "version")
    if version != DATASET_VERSION:
        r.fail("version", f"unsupported version {version}", 8)
    if flags & 1:
        r.fail("flags.directed", "directed graphs are not supported", 12)
    if flags & ~7:
        r.fail("flags", f"unknown flag bits {flags:#x}", 12)
    hdr = r.pos
    n, d, C, _, E = r.unpack("<QQIIQ", "header")
    if n < 1 or C < 1:
        r.fail("header", f"invalid n={n} or C={C}", hdr)
    X = r.array("<f8", n * d, "features").reshape(n, d)
    if not np.isfinite(X).all():
        r.fail("features", "non-finite value")
    lab_off = r.pos
    y = r.array("<i4", n, "labels").astype(np.int64)
    bad = np.flatnonzero((y < -1) | (y >= C))
    if bad.size:
        r.fail("labels", f"label {y[bad[0]]} of node {bad[0]} outside [-1, {C})", lab_off + 4 * int(bad[0]))
    edge_off = r.pos
    edges = r.array("<i8", 2 * E, "edges").reshape(E, 2)
    if E:
        if edges.min() < 0 or edges.max() >= n:
            r.fail("edges", "endpoint out of range", edge_off)
        if np.any(edges[:, 0] >= edges[:, 1]):
            r.fail("edges", "pairs must satisfy i < j", edge_off)
        key = edges[:, 0] * n + edges[:, 1]
        if np.any(np.diff(key) <= 0):
            r.fail("edges", "edge list is not sorted and unique", edge_off)
    nb = (n + 7) // 8
    train_mask = np.unpackbits(np.frombuffer(r.take(nb, "train_mask"), np.uint8), bitorder="little")[:n]
    mask_off = r.pos
    test_mask = np.unpackbits(np.frombuffer(r.take(nb, "test_mask"), np.uint8), bitorder="little")[:n]
    overlap = np.flatnonzero(train_mask & test_mask)
    if overlap.size:
        r.fail("test_mask", f"mask overlap: node {overlap[0]} is in both train and test", mask_off)
    train_ids = np.flatnonzero(train_mask)
    test_ids = np.flatnonzero(test_mask)
    if np.any(y[train_ids] < 0):
        r.fail("labels", "train node without a label", lab_off)
    predictions = None
    if flags & 2:
        poff = r.pos
        m, k, _ = r.unpack("<QII", "predictions.header")
        node_ids = r.array("<i8", m, "predictions.node_ids")
        classes = r.array("<i4", k, "predictions.classes")
        probs = r.array("<f8", m * k, "predictions.probs").reshape(m, k)
        argmax = r.array("<i4", m, "predictions.argmax")
        if m and (node_ids.min() < 0 or node_ids.max() >= n):
            r.fail("predictions.node_ids", "node id out of range", poff)
        if not np.isfinite(probs).all() or np.any(probs < 0):
            r.fail("predictions.probs", "invalid probability", poff)
        predictions = PpdMatrix(probs, classes, node_ids)
        if not np.array_equal(predictions.argmax_labels(), argmax):
            r.fail("predictions.argmax", "argmax labels disagree with probabilities", poff)
    meta = {}
    if flags & 4:
        (length,) = r.unpack("<Q", "meta.length")
        try:
            meta = json.loads(r.take(length, "meta").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            r.fail("meta", f"invalid JSON ({exc})")
    if r.pos != len(body):
        r.fail("trailer", f"{len(body) - r.pos} unexpected trailing bytes")
    graph = Graph(n, edges, X, y, C)
    return DatasetFile(graph, train_ids, test_ids, predictions, meta)


def read_dataset(path) -> DatasetFile:
    return parse_dataset(Path(path).read_bytes())


def load_dataset(path) -> tuple[Graph, np.ndarray, np.ndarray]:
    ds = read_dataset(path)
    return ds.graph, ds.train_ids, ds.test_ids


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Model config + weights, plus what is needed to resume training exactly."""

    model_config: dict
    params: dict
    meta: dict = field(default_factory=dict)
    opt_step: int | None = None
    opt_skipped: int = 0
    opt_m: dict | None = None
    opt_v: dict | None = None
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    seed: int = 0

    @property
    def has_optimizer(self) -> bool:
        return self.opt_step is not None


def _tensor_table(tensors: dict) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<HBB", len(raw), code, arr.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def _read_tensor_table(r: _Reader, field_name: str) -> dict:
    (count,) = r.unpack("<I", field_name + ".count")
    out = {}
    for _ in range(count):
        off = r.pos
        name_len, code, ndim = r.unpack("<HBB", field_name + ".entry")
        name = r.take(name_len, field_name + ".name").decode("utf-8")
        if code not in _DTYPES:
            r.fail(field_name + "." + name, f"unknown dtype code {code}", off)
        shape = r.unpack(f"<{ndim}Q", field_name + "." + name + ".shape")
        size = int(np.prod(shape)) if ndim else 1
        arr = r.array(_DTYPES[code].str, size, field_name + "." + name).reshape(shape)
        if not np.isfinite(arr).all():
            r.fail(field_name + "." + name, "non-finite value", off)
        out[name] = arr.astype(_DTYPES[code].newbyteorder("="))
    return out


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    cfg = canonical_json(ck.model_config)
    meta = canonical_json(ck.meta)
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, 1 if ck.has_optimizer else 0),
        struct.pack("<Q", len(cfg)),
        cfg,
        struct.pack("<Q", len(meta)),
        meta,
        _tensor_table(ck.params),
    ]
    if ck.has_optimizer:
        opt = {f"m.{k}": v for k, v in ck.opt_m.items()}
        opt.update({f"v.{k}": v for k, v in ck.opt_v.items()})
        parts += [struct.pack("<QQ", ck.opt_step, ck.opt_skipped), _tensor_table(opt)]
    parts.append(struct.pack("<QQQQ", ck.epoch, ck.step_in_epoch, ck.global_step, ck.seed))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def parse_checkpoint(buf: bytes) -> Checkpoint:
    what = "checkpoint"
    body = _verify_digest(buf, what)
    r = _Reader(body, what)
    if r.take(8, "magic") != CHECKPOINT_MAGIC:
        r.fail("magic", "not a checkpoint file", 0)
    version, flags = r.unpack("<II", "version")
    if version != CHECKPOINT_VERSION:
        r.fail("version", f"unsupported version {version}", 8)
    if flags & ~1:
        r.fail("flags", f"unknown flag bits {flags:#x}", 12)
    (n,) = r.unpack("<Q", "model_config.length")
    model_config = json.loads(r.take(n, "model_config"))
    (n,) = r.unpack("<Q", "meta.length")
    meta = json.loads(r.take(n, "meta"))
    params = _read_tensor_table(r, "params")
    ck = Checkpoint(model_config, params, meta)
    if flags & 1:
        ck.opt_step, ck.opt_skipped = r.unpack("<QQ", "optimizer.step")
        opt = _read_tensor_table(r, "optimizer")
        ck.opt_m = {k[2:]: v for k, v in opt.items() if k.startswith("m.")}
        ck.opt_v = {k[2:]: v for k, v in opt.items() if k.startswith("v.")}
        if set(ck.opt_m) != set(params) or set(ck.opt_v) != set(params):
            r.fail("optimizer", "moment tensors do not mirror the parameters")
        for k, v in params.items():
            if ck.opt_m[k].shape != v.shape or ck.opt_v[k].shape != v.shape:
                r.fail("optimizer", f"moment shape mismatch for {k}")
    ck.epoch, ck.step_in_epoch, ck.global_step, ck.seed = r.unpack("<QQQQ", "position")
    if r.pos != len(body):
        r.fail("trailer", f"{len(body) - r.pos} unexpected trailing bytes")
    return ck


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write(path, checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
