"""Binary layer traces and the trainer run that produces them.

File layout, all little-endian::

    "SGTR"  version:u16  count:u32
    count x record:
        layer:u32  pass:u8  role:u8  ndims:u8  dims:u32*ndims  dtype:u8  payload

Payloads: fp32 or fp16 values in row-major order, a packed bitmap
(little bit order, ``ceil(n/8)`` bytes), or an offset map in its own
serialized form, whose length follows from its counts.
"""

import enum
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, TraceFormatError
from .sparsity_index import OffsetMap, OutputBitmap, encode_tc_offsets, SEGMENT, COUNT_MASK, OFFSET_BITS
from .tensor_core import DTYPE, LayerSpec, PostOp
from .trainer import LOSSES, init_model, train_step

MAGIC = b"SGTR"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_REC = struct.Struct("<IBBB")


class PassTag(enum.IntEnum):
    FP = 0
    BP = 1
    WG = 2


class Role(enum.IntEnum):
    F_IN = 0
    F_OUT = 1
    G_IN = 2
    G_OUT = 3
    DW = 4
    BITMAP = 5
    OFFSETS = 6
    WEIGHTS = 7


class DType(enum.IntEnum):
    FP32 = 0
    FP16 = 1
    BITMAP = 2
    OFFSETS = 3


@dataclass(frozen=True, eq=False)
class TraceRecord:
    layer: int
    pass_tag: PassTag
    role: Role
    dims: tuple
    dtype: DType
    payload: object  # ndarray for fp32/fp16, OutputBitmap, or OffsetMap

    def __post_init__(self):
        object.__setattr__(self, "pass_tag", PassTag(self.pass_tag))
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "dtype", DType(self.dtype))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        n = int(np.prod(self.dims)) if self.dims else 1
        p = self.payload
        if self.dtype is DType.OFFSETS:
            if not isinstance(p, OffsetMap) or p.shape != self.dims:
                raise ValueError(f"offset record needs an OffsetMap of shape {self.dims}")
        elif self.dtype is DType.BITMAP:
            if not isinstance(p, OutputBitmap) or p.size != n:
                raise ValueError(f"bitmap record needs an OutputBitmap with {n} bits")
        else:
            if np.asarray(p).size != n:
                raise ValueError(f"payload has {np.asarray(p).size} elements, dims say {n}")

    @classmethod
    def tensor(cls, layer, pass_tag, role, values, fp16=False):
        values = np.asarray(values)
        dtype = DType.FP16 if fp16 else DType.FP32
        data = values.astype(np.float16 if fp16 else np.float32)
        return cls(layer, pass_tag, role, values.shape, dtype, data)

    @classmethod
    def bitmap(cls, layer, pass_tag, bits):
        bm = bits if isinstance(bits, OutputBitmap) else OutputBitmap(bits)
        return cls(layer, pass_tag, Role.BITMAP, bm.shape, DType.BITMAP, bm)

    @classmethod
    def offsets(cls, layer, pass_tag, omap):
        return cls(layer, pass_tag, Role.OFFSETS, omap.shape, DType.OFFSETS, omap)

    def payload_bytes(self):
        if self.dtype is DType.FP32:
            return np.ascontiguousarray(self.payload, dtype="<f4").tobytes()
        if self.dtype is DType.FP16:
            return np.ascontiguousarray(self.payload, dtype="<f2").tobytes()
        if self.dtype is DType.BITMAP:
            return self.payload.pack()
        return self.payload.to_bytes()

    def to_bytes(self):
        head = _REC.pack(self.layer, self.pass_tag, self.role, len(self.dims))
        dims = struct.pack(f"<{len(self.dims)}I", *self.dims)
        return head + dims + bytes([self.dtype]) + self.payload_bytes()

    def values(self):
        """Payload as a plain array: float32 for tensors, bool for bitmaps and offsets."""
        if self.dtype is DType.BITMAP:
            return self.payload.bits
        if self.dtype is DType.OFFSETS:
            return self.payload.nonzero_mask()
        return np.asarray(self.payload, dtype=DTYPE).reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, TraceRecord):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())


def encode_trace(records):
    records = list(records)
    buf = bytearray(_HEADER.pack(MAGIC, VERSION, len(records)))
    for rec in records:
        buf += rec.to_bytes()
    return bytes(buf)


def write_trace(path, records):
    data = encode_trace(records)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.pos = 0

    def take(self, n, what):
        data = self.fh.read(n)
        if len(data) != n:
            raise TraceFormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}", self.pos)
        self.pos += n
        return data


def _read_offsets(rd, dims):
    if len(dims) != 3:
        raise TraceFormatError(f"offset map needs 3 dims, got {len(dims)}", rd.pos)
    c, h, w = dims
    nseg = -(-c // SEGMENT)
    start = rd.pos
    raw = bytearray()
    for _ in range(h * w * nseg):
        head = rd.take(1, "offset segment count")
        raw += head
        n = head[0] & COUNT_MASK
        if n:
            raw += rd.take(-(-n * OFFSET_BITS // 8), "offset segment")
    try:
        omap, _ = OffsetMap.from_bytes(bytes(raw), dims)
    except TraceFormatError as exc:
        raise TraceFormatError(str(exc).split(" (at byte")[0], start + exc.offset) from None
    return omap


def _read_record(rd):
    layer, ptag, role, ndims = _REC.unpack(rd.take(_REC.size, "record header"))
    at = rd.pos - 3
    try:
        ptag = PassTag(ptag)
    except ValueError:
        raise TraceFormatError(f"unknown pass tag {ptag}", at) from None
    try:
        role = Role(role)
    except ValueError:
        raise TraceFormatError(f"unknown role {role}", at + 1) from None
    dims = struct.unpack(f"<{ndims}I", rd.take(4 * ndims, "dims"))
    code = rd.take(1, "dtype")[0]
    try:
        dtype = DType(code)
    except ValueError:
        raise TraceFormatError(f"unknown dtype code {code}", rd.pos - 1) from None
    n = int(np.prod(dims)) if dims else 1
    if dtype is DType.FP32:
        payload = np.frombuffer(rd.take(4 * n, "fp32 payload"), dtype="<f4").astype(np.float32).reshape(dims)
    elif dtype is DType.FP16:
        payload = np.frombuffer(rd.take(2 * n, "fp16 payload"), dtype="<f2").astype(np.float16).reshape(dims)
    elif dtype is DType.BITMAP:
        payload = OutputBitmap.unpack(rd.take(-(-n // 8), "bitmap payload"), dims)
    else:
        payload = _read_offsets(rd, dims)
    return TraceRecord(layer, ptag, role, dims, dtype, payload)


def iter_trace(source):
    """Yield records one at a time from a path, bytes or binary file object."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        fh, close = io.BytesIO(bytes(source)), True
    elif isinstance(source, (str, Path)):
        fh, close = open(source, "rb"), True
    else:
        fh, close = source, False
    try:
        rd = _Reader(fh)
        magic, version, count = _HEADER.unpack(rd.take(_HEADER.size, "file header"))
        if magic != MAGIC:
            raise TraceFormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise TraceFormatError(f"unsupported version {version}", 4)
        for _ in range(count):
            yield _read_record(rd)
        if fh.read(1):
            raise TraceFormatError("trailing bytes after the last record", rd.pos)
    finally:
        if close:
            fh.close()


def read_trace(source):
    return list(iter_trace(source))


# ---------------------------------------------------------------- generation

DEFAULT_MODEL = {
    "input_shape": [3, 16, 16],
    "classes": 10,
    "samples": 32,
    "batch": 8,
    "learning_rate": 0.01,
    "loss": "xent",
    "layers": [
        {"filters": 8, "kernel": 3, "padding": 1, "post_op": "relu"},
        {"filters": 16, "kernel": 3, "padding": 1, "post_op": "relu"},
        {"filters": 16, "kernel": 3, "padding": 1, "post_op": "relu"},
        {"filters": 10, "kernel": "full", "padding": 0, "post_op": "none"},
    ],
}


def build_specs(config):
    """Chain layer entries ``{filters, kernel, stride, padding, post_op}`` into LayerSpecs."""
    shape = tuple(config["input_shape"])
    specs = []
    for i, entry in enumerate(config["layers"]):
        k = entry.get("kernel", 3)
        r = s = None
        if k == "full":
            r, s = shape[1], shape[2]
        else:
            r = s = int(k)
        try:
            spec = LayerSpec(shape, (int(entry["filters"]), shape[0], r, s),
                             int(entry.get("stride", 1)), int(entry.get("padding", 0)),
                             PostOp(entry.get("post_op", "relu")))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"layer {i}: {exc}") from exc
        specs.append(spec)
        m, u, v = spec.out_shape
        if spec.post_op is PostOp.MAXPOOL:
            u, v = (u - 2) // 2 + 1, (v - 2) // 2 + 1
        shape = (m, u, v)
    return specs


def load_model_config(path=None):
    if path is None:
        return json.loads(json.dumps(DEFAULT_MODEL))
    cfg = dict(DEFAULT_MODEL)
    cfg.update(json.loads(Path(path).read_text()))
    if cfg["loss"] not in LOSSES:
        raise ConfigError(f"unknown loss {cfg['loss']!r}; have {sorted(LOSSES)}")
    return cfg


def synthetic_dataset(config, rng):
    """Uniform noise in [-1, 1) with random labels (or random targets for MSE)."""
    n = int(config["samples"])
    x = rng.uniform(-1.0, 1.0, size=(n,) + tuple(config["input_shape"])).astype(DTYPE)
    labels = rng.integers(0, int(config["classes"]), size=n)
    return x, labels


def step_records(trace, fp16=False, sample=0):
    """Records for one step: per layer f-in, offsets, f-out, bitmap in FP; g-in, offsets, g-out in BP; dw in WG."""
    out = []
    for lid, lt in enumerate(trace):
        f_in = lt.f_in[sample]
        g_in = lt.g_in[sample]
        out += [
            TraceRecord.tensor(lid, PassTag.FP, Role.F_IN, f_in, fp16),
            TraceRecord.offsets(lid, PassTag.FP, encode_tc_offsets(_stored(f_in, fp16))),
            TraceRecord.tensor(lid, PassTag.FP, Role.F_OUT, lt.f_out[sample], fp16),
            TraceRecord.bitmap(lid, PassTag.FP, lt.mask[sample]),
            TraceRecord.tensor(lid, PassTag.BP, Role.G_IN, g_in, fp16),
            TraceRecord.offsets(lid, PassTag.BP, encode_tc_offsets(_stored(g_in, fp16))),
            TraceRecord.tensor(lid, PassTag.BP, Role.G_OUT, lt.g_out[sample], fp16),
            TraceRecord.tensor(lid, PassTag.WG, Role.DW, lt.dw, fp16),
        ]
    return out


def _stored(values, fp16):
    """What a reader gets back, so offsets index the stored zeros."""
    return values.astype(np.float16).astype(DTYPE) if fp16 else values


def weight_records(model, fp16=False):
    return [TraceRecord.tensor(i, PassTag.FP, Role.WEIGHTS, layer.weight, fp16) for i, layer in enumerate(model)]


def generate_traces(out_dir, steps=1, seed=0, model_config=None, fp16=False, sample=0):
    """Train ``steps`` SGD steps and write one trace file (plus a weights file) per step.

    Also writes ``model.json`` describing the layer chain. Returns the list of
    trace file paths.
    """
    config = load_model_config() if model_config is None else model_config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    specs = build_specs(config)
    model = init_model(specs, rng)
    x, labels = synthetic_dataset(config, rng)
    batch = int(config["batch"])
    loss = config["loss"]
    meta = {
        "seed": int(seed),
        "steps": int(steps),
        "fp16": bool(fp16),
        "config": config,
        "layers": [s.to_dict() for s in specs],
        "losses": [],
    }
    paths = []
    n = x.shape[0]
    out_shape = model[-1].out_shape
    mse_targets = rng.standard_normal((n,) + out_shape).astype(DTYPE) if loss == "mse" else None
    for step in range(steps):
        idx = (np.arange(batch) + step * batch) % n
        targets = labels[idx] if loss == "xent" else mse_targets[idx]
        # weights used by this step's passes
        write_trace(out / f"weights_{step:04d}.sgtr", weight_records(model, fp16))
        res = train_step(model, x[idx], targets, float(config["learning_rate"]), loss=loss, step=step)
        path = out / f"step_{step:04d}.sgtr"
        write_trace(path, step_records(res.trace, fp16, sample))
        paths.append(path)
        meta["losses"].append(round(res.loss, 9))
        model = res.model
    (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def index_records(records):
    """Group records as ``{layer: {(pass_tag, role): record}}``."""
    table = {}
    for rec in records:
        table.setdefault(rec.layer, {})[(rec.pass_tag, rec.role)] = rec
    return table
