"""Through-channel offset maps and within-channel output bitmaps.

Two encodings feed the accelerator model:

* :class:`OffsetMap` lists, for every spatial location, the channel offsets of
  the non-zero values in runs of 32 channels. Each offset fits in 5 bits.
  Values are not compressed; only their positions are indexed.
* :class:`OutputBitmap` keeps one bit per element, set where the forward ReLU
  output survived. It tells the backward pass which gradients need computing.

Zero means ``x == 0`` with no epsilon. Both signed zeros count as zero.
"""

from dataclasses import dataclass, field

import numpy as np

from ._geometry import split_extent
from .errors import ShapeError, TraceFormatError

SEGMENT = 32
OFFSET_BITS = 5
COUNT_MASK = 0x3F


class OutputBitmap:
    """Binary survival mask of a ReLU output, one bit per element."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=bool)
        bits.setflags(write=False)
        self.bits = bits

    @classmethod
    def ones(cls, shape):
        return cls(np.ones(shape, dtype=bool))

    @property
    def shape(self):
        return self.bits.shape

    @property
    def size(self):
        return self.bits.size

    def popcount(self):
        return int(np.count_nonzero(self.bits))

    def sparsity(self):
        """Fraction of cleared bits."""
        if self.bits.size == 0:
            return 0.0
        return (self.bits.size - self.popcount()) / self.bits.size

    def pack(self):
        """Row-major bits, little-endian bit order inside each byte."""
        return np.packbits(self.bits.ravel(), bitorder="little").tobytes()

    @classmethod
    def unpack(cls, data, shape):
        n = int(np.prod(shape))
        raw = np.frombuffer(data, dtype=np.uint8)
        if raw.size * 8 < n:
            raise ValueError(f"need {(n + 7) // 8} bytes for {n} bits, got {raw.size}")
        bits = np.unpackbits(raw, count=n, bitorder="little").astype(bool)
        return cls(bits.reshape(shape))

    def __getitem__(self, idx):
        return OutputBitmap(self.bits[idx])

    def __eq__(self, other):
        if not isinstance(other, OutputBitmap):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"OutputBitmap(shape={self.shape}, popcount={self.popcount()})"


@dataclass(frozen=True, eq=False)
class OffsetMap:
    """Non-zero channel offsets per spatial location.

    ``counts[h, w, k]`` is the number of non-zeros in channel segment ``k``
    (channels ``32k .. 32k+31``) at location ``(h, w)``; the first
    ``counts[h, w, k]`` entries of ``offsets[h, w, k]`` are their offsets
    inside the segment, strictly increasing. Trailing entries are zero.
    """

    channels: int
    height: int
    width: int
    counts: np.ndarray
    offsets: np.ndarray
    scanned: int = field(default=0)

    @property
    def segments(self):
        return self.counts.shape[2]

    @property
    def shape(self):
        return (self.channels, self.height, self.width)

    def segment(self, h, w, k):
        n = int(self.counts[h, w, k])
        return tuple(int(o) for o in self.offsets[h, w, k, :n])

    def nonzero_mask(self):
        """Decode to a boolean (C, H, W) mask of the indexed positions."""
        nseg = self.segments
        mask = np.zeros((self.height, self.width, nseg, SEGMENT), dtype=bool)
        valid = np.arange(SEGMENT) < self.counts[..., None]
        hh, ww, kk, jj = np.nonzero(valid)
        mask[hh, ww, kk, self.offsets[hh, ww, kk, jj]] = True
        mask = mask.reshape(self.height, self.width, nseg * SEGMENT)[..., : self.channels]
        return np.ascontiguousarray(mask.transpose(2, 0, 1))

    def nonzero_count(self):
        return int(self.counts.sum())

    def to_bytes(self):
        """Serialize in location-major order.

        Per segment: one count byte (low 6 bits) then ``ceil(5n/8)`` bytes of
        offsets packed LSB-first.
        """
        out = bytearray()
        shifts = np.arange(OFFSET_BITS, dtype=np.uint8)
        for h in range(self.height):
            for w in range(self.width):
                for k in range(self.segments):
                    n = int(self.counts[h, w, k])
                    out.append(n & COUNT_MASK)
                    if n:
                        offs = self.offsets[h, w, k, :n]
                        bits = ((offs[:, None] >> shifts) & 1).astype(np.uint8).ravel()
                        out += np.packbits(bits, bitorder="little").tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, data, shape, start=0):
        """Parse a map for a (C, H, W) tensor. Returns ``(map, end_offset)``."""
        c, h, w = shape
        nseg = max(1, -(-c // SEGMENT)) if c else 0
        counts = np.zeros((h, w, nseg), dtype=np.uint8)
        offsets = np.zeros((h, w, nseg, SEGMENT), dtype=np.uint8)
        pos = start
        view = memoryview(data)
        for hi in range(h):
            for wi in range(w):
                for k in range(nseg):
                    if pos >= len(view):
                        raise TraceFormatError("truncated offset map", pos)
                    n = view[pos] & COUNT_MASK
                    width = min(SEGMENT, c - k * SEGMENT)
                    if n > width:
                        raise TraceFormatError(f"segment count {n} exceeds segment width {width}", pos)
                    pos += 1
                    nbytes = -(-n * OFFSET_BITS // 8)
                    if pos + nbytes > len(view):
                        raise TraceFormatError("truncated offset payload", pos)
                    if n:
                        raw = np.frombuffer(view[pos:pos + nbytes], dtype=np.uint8)
                        bits = np.unpackbits(raw, count=n * OFFSET_BITS, bitorder="little")
                        offs = (bits.reshape(n, OFFSET_BITS) << np.arange(OFFSET_BITS)).sum(axis=1)
                        if np.any(np.diff(offs) <= 0) or offs[-1] >= width:
                            raise TraceFormatError("offsets not strictly increasing or out of range", pos)
                        offsets[hi, wi, k, :n] = offs
                        counts[hi, wi, k] = n
                    pos += nbytes
        return cls(c, h, w, counts, offsets, scanned=c * h * w), pos

    def __eq__(self, other):
        if not isinstance(other, OffsetMap):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.offsets, other.offsets)
        )


def encode_tc_offsets(x):
    """Index the non-zero channels of a (C, H, W) tensor, 32 channels at a time."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    c, h, w = x.shape
    nseg = -(-c // SEGMENT)
    nz = np.zeros((nseg * SEGMENT, h, w), dtype=bool)
    nz[:c] = x != 0
    nz = nz.reshape(nseg, SEGMENT, h, w).transpose(2, 3, 0, 1)
    counts = nz.sum(axis=-1).astype(np.uint8)
    # stable argsort of ~nz puts the set positions first, in increasing order
    order = np.argsort(~nz, axis=-1, kind="stable").astype(np.uint8)
    keep = np.arange(SEGMENT) < counts[..., None]
    offsets = np.where(keep, order, 0).astype(np.uint8)
    return OffsetMap(c, h, w, np.ascontiguousarray(counts), np.ascontiguousarray(offsets), scanned=x.size)


def build_wc_bitmap(a):
    return OutputBitmap(np.asarray(a) != 0)


def sparsity_fraction(x):
    x = np.asarray(x)
    if x.size == 0:
        return 0.0
    return float(np.count_nonzero(x == 0) / x.size)


def footprint_equal(a, b):
    """Compare two bitmaps. Returns ``(equal, first_mismatch_or_None)``."""
    if a.shape != b.shape:
        raise ShapeError(f"bitmap shapes differ: {a.shape} vs {b.shape}")
    diff = np.flatnonzero(a.bits.ravel() != b.bits.ravel())
    if diff.size == 0:
        return True, None
    return False, tuple(int(i) for i in np.unravel_index(diff[0], a.shape))


@dataclass(frozen=True)
class SparsityStats:
    layer: int
    pass_tag: str
    zero_fraction: float
    per_channel: tuple
    per_tile: tuple  # row-major over the (Tx, Ty) grid


def sparsity_stats(x, layer, pass_tag, tiles=(1, 1)):
    """Aggregate, per-channel and per-tile zero fractions of a (C, H, W) tensor."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    zero = x == 0
    _, h, w = x.shape
    per_tile = []
    for r0, r1 in split_extent(h, tiles[0]):
        for c0, c1 in split_extent(w, tiles[1]):
            per_tile.append(float(zero[:, r0:r1, c0:c1].mean()))
    return SparsityStats(
        layer=layer,
        pass_tag=pass_tag,
        zero_fraction=float(zero.mean()) if x.size else 0.0,
        per_channel=tuple(float(v) for v in zero.reshape(zero.shape[0], -1).mean(axis=1)),
        per_tile=tuple(per_tile),
    )
