"""Bitstream for quantized models: static per-layer range coding of integer symbols.

See ``docs/bitstream.md`` for the byte layout.
"""

from __future__ import annotations

import bisect
import csv
import io
import struct
import warnings
import zlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .quant import QuantizedModel, clip_bounds

MAGIC = b"INRQBS"
VERSION = 1
FREQ_TOTAL = 1 << 16
TOP = 1 << 24
MASK32 = 0xFFFFFFFF
RD_FIELDS = ("target_bits", "actual_bits", "bpp", "psnr", "seconds", "config")


class BitstreamError(ValueError):
    """Base class for undecodable streams."""


class ChecksumError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class VersionError(BitstreamError):
    pass


class DigestMismatchWarning(UserWarning):
    pass


# varints ---------------------------------------------------------------------------


def _put_varint(out: bytearray, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _get_varint(buf: bytes, pos: int) -> Tuple[int, int]:
    shift = value = 0
    while True:
        if pos >= len(buf):
            raise TruncatedStreamError("frequency table truncated")
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7


# frequency model ---------------------------------------------------------------------


def frequencies(counts: Sequence[int]) -> List[int]:
    """Add-one smoothed frequencies scaled to a total of at most 2**16."""
    k = len(counts)
    n = int(sum(counts))
    if k > FREQ_TOTAL // 2:
        raise ValueError("alphabet too large for the frequency model")
    if n == 0:
        return [1] * k
    budget = FREQ_TOTAL - k
    return [1 + (int(c) * budget) // n for c in counts]


def _cumulative(freqs: Sequence[int]) -> List[int]:
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    return cum


# range coder -------------------------------------------------------------------------


class RangeEncoder:
    """32-bit range coder with byte-wise renormalization and deferred carry (cache + run of 0xFF)."""

    def __init__(self) -> None:
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, cum_low: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low += r * cum_low
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._byte()) & MASK32

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("range-coded payload ended early")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cum: Sequence[int]) -> int:
        total = cum[-1]
        r = self.range // total
        value = min(self.code // r, total - 1)
        sym = bisect.bisect_right(cum, value) - 1
        self.code -= r * cum[sym]
        self.range = r * (cum[sym + 1] - cum[sym])
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range <<= 8
        return sym


def encode_symbols(symbols: Sequence[int], freqs: Sequence[int]) -> bytes:
    cum = _cumulative(freqs)
    total = cum[-1]
    enc = RangeEncoder()
    for s in symbols:
        enc.encode(cum[s], cum[s + 1] - cum[s], total)
    return enc.finish()


def decode_symbols(payload: bytes, freqs: Sequence[int], count: int) -> List[int]:
    cum = _cumulative(freqs)
    dec = RangeDecoder(payload)
    return [dec.decode(cum) for _ in range(count)]


def empirical_entropy_bits(symbols: Sequence[int]) -> float:
    """n * H(empirical histogram): a lower bound for any static order-0 code."""
    _, counts = np.unique(np.asarray(symbols), return_counts=True)
    n = counts.sum()
    p = counts / n
    return float(-(counts * np.log2(p)).sum())


# bitstream ---------------------------------------------------------------------------


@dataclass
class LayerRecord:
    name: str
    shape: Tuple[int, ...]
    bits: int
    steps: np.ndarray  # float16 values, as stored
    counts: List[int]
    table: bytes
    payload: bytes

    @property
    def n_symbols(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class Bitstream:
    spec_digest: bytes
    layers: List[LayerRecord]
    raw: bytes = b""

    @property
    def payload_bytes(self) -> int:
        return sum(len(l.payload) for l in self.layers)

    @property
    def table_bytes(self) -> int:
        return sum(len(l.table) for l in self.layers)

    @property
    def n_steps(self) -> int:
        return sum(l.steps.size for l in self.layers)

    @property
    def container_bytes(self) -> int:
        return len(self.raw)

    @property
    def coded_weight_bits(self) -> int:
        return 8 * (self.payload_bytes + self.table_bytes)

    @property
    def step_bits(self) -> int:
        return 16 * self.n_steps

    @property
    def config(self) -> Tuple[int, ...]:
        return tuple(l.bits for l in self.layers)

    def to_bytes(self) -> bytes:
        return self.raw


def _layer_header(rec: LayerRecord) -> bytes:
    nb = rec.name.encode()
    out = bytearray()
    out += struct.pack("<H", len(nb)) + nb
    out += struct.pack("<B", len(rec.shape)) + struct.pack(f"<{len(rec.shape)}I", *rec.shape)
    out += struct.pack("<B", rec.bits)
    out += struct.pack("<I", rec.steps.size) + rec.steps.astype("<f2").tobytes()
    out += struct.pack("<I", len(rec.table)) + rec.table
    out += struct.pack("<I", len(rec.payload))
    return bytes(out)


def encode(spec_digest: bytes, model: QuantizedModel, order: Optional[Sequence[str]] = None) -> Bitstream:
    """Serialize integer symbols, FP16 steps and bitwidths into a bitstream."""
    order = list(model.ints) if order is None else list(order)
    if len(spec_digest) != 32:
        raise ValueError("spec digest must be 32 bytes")
    records = []
    for name in order:
        b = int(model.bits[name])
        ints = np.asarray(model.ints[name])
        lo, hi = clip_bounds(b)
        if ints.size and (ints.min() < lo or ints.max() > hi):
            raise ValueError(f"layer {name!r}: symbol outside [{lo}, {hi}] for {b} bits")
        symbols = (ints.reshape(-1).astype(np.int64) - lo).tolist()
        counts = np.bincount(np.asarray(symbols, dtype=np.int64), minlength=2**b).tolist()
        table = bytearray()
        for c in counts:
            _put_varint(table, int(c))
        payload = encode_symbols(symbols, frequencies(counts))
        steps16 = np.asarray(model.steps[name], dtype=np.float64).reshape(-1).astype(np.float16)
        records.append(LayerRecord(name, tuple(int(s) for s in ints.shape), b, steps16, counts, bytes(table), payload))
    head = bytearray(MAGIC + struct.pack("<H", VERSION) + spec_digest + struct.pack("<I", len(records)))
    for rec in records:
        head += _layer_header(rec)
    body = head + b"".join(rec.payload for rec in records)
    raw = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    return Bitstream(spec_digest, records, raw)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedStreamError(f"stream truncated at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


@dataclass
class DecodedStream:
    model: QuantizedModel
    order: List[str]
    config: Tuple[int, ...]
    spec_digest: bytes
    stream: Bitstream


def parse(raw: bytes) -> Bitstream:
    """Validate framing and checksum; returns the stream with records but undecoded payloads."""
    raw = bytes(raw)
    if len(raw) < len(MAGIC) + 2:
        raise TruncatedStreamError("stream shorter than its header")
    if raw[: len(MAGIC)] != MAGIC:
        raise BitstreamError("not a bitstream (bad magic)")
    (version,) = struct.unpack_from("<H", raw, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"unsupported bitstream version {version} (expected {VERSION})")
    rd = _Reader(raw[:-4] if len(raw) >= 4 else raw)
    rd.take(len(MAGIC) + 2)
    digest = rd.take(32)
    (n_layers,) = rd.unpack("<I")
    headers = []
    for _ in range(n_layers):
        (ln,) = rd.unpack("<H")
        name = rd.take(ln).decode()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        (bits,) = rd.unpack("<B")
        (n_steps,) = rd.unpack("<I")
        steps = np.frombuffer(rd.take(2 * n_steps), dtype="<f2").astype(np.float16)
        (tl,) = rd.unpack("<I")
        table = rd.take(tl)
        (pl,) = rd.unpack("<I")
        headers.append((name, tuple(shape), bits, steps, table, pl))
    expected_end = rd.pos + sum(h[5] for h in headers)
    if expected_end + 4 > len(raw):
        raise TruncatedStreamError(f"declared payload needs {expected_end + 4} bytes, stream has {len(raw)}")
    if expected_end + 4 < len(raw):
        raise BitstreamError("trailing bytes after declared payload")
    (crc,) = struct.unpack_from("<I", raw, expected_end)
    if zlib.crc32(raw[:expected_end]) != crc:
        raise ChecksumError("bitstream checksum mismatch")
    records = []
    for name, shape, bits, steps, table, pl in headers:
        payload = rd.take(pl)
        counts, pos = [], 0
        for _ in range(2**bits):
            c, pos = _get_varint(table, pos)
            counts.append(c)
        if pos != len(table):
            raise BitstreamError(f"layer {name!r}: frequency table has trailing bytes")
        if sum(counts) != int(np.prod(shape)):
            raise BitstreamError(f"layer {name!r}: table counts do not match the shape")
        records.append(LayerRecord(name, shape, bits, steps, counts, table, payload))
    return Bitstream(digest, records, raw)


def decode(raw, expected_digest: Optional[bytes] = None) -> DecodedStream:
    """Recover integer symbols, FP16 steps and bitwidths exactly."""
    stream = raw if isinstance(raw, Bitstream) else parse(raw)
    if isinstance(raw, Bitstream):
        stream = parse(raw.raw)
    if expected_digest is not None and expected_digest != stream.spec_digest:
        warnings.warn("bitstream was produced for a different model spec", DigestMismatchWarning, stacklevel=2)
    ints, steps, bits, order = {}, {}, {}, []
    for rec in stream.layers:
        lo, _ = clip_bounds(rec.bits)
        sym = decode_symbols(rec.payload, frequencies(rec.counts), rec.n_symbols)
        ints[rec.name] = (np.asarray(sym, dtype=np.int64) + lo).reshape(rec.shape)
        steps[rec.name] = rec.steps.astype(np.float64)
        bits[rec.name] = rec.bits
        order.append(rec.name)
    model = QuantizedModel(ints, steps, bits)
    return DecodedStream(model, order, stream.config, stream.spec_digest, stream)


# rate accounting ---------------------------------------------------------------------


@dataclass(frozen=True)
class Bpp:
    weights: float
    steps: float
    container_bytes: int

    @property
    def total(self) -> float:
        return self.weights + self.steps


def bpp(stream: Bitstream, frames: int, height: int, width: int) -> Bpp:
    """Coded symbols + tables, and 16 bits per stored step, per pixel of the clip."""
    if frames <= 0 or height <= 0 or width <= 0:
        raise ValueError("clip dimensions must be positive")
    pixels = frames * height * width
    return Bpp(stream.coded_weight_bits / pixels, stream.step_bits / pixels, stream.container_bytes)


@dataclass
class RDPoint:
    target_bits: float
    actual_bits: int
    bpp: float
    psnr: float
    seconds: float
    config: Tuple[int, ...]

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError("bpp must be positive")

    def row(self) -> List[str]:
        return [
            f"{self.target_bits:.0f}",
            str(self.actual_bits),
            f"{self.bpp:.6f}",
            f"{self.psnr:.4f}",
            f"{self.seconds:.2f}",
            "-".join(map(str, self.config)),
        ]


def rd_csv(points: Sequence[RDPoint]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(RD_FIELDS)
    for p in points:
        wr.writerow(p.row())
    return buf.getvalue()
