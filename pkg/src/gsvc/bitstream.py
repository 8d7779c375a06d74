"""GSVC container format and the bits-back savings estimator.

Layout (all integers little-endian, no padding):

    stream    := header record*
    header    := magic "GSVC" | version u8 |
                 width u32 | height u32 | fps f32 | gop u16 |
                 n_gaussians u32 | frame_count u32 |
                 background f32 x3 | change_threshold f32 |
                 render_cutoff f32 | fit_digest 16 bytes |
                 tlv_count u16 | tlv*
    tlv       := tag u8 | length u32 | value bytes
    record    := type u8 (0 = I, 1 = P) | length u32 | crc32 u32 | payload

The TLV block carries the quantizer verbatim (mode, bit depths, per-channel
offsets and scales); unknown tags are skipped so later revisions can add
fields without breaking version-1 readers. Exactly ``frame_count`` records
follow the header and nothing may trail the last one.

I-frame payloads hold every splat's attributes; P-frame payloads hold a
count, the delta-coded ascending ID list of re-fitted splats, then just
those splats' attributes (absolute values, not deltas, so a decode error
cannot accumulate). Integer attribute channels are split into byte planes
and entropy-coded per plane; ``mode == "none"`` stores raw float32 arrays
instead. Every payload and every attribute stream is self-checking, and a
stream decodes with no side information beyond its own bytes.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .entropy import EntropyDecodeError, entropy_decode, entropy_encode
from .quantization import MODES, QuantSpec, QuantizedGaussians, _int_dtype

MAGIC = b"GSVC"
VERSION = 1

# Splat IDs travel as 16-bit values, which caps a stream's set size.
MAX_GAUSSIANS = 65536

_HEADER_FMT = "<IIfHIIfffff16s"
_RECORD_FMT = "<BII"
_TYPE_CODES = {"I": 0, "P": 1}
_TYPE_NAMES = {0: "I", 1: "P"}

# TLV tags for the quantizer block.
_TAG_MODE = 1
_TAG_MU_BITS = 2
_TAG_CHOL_BITS = 3
_TAG_COLOR_BITS = 4
_TAG_ARRAYS = {
    5: "mu_offset",
    6: "mu_scale",
    7: "chol_offset",
    8: "chol_scale",
    9: "color_offset",
    10: "color_scale",
}


class BitstreamError(Exception):
    """Base for malformed or unreadable streams."""


class BadMagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class CorruptPayloadError(BitstreamError):
    pass


@dataclass(frozen=True)
class StreamHeader:
    """Everything a decoder needs before the first frame record."""

    width: int
    height: int
    fps: float
    gop: int
    n_gaussians: int
    frame_count: int
    background: tuple
    change_threshold: float
    quant: QuantSpec
    render_cutoff: float = 3.0
    fit_digest: bytes = b"\x00" * 16

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("frame dimensions must be positive")
        if self.gop < 1:
            raise ValueError("gop must be at least 1")
        if not 0 < self.n_gaussians <= MAX_GAUSSIANS:
            raise ValueError(f"n_gaussians must lie in [1, {MAX_GAUSSIANS}]")
        if self.frame_count < 0:
            raise ValueError("frame_count must be non-negative")
        if len(self.background) != 3:
            raise ValueError("background must hold three channels")
        if not 0.0 <= self.change_threshold <= 1.0:
            raise ValueError("change_threshold must lie in [0, 1]")
        if self.render_cutoff <= 0.0:
            raise ValueError("render_cutoff must be positive")
        if len(self.fit_digest) != 16:
            raise ValueError("fit_digest must be 16 bytes")
        object.__setattr__(
            self, "background", tuple(float(c) for c in self.background)
        )

    @property
    def frame_dims(self) -> tuple:
        return (self.width, self.height)


@dataclass(frozen=True)
class FrameRecord:
    """One frame's transport payload.

    ``ids`` is None for I-frames; for P-frames it lists, ascending, the
    splats whose attributes ``q`` carries (``q.n == len(ids)``).
    """

    frame_type: str
    q: QuantizedGaussians
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.frame_type not in _TYPE_CODES:
            raise ValueError("frame_type must be 'I' or 'P'")
        if (self.frame_type == "P") != (self.ids is not None):
            raise ValueError("P records carry an ID list, I records do not")


@dataclass(frozen=True)
class SavingsReport:
    """Bits-back accounting for one stream (an estimate, not a coder)."""

    gaussians_per_pframe: int
    p_frame_count: int
    savings_per_pframe_bits: float
    total_savings_bits: float
    plain_total_bits: float
    bitsback_total_bits: float


class _Cursor:
    """Bounds-checked reader over immutable bytes."""

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"stream ends inside {what} "
                f"(need {n} bytes at offset {self.pos})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def exhausted(self):
        return self.pos == len(self.data)


def _tlv(tag, value):
    return struct.pack("<BI", tag, len(value)) + value


def _quant_tlv_block(spec: QuantSpec) -> bytes:
    entries = [
        _tlv(_TAG_MODE, spec.mode.encode("utf-8")),
        _tlv(_TAG_MU_BITS, bytes([spec.mu_bits])),
        _tlv(_TAG_CHOL_BITS, bytes([spec.chol_bits])),
        _tlv(_TAG_COLOR_BITS, bytes([spec.color_bits])),
    ]
    for tag, field in _TAG_ARRAYS.items():
        arr = getattr(spec, field)
        if arr is not None:
            entries.append(_tlv(tag, np.asarray(arr, dtype="<f8").tobytes()))
    return struct.pack("<H", len(entries)) + b"".join(entries)


def _parse_quant_tlvs(cur: _Cursor) -> QuantSpec:
    (count,) = cur.unpack("<H", "quantizer TLV count")
    fields = {}
    for _ in range(count):
        tag, length = cur.unpack("<BI", "quantizer TLV header")
        value = cur.take(length, "quantizer TLV value")
        if tag == _TAG_MODE:
            fields["mode"] = value.decode("utf-8")
        elif tag == _TAG_MU_BITS:
            fields["mu_bits"] = value[0]
        elif tag == _TAG_CHOL_BITS:
            fields["chol_bits"] = value[0]
        elif tag == _TAG_COLOR_BITS:
            fields["color_bits"] = value[0]
        elif tag in _TAG_ARRAYS:
            fields[_TAG_ARRAYS[tag]] = np.frombuffer(value, dtype="<f8")
        # unknown tags: skipped for forward compatibility
    if fields.get("mode") not in MODES:
        raise CorruptPayloadError(
            f"header names an unknown quantizer mode {fields.get('mode')!r}"
        )
    try:
        return QuantSpec(**fields)
    except ValueError as exc:
        raise CorruptPayloadError(f"bad quantizer parameters: {exc}") from exc


def _plane_split(values, bits):
    """Byte planes (low first) covering ``bits``-wide unsigned values."""
    values = np.asarray(values, dtype=np.int64)
    if bits <= 8:
        return [(values, 1 << bits)]
    return [(values & 0xFF, 256), (values >> 8, 1 << (bits - 8))]


def _encode_planes(values, bits):
    parts = []
    for plane, alphabet in _plane_split(values, bits):
        payload = entropy_encode(plane, alphabet)
        parts.append(struct.pack("<I", len(payload)) + payload)
    return b"".join(parts)


def _decode_planes(cur: _Cursor, bits, count, what):
    total = np.zeros(count, dtype=np.int64)
    shift = 0
    n_planes = 1 if bits <= 8 else 2
    for p in range(n_planes):
        alphabet = (1 << min(bits, 8)) if p == 0 else (1 << (bits - 8))
        (length,) = cur.unpack("<I", f"{what} stream length")
        payload = cur.take(length, f"{what} stream")
        try:
            plane = entropy_decode(payload, alphabet, count)
        except EntropyDecodeError as exc:
            raise CorruptPayloadError(f"{what} stream: {exc}") from exc
        total |= plane << shift
        shift += 8
    return total


def _quantized_channels(spec: QuantSpec):
    return (
        [("mu", c, spec.mu_bits) for c in range(2)]
        + [("chol", c, spec.chol_bits) for c in range(3)]
        + [("color", c, spec.color_bits) for c in range(3)]
    )


def _encode_attributes(q: QuantizedGaussians, spec: QuantSpec) -> bytes:
    if spec.mode == "none":
        parts = []
        for arr in (q.mu, q.chol, q.color):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(parts)
    parts = []
    for attr, channel, bits in _quantized_channels(spec):
        parts.append(_encode_planes(getattr(q, attr)[:, channel], bits))
    return b"".join(parts)


def _decode_attributes(cur: _Cursor, spec: QuantSpec, count: int
                       ) -> QuantizedGaussians:
    if spec.mode == "none":
        arrays = []
        for name, width in (("mu", 2), ("chol", 3), ("color", 3)):
            raw = cur.take(4 * width * count, f"{name} float array")
            arrays.append(
                np.frombuffer(raw, dtype="<f4").reshape(count, width).copy()
            )
        return QuantizedGaussians(*arrays)
    mu = np.zeros((count, 2), dtype=_int_dtype(spec.mu_bits))
    chol = np.zeros((count, 3), dtype=_int_dtype(spec.chol_bits))
    color = np.zeros((count, 3), dtype=_int_dtype(spec.color_bits))
    arrays = {"mu": mu, "chol": chol, "color": color}
    for attr, channel, bits in _quantized_channels(spec):
        vals = _decode_planes(cur, bits, count, f"{attr}[{channel}]")
        arrays[attr][:, channel] = vals
    return QuantizedGaussians(mu=mu, chol=chol, color=color)


def _empty_quantized(spec: QuantSpec) -> QuantizedGaussians:
    if spec.mode == "none":
        dtypes = (np.float32, np.float32, np.float32)
    else:
        dtypes = (_int_dtype(spec.mu_bits), _int_dtype(spec.chol_bits),
                  _int_dtype(spec.color_bits))
    return QuantizedGaussians(
        mu=np.zeros((0, 2), dtype=dtypes[0]),
        chol=np.zeros((0, 3), dtype=dtypes[1]),
        color=np.zeros((0, 3), dtype=dtypes[2]),
    )


def _encode_ids(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    deltas = np.diff(ids, prepend=0)  # first entry absolute, rest gaps
    return _encode_planes(deltas, 16)


def _decode_ids(cur: _Cursor, m, n_gaussians) -> np.ndarray:
    deltas = _decode_planes(cur, 16, m, "changed-ID")
    ids = np.cumsum(deltas)
    if m and (ids[-1] >= n_gaussians or np.any(np.diff(ids) <= 0)
              or ids[0] < 0):
        raise CorruptPayloadError("changed-ID list is not ascending in range")
    return ids.astype(np.int32)


def encode_frame_record(rec: FrameRecord, header: StreamHeader) -> bytes:
    """Serialize one frame to its ``[type][len][crc][payload]`` record."""
    if rec.frame_type == "I":
        if rec.q.n != header.n_gaussians:
            raise ValueError("I record must carry every splat")
        payload = _encode_attributes(rec.q, header.quant)
    else:
        ids = np.asarray(rec.ids, dtype=np.int64)
        if ids.size != rec.q.n:
            raise ValueError("P record ID list and attribute rows disagree")
        if ids.size and (
            np.any(np.diff(ids) <= 0)
            or ids[0] < 0
            or ids[-1] >= header.n_gaussians
        ):
            raise ValueError("P record IDs must ascend within [0, N)")
        payload = struct.pack("<I", ids.size)
        if ids.size:
            payload += _encode_ids(ids)
            payload += _encode_attributes(rec.q, header.quant)
    return struct.pack(
        _RECORD_FMT, _TYPE_CODES[rec.frame_type], len(payload),
        zlib.crc32(payload),
    ) + payload


def _decode_frame_record(cur: _Cursor, header: StreamHeader, index: int
                         ) -> FrameRecord:
    type_code, length, want_crc = cur.unpack(_RECORD_FMT,
                                             f"record {index} header")
    if type_code not in _TYPE_NAMES:
        raise CorruptPayloadError(
            f"record {index} has unknown frame type {type_code}"
        )
    payload = cur.take(length, f"record {index} payload")
    if zlib.crc32(payload) != want_crc:
        raise CorruptPayloadError(f"record {index} failed its checksum")
    body = _Cursor(payload)
    try:
        if type_code == _TYPE_CODES["I"]:
            q = _decode_attributes(body, header.quant, header.n_gaussians)
            rec = FrameRecord("I", q)
        else:
            (m,) = body.unpack("<I", "changed-splat count")
            if m > header.n_gaussians:
                raise CorruptPayloadError(
                    f"record {index} claims {m} changed splats"
                )
            if m:
                ids = _decode_ids(body, m, header.n_gaussians)
                q = _decode_attributes(body, header.quant, m)
            else:
                # An empty record body carries nothing past the count.
                ids = np.empty(0, dtype=np.int32)
                q = _empty_quantized(header.quant)
            rec = FrameRecord("P", q, ids)
    except TruncatedStreamError as exc:
        # The record passed its checksum, so a short payload is a
        # structural contradiction rather than lost bytes.
        raise CorruptPayloadError(f"record {index}: {exc}") from exc
    if not body.exhausted:
        raise CorruptPayloadError(
            f"record {index} payload has {len(payload) - body.pos} "
            "trailing bytes"
        )
    return rec


def _expected_type(index, gop):
    return "I" if index % gop == 0 else "P"


def encode_header(header: StreamHeader) -> bytes:
    """Magic, version, fixed fields, and the quantizer TLV block."""
    return b"".join([
        MAGIC,
        bytes([VERSION]),
        struct.pack(
            _HEADER_FMT,
            header.width, header.height, float(header.fps), header.gop,
            header.n_gaussians, header.frame_count,
            *(float(c) for c in header.background),
            float(header.change_threshold), float(header.render_cutoff),
            header.fit_digest,
        ),
        _quant_tlv_block(header.quant),
    ])


def serialize(header: StreamHeader, frames: Sequence[FrameRecord]) -> bytes:
    """Assemble a complete stream; the GoP pattern is enforced."""
    if len(frames) != header.frame_count:
        raise ValueError("frame_count disagrees with the record list")
    out = [encode_header(header)]
    for i, rec in enumerate(frames):
        if rec.frame_type != _expected_type(i, header.gop):
            raise ValueError(
                f"record {i} is {rec.frame_type} but the GoP pattern "
                f"requires {_expected_type(i, header.gop)}"
            )
        out.append(encode_frame_record(rec, header))
    return b"".join(out)


def deserialize(data: bytes):
    """Parse a stream into ``(StreamHeader, [FrameRecord])``.

    Strict: bad magic, alien versions, truncation anywhere, checksum
    failures, GoP violations, and trailing garbage all raise typed
    :class:`BitstreamError` subclasses.
    """
    cur = _Cursor(data)
    magic = cur.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a GSVC stream (leads with {magic!r})")
    version = cur.take(1, "version")[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"stream version {version}, "
                                      f"reader supports {VERSION}")
    (width, height, fps, gop, n_gaussians, frame_count,
     bg_r, bg_g, bg_b, tau, cutoff, digest) = cur.unpack(_HEADER_FMT, "header")
    quant = _parse_quant_tlvs(cur)
    try:
        header = StreamHeader(
            width=width, height=height, fps=fps, gop=gop,
            n_gaussians=n_gaussians, frame_count=frame_count,
            background=(bg_r, bg_g, bg_b), change_threshold=tau,
            quant=quant, render_cutoff=cutoff, fit_digest=digest,
        )
    except ValueError as exc:
        raise CorruptPayloadError(f"inconsistent header: {exc}") from exc

    frames = []
    for i in range(frame_count):
        rec = _decode_frame_record(cur, header, i)
        if rec.frame_type != _expected_type(i, gop):
            raise CorruptPayloadError(
                f"record {i} is {rec.frame_type} but the GoP pattern "
                f"requires {_expected_type(i, gop)}"
            )
        frames.append(rec)
    if not cur.exhausted:
        raise CorruptPayloadError(
            f"{len(data) - cur.pos} trailing bytes after the last record"
        )
    return header, frames


def scan_record_sizes(data: bytes) -> list:
    """Per-record ``(frame_type, total_record_bytes)`` without payload decode.

    Walks the container structure only; payload checksums are not verified
    here (use :func:`deserialize` for that).
    """
    cur = _Cursor(data)
    if cur.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError("not a GSVC stream")
    version = cur.take(1, "version")[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"stream version {version}, "
                                      f"reader supports {VERSION}")
    fields = cur.unpack(_HEADER_FMT, "header")
    frame_count = fields[5]
    (tlv_count,) = cur.unpack("<H", "quantizer TLV count")
    for _ in range(tlv_count):
        _, length = cur.unpack("<BI", "quantizer TLV header")
        cur.take(length, "quantizer TLV value")
    sizes = []
    overhead = struct.calcsize(_RECORD_FMT)
    for i in range(frame_count):
        type_code, length, _ = cur.unpack(_RECORD_FMT, f"record {i} header")
        if type_code not in _TYPE_NAMES:
            raise CorruptPayloadError(
                f"record {i} has unknown frame type {type_code}"
            )
        cur.take(length, f"record {i} payload")
        sizes.append((_TYPE_NAMES[type_code], overhead + length))
    if not cur.exhausted:
        raise CorruptPayloadError(
            f"{len(data) - cur.pos} trailing bytes after the last record"
        )
    return sizes


def savings_per_pframe_bits(m: int) -> float:
    """Bits-back gain from one P-frame carrying ``m`` unordered splats.

    The ID list's order carries log2(m!) redundant bits, of which log2(m)
    are needed to disambiguate the decoding; the difference is recoverable
    in principle by a bits-back coder.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    return (math.lgamma(m + 1) - math.log(m)) / math.log(2.0)


def savings_for_counts(counts) -> float:
    """Total estimated savings for per-P-frame splat counts (zeros skipped)."""
    return float(sum(savings_per_pframe_bits(int(m)) for m in counts if m))


def bitsback_savings(m: int, frame_count: int, gop: int,
                     i_frame_bits: float = 0.0,
                     p_frame_bits: float = 0.0) -> SavingsReport:
    """Estimate stream-level bits-back savings at a nominal ``m``.

    Every P-frame is assumed to carry ``m`` splats; the stream has
    ``frame_count - ceil(frame_count / gop)`` P-frames. Measured payload
    sizes may be passed in to fill the with/without totals.
    """
    if frame_count < 1:
        raise ValueError("frame_count must be at least 1")
    if gop < 1:
        raise ValueError("gop must be at least 1")
    s_p = savings_per_pframe_bits(m)
    p_frames = frame_count - math.ceil(frame_count / gop)
    total = p_frames * s_p
    plain = float(i_frame_bits) + float(p_frame_bits)
    return SavingsReport(
        gaussians_per_pframe=int(m),
        p_frame_count=p_frames,
        savings_per_pframe_bits=s_p,
        total_savings_bits=total,
        plain_total_bits=plain,
        bitsback_total_bits=plain - total,
    )
