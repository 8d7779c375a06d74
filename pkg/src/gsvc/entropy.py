"""Adaptive arithmetic coding for quantized attribute streams.

The coder is the classic integer range coder with underflow counting:
32-bit low/high registers, top-bit renormalization, and a pending-bit
counter for the straddle case. Symbol statistics adapt as they are coded,
starting from a uniform count of one per letter, so the decoder rebuilds
the identical model from the payload alone and no table is transmitted.

Every payload leads with a scheme byte and a checksum of the symbols it
carries. When the adaptive code comes out larger than fixed-width packing
(tiny or incompressible inputs), the packed form is emitted instead, which
caps the payload at ``ceil(n * ceil(log2(alphabet)) / 8)`` body bytes for
any input whatsoever.
"""

from __future__ import annotations

import zlib

import numpy as np

# Register geometry for the coder.
_CODE_BITS = 32
_TOP = 1 << _CODE_BITS
_HALF = _TOP >> 1
_QUARTER = _TOP >> 2
_THREE_QUARTERS = _HALF + _QUARTER

# Adaptive model bounds. Totals stay far below the coder's quarter range,
# which keeps every letter's interval nonempty after renormalization.
_RESCALE_TOTAL = 1 << 16

MAX_ALPHABET = 65536

_SCHEME_CODED = 0
_SCHEME_RAW = 1
_HEADER_BYTES = 5  # scheme byte + crc32


class EntropyDecodeError(ValueError):
    """Payload failed to decode.

    Attributes:
        position: index of the first undecodable symbol, or None when the
            failure is only detectable after the fact (checksum mismatch).
    """

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class _AdaptiveModel:
    """Per-letter frequency counts with periodic halving."""

    def __init__(self, alphabet):
        self.freq = np.ones(alphabet, dtype=np.int64)
        self.total = alphabet

    def cumulative(self):
        cum = np.zeros(self.freq.size + 1, dtype=np.int64)
        np.cumsum(self.freq, out=cum[1:])
        return cum

    def update(self, symbol):
        self.freq[symbol] += 1
        self.total += 1
        if self.total >= _RESCALE_TOTAL:
            self.freq -= self.freq >> 1  # halve, never below one
            self.total = int(self.freq.sum())


class _BitWriter:
    def __init__(self):
        self._bits = []

    def put(self, bit):
        self._bits.append(bit)

    def put_with_pending(self, bit, pending):
        self._bits.append(bit)
        self._bits.extend([bit ^ 1] * pending)

    def getvalue(self):
        arr = np.array(self._bits, dtype=np.uint8)
        return np.packbits(arr).tobytes()


class _BitReader:
    """MSB-first bit source that pads with zeros past the end.

    The coder's final register may legitimately read a few bits beyond the
    written payload; anything past ``slack`` extra bits is corruption.
    """

    def __init__(self, data, slack=_CODE_BITS):
        self._bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        self._pos = 0
        self._limit = self._bits.size + slack

    def get(self):
        if self._pos >= self._limit:
            raise EntropyDecodeError("bit source exhausted", position=None)
        bit = int(self._bits[self._pos]) if self._pos < self._bits.size else 0
        self._pos += 1
        return bit


def _encode_core(symbols, alphabet):
    model = _AdaptiveModel(alphabet)
    out = _BitWriter()
    low, high, pending = 0, _TOP - 1, 0
    for s in symbols:
        cum = model.cumulative()
        span = high - low + 1
        total = model.total
        high = low + span * int(cum[s + 1]) // total - 1
        low = low + span * int(cum[s]) // total
        while True:
            if high < _HALF:
                out.put_with_pending(0, pending)
                pending = 0
            elif low >= _HALF:
                out.put_with_pending(1, pending)
                pending = 0
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _THREE_QUARTERS:
                pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low = low * 2
            high = high * 2 + 1
        model.update(s)
    pending += 1
    out.put_with_pending(0 if low < _QUARTER else 1, pending)
    return out.getvalue()


def _decode_core(data, alphabet, count):
    model = _AdaptiveModel(alphabet)
    reader = _BitReader(data)
    value = 0
    for _ in range(_CODE_BITS):
        value = value * 2 + reader.get()
    low, high = 0, _TOP - 1
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        cum = model.cumulative()
        span = high - low + 1
        total = model.total
        target = ((value - low + 1) * total - 1) // span
        s = int(np.searchsorted(cum, target, side="right")) - 1
        if not 0 <= s < alphabet:
            raise EntropyDecodeError(
                f"undecodable symbol at position {i}", position=i
            )
        high = low + span * int(cum[s + 1]) // total - 1
        low = low + span * int(cum[s]) // total
        out[i] = s
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                value -= _HALF
            elif low >= _QUARTER and high < _THREE_QUARTERS:
                low -= _QUARTER
                high -= _QUARTER
                value -= _QUARTER
            else:
                break
            low = low * 2
            high = high * 2 + 1
            value = value * 2 + reader.get()
        model.update(s)
    return out


def _raw_bits(alphabet):
    return max(int(np.ceil(np.log2(alphabet))), 0) if alphabet > 1 else 0


def pack_uint_bits(values, bits):
    """Pack unsigned ints into ``bits`` MSB-first bits each."""
    values = np.asarray(values, dtype=np.uint32)
    if bits == 0 or values.size == 0:
        return b""
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    bit_rows = (values[:, None] >> shifts) & 1
    return np.packbits(bit_rows.astype(np.uint8).ravel()).tobytes()


def unpack_uint_bits(data, bits, count):
    """Inverse of :func:`pack_uint_bits`."""
    if bits == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    need = count * bits
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if raw.size < need:
        raise EntropyDecodeError("packed payload too short", position=None)
    rows = raw[:need].reshape(count, bits).astype(np.int64)
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    return rows @ weights


def _canonical_bytes(symbols, alphabet):
    dtype = np.uint8 if alphabet <= 256 else "<u2"
    return np.ascontiguousarray(symbols.astype(dtype)).tobytes()


def entropy_encode(symbols, alphabet: int) -> bytes:
    """Code a symbol array into a self-checking payload.

    Args:
        symbols: integer array with values in ``[0, alphabet)``.
        alphabet: number of letters, at most ``MAX_ALPHABET``.

    Returns:
        scheme byte + crc32 of the symbols + body (adaptive code or
        fixed-width packing, whichever is smaller).
    """
    if not 1 <= alphabet <= MAX_ALPHABET:
        raise ValueError(f"alphabet must lie in [1, {MAX_ALPHABET}]")
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if symbols.size and (symbols.min() < 0 or symbols.max() >= alphabet):
        raise ValueError("symbol outside the alphabet")

    crc = zlib.crc32(_canonical_bytes(symbols, alphabet))
    raw_body = pack_uint_bits(symbols, _raw_bits(alphabet))
    if symbols.size == 0:
        scheme, body = _SCHEME_RAW, b""
    else:
        coded_body = _encode_core(symbols.tolist(), alphabet)
        if len(coded_body) < len(raw_body):
            scheme, body = _SCHEME_CODED, coded_body
        else:
            scheme, body = _SCHEME_RAW, raw_body
    return bytes([scheme]) + crc.to_bytes(4, "little") + body


def entropy_decode(payload: bytes, alphabet: int, count: int) -> np.ndarray:
    """Recover ``count`` symbols from an :func:`entropy_encode` payload."""
    if not 1 <= alphabet <= MAX_ALPHABET:
        raise ValueError(f"alphabet must lie in [1, {MAX_ALPHABET}]")
    if count < 0:
        raise ValueError("count must be non-negative")
    if len(payload) < _HEADER_BYTES:
        raise EntropyDecodeError("payload shorter than its header",
                                 position=None)
    scheme = payload[0]
    want_crc = int.from_bytes(payload[1:5], "little")
    body = payload[_HEADER_BYTES:]
    if scheme == _SCHEME_CODED:
        symbols = _decode_core(body, alphabet, count)
    elif scheme == _SCHEME_RAW:
        symbols = unpack_uint_bits(body, _raw_bits(alphabet), count)
    else:
        raise EntropyDecodeError(f"unknown payload scheme {scheme}",
                                 position=None)
    if zlib.crc32(_canonical_bytes(symbols, alphabet)) != want_crc:
        raise EntropyDecodeError("payload checksum mismatch", position=None)
    return symbols
