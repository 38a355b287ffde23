"""Uniform quantization of network parameters and lossless level coding.

Levels are coded tensor by tensor with a context-adaptive binary range
coder.  Per level ``k``:

1. significance bin ``k != 0`` (adaptive context 0 of the tensor)
2. if significant: sign bin in bypass mode (1 = negative)
3. ``|k| - 1`` as truncated unary with at most 4 bins, bin ``i`` using
   adaptive context ``1 + i``
4. if ``|k| - 1 >= 4``: ``|k| - 5`` as order-0 Exp-Golomb in bypass mode

Each tensor gets a fresh set of five contexts.  A context holds a 16-bit
probability that the next bin is 1, starting at 32768.  After coding bin
``b``: ``p += (65536 - p) >> 5`` if ``b`` else ``p -= p >> 5``, then
``p`` is clamped to [64, 65472].

The coder keeps a 32-bit range (initially 0xFFFFFFFF) and a 64-bit low.  A
1-bin takes the lower sub-range of size ``(range >> 16) * p``.  Whenever the
range drops below 2**24 the top byte of ``low`` is shifted out through a
one-byte cache that absorbs carries; finishing the stream shifts out five
more bytes.  The first output byte is therefore always zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nirpcc import neuralnet as nn
from nirpcc.numeric import round_half_away

PROB_INIT = 32768
PROB_MIN = 64
PROB_MAX = 65472
ADAPT_SHIFT = 5
TOP = 1 << 24
NUM_CONTEXTS = 5
UNARY_BINS = 4
LEVEL_LIMIT = 1 << 31
MAX_STEP_EXPONENT = 20


class QuantizationOverflow(ValueError):
    pass


class DecodeError(ValueError):
    """Malformed level payload."""


class PrematureEnd(DecodeError):
    pass


class TrailingData(DecodeError):
    pass


@dataclass
class QuantizedModel:
    config: nn.NetworkConfig
    step_exponent: int
    levels: list  # int64 arrays, one per tensor, shaped like NetworkModel.tensors()

    @property
    def step(self) -> float:
        return 2.0 ** -self.step_exponent

    def flat_levels(self) -> np.ndarray:
        return np.concatenate([lv.ravel() for lv in self.levels])

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        return (
            self.config == other.config
            and self.step_exponent == other.step_exponent
            and len(self.levels) == len(other.levels)
            and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))
        )


def _check_exponent(e: int):
    if not 1 <= e <= MAX_STEP_EXPONENT:
        raise ValueError(f"step exponent must be in 1..{MAX_STEP_EXPONENT}, got {e}")


def quantize(model: nn.NetworkModel, step_exponent: int) -> QuantizedModel:
    """``k = round(q / step)`` with step ``2**-e``, on single-precision weights."""
    _check_exponent(step_exponent)
    scale = float(1 << step_exponent)
    levels = []
    for t in model.tensors():
        q = np.asarray(t, dtype=np.float32).astype(np.float64)
        if not np.all(np.isfinite(q)):
            raise ValueError("cannot quantize non-finite parameters")
        k = round_half_away(q * scale)
        if np.any(np.abs(k) >= LEVEL_LIMIT):
            raise QuantizationOverflow(
                f"level magnitude exceeds 2**31 at step 2**-{step_exponent}"
            )
        levels.append(k.astype(np.int64))
    return QuantizedModel(model.config, step_exponent, levels)


def dequantize(qm: QuantizedModel) -> nn.NetworkModel:
    step = qm.step
    return nn.NetworkModel.from_tensors(qm.config, [lv.astype(np.float64) * step for lv in qm.levels])


def tensor_shapes(config: nn.NetworkConfig) -> list[tuple]:
    shapes = []
    for fi, fo in config.layer_shapes():
        shapes += [(fi, fo), (fo,)]
    return shapes


# --------------------------------------------------------------------------
# range coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low >= 0x100000000:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode_bin(self, ctx: list, i: int, bin_: int):
        p = ctx[i]
        bound = (self.range >> 16) * p
        if bin_:
            self.range = bound
            p += (65536 - p) >> ADAPT_SHIFT
            ctx[i] = PROB_MAX if p > PROB_MAX else p
        else:
            self.low += bound
            self.range -= bound
            p -= p >> ADAPT_SHIFT
            ctx[i] = PROB_MIN if p < PROB_MIN else p
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bypass(self, bin_: int):
        self.range >>= 1
        if bin_:
            self.low += self.range
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_eg0(self, value: int):
        v = value + 1
        n = v.bit_length() - 1
        for _ in range(n):
            self.encode_bypass(0)
        for b in range(n, -1, -1):
            self.encode_bypass((v >> b) & 1)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        if len(data) < 5:
            raise PrematureEnd(f"payload of {len(data)} bytes is shorter than the 5-byte preamble")
        if data[0] != 0:
            raise DecodeError("payload does not start with a zero byte")
        self.code = int.from_bytes(data[1:5], "big")
        self.pos = 5
        self.range = 0xFFFFFFFF

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise PrematureEnd(f"payload ended after {len(self.data)} bytes")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_bin(self, ctx: list, i: int) -> int:
        p = ctx[i]
        bound = (self.range >> 16) * p
        if self.code < bound:
            self.range = bound
            p += (65536 - p) >> ADAPT_SHIFT
            ctx[i] = PROB_MAX if p > PROB_MAX else p
            bin_ = 1
        else:
            self.code -= bound
            self.range -= bound
            p -= p >> ADAPT_SHIFT
            ctx[i] = PROB_MIN if p < PROB_MIN else p
            bin_ = 0
        while self.range < TOP:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()
        return bin_

    def decode_bypass(self) -> int:
        self.range >>= 1
        if self.code >= self.range:
            self.code -= self.range
            bin_ = 1
        else:
            bin_ = 0
        while self.range < TOP:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()
        return bin_

    def decode_eg0(self) -> int:
        n = 0
        while self.decode_bypass() == 0:
            n += 1
            if n > 40:
                raise DecodeError("Exp-Golomb prefix too long")
        v = 1
        for _ in range(n):
            v = (v << 1) | self.decode_bypass()
        return v - 1


# --------------------------------------------------------------------------
# level coding


def _encode_tensor(enc: RangeEncoder, levels):
    ctx = [PROB_INIT] * NUM_CONTEXTS
    for k in levels:
        if k == 0:
            enc.encode_bin(ctx, 0, 0)
            continue
        enc.encode_bin(ctx, 0, 1)
        enc.encode_bypass(1 if k < 0 else 0)
        m = (k if k > 0 else -k) - 1
        for i in range(UNARY_BINS):
            if m > i:
                enc.encode_bin(ctx, 1 + i, 1)
            else:
                enc.encode_bin(ctx, 1 + i, 0)
                break
        else:
            enc.encode_eg0(m - UNARY_BINS)


def _decode_tensor(dec: RangeDecoder, count: int) -> list:
    ctx = [PROB_INIT] * NUM_CONTEXTS
    out = [0] * count
    for j in range(count):
        if not dec.decode_bin(ctx, 0):
            continue
        negative = dec.decode_bypass()
        m = 0
        while m < UNARY_BINS and dec.decode_bin(ctx, 1 + m):
            m += 1
        if m == UNARY_BINS:
            m += dec.decode_eg0()
        mag = m + 1
        if mag >= LEVEL_LIMIT:
            raise DecodeError("decoded level exceeds 2**31")
        out[j] = -mag if negative else mag
    return out


def encode_level_arrays(arrays) -> bytes:
    """Code a sequence of integer arrays, one context set per array."""
    enc = RangeEncoder()
    for arr in arrays:
        _encode_tensor(enc, np.asarray(arr, dtype=np.int64).ravel().tolist())
    return enc.finish()


def decode_level_arrays(data: bytes, sizes) -> list:
    """Inverse of :func:`encode_level_arrays`; ``data`` must be consumed exactly."""
    dec = RangeDecoder(bytes(data))
    out = [np.array(_decode_tensor(dec, n), dtype=np.int64) for n in sizes]
    if dec.pos != len(dec.data):
        raise TrailingData(f"{len(dec.data) - dec.pos} unread bytes after the last level")
    return out


def encode_levels(qm: QuantizedModel) -> bytes:
    return encode_level_arrays(qm.levels)


def decode_levels(data: bytes, config: nn.NetworkConfig, step_exponent: int) -> QuantizedModel:
    _check_exponent(step_exponent)
    shapes = tensor_shapes(config)
    flat = decode_level_arrays(data, [int(np.prod(s)) for s in shapes])
    return QuantizedModel(config, step_exponent, [a.reshape(s) for a, s in zip(flat, shapes)])
