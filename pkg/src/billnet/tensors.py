"""Dense and bit-packed tensor containers shared by both execution paths.

Dense activations are plain float64 ndarrays of shape (N, T, H, W, C) with
the channel axis fastest ("Tensor5").  Binary signals are packed into uint64
words along the channel axis, LSB first, so the channel vector of one pixel
stays contiguous and pointwise convolutions reduce to AND + popcount over a
handful of words.  Padding bits are forced to zero on construction, which
keeps every popcount exact without masking.

Ternary signals {-1, 0, +1} are stored as two disjoint binary planes
(plus, minus); integer accumulators are plain int64 ndarrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation, NonBinaryInput, ShapeMismatch

WORD_BITS = 64

# Integer accumulators carried by the logic path: plain signed arrays, wide
# enough that the largest dot product in a default model cannot overflow.
IntTensor = np.ndarray


def require_tensor5(x: np.ndarray) -> np.ndarray:
    """Validate the (N, T, H, W, C) dense layout and return ``x``."""
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeMismatch(f"expected 5 axes (N,T,H,W,C), got shape {x.shape}")
    if any(d < 1 for d in x.shape):
        raise ShapeMismatch(f"all dims must be >= 1, got {x.shape}")
    return x


def words_per_channel(c: int) -> int:
    return (c + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True)
class BitTensor:
    """Bit-packed binary tensor: one bit per element, channel-major lanes.

    ``words`` has shape (N, T, H, W, words_per_channel(C)); bit i of word j
    holds channel j*64 + i.  Bits beyond C are always zero.
    """

    shape: tuple[int, int, int, int, int]
    words: np.ndarray

    def __post_init__(self):
        n, t, h, w, c = self.shape
        expect = (n, t, h, w, words_per_channel(c))
        if self.words.shape != expect or self.words.dtype != np.uint64:
            raise ShapeMismatch(
                f"words shape {self.words.shape}/{self.words.dtype} does not "
                f"match element shape {self.shape}"
            )

    @property
    def channels(self) -> int:
        return self.shape[4]

    def popcount(self) -> int:
        return int(np.bitwise_count(self.words).sum())


def channel_padding_mask(c: int) -> np.ndarray:
    """uint64 mask vector with ones in the valid bit positions per word."""
    nw = words_per_channel(c)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = c % WORD_BITS
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def pack(x: np.ndarray) -> BitTensor:
    """Pack a binary (N,T,H,W,C) tensor into channel-major uint64 words.

    Raises NonBinaryInput unless every element is exactly 0 or 1.
    """
    x = require_tensor5(x)
    bits = np.asarray(x)
    if bits.dtype != np.bool_:
        if not np.isin(bits, (0, 1)).all():
            raise NonBinaryInput("pack() requires all elements in {0, 1}")
        bits = bits.astype(bool)
    n, t, h, w, c = bits.shape
    nw = words_per_channel(c)
    padded = np.zeros((n, t, h, w, nw * WORD_BITS), dtype=np.uint64)
    padded[..., :c] = bits
    lanes = padded.reshape(n, t, h, w, nw, WORD_BITS)
    shifts = np.arange(WORD_BITS, dtype=np.uint64)
    words = (lanes << shifts).sum(axis=-1, dtype=np.uint64)
    return BitTensor((n, t, h, w, c), words)


def unpack(bt: BitTensor) -> np.ndarray:
    """Inverse of pack(): returns a float64 tensor of 0.0/1.0 values."""
    n, t, h, w, c = bt.shape
    shifts = np.arange(WORD_BITS, dtype=np.uint64)
    lanes = (bt.words[..., None] >> shifts) & np.uint64(1)
    flat = lanes.reshape(n, t, h, w, -1)
    return flat[..., :c].astype(np.float64)


def pack_vector(bits: np.ndarray) -> np.ndarray:
    """Pack a 1-D {0,1} array into uint64 words (helper for weight lanes)."""
    bits = np.asarray(bits)
    if not np.isin(bits, (0, 1)).all():
        raise NonBinaryInput("pack_vector() requires elements in {0, 1}")
    c = bits.shape[-1]
    nw = words_per_channel(c)
    padded = np.zeros(bits.shape[:-1] + (nw * WORD_BITS,), dtype=np.uint64)
    padded[..., :c] = bits
    lanes = padded.reshape(bits.shape[:-1] + (nw, WORD_BITS))
    shifts = np.arange(WORD_BITS, dtype=np.uint64)
    return (lanes << shifts).sum(axis=-1, dtype=np.uint64)


def _check_same_shape(a: BitTensor, b: BitTensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")


def popcount_and(a: BitTensor, b: BitTensor) -> int:
    """Number of positions where both tensors hold a 1."""
    _check_same_shape(a, b)
    return int(np.bitwise_count(a.words & b.words).sum())


def binary_dot_bipolar_weights(a: BitTensor, w_bits: BitTensor) -> int:
    """Dot product of {0,1} activations with {-1,+1} weights.

    Weights are encoded as a bit plane (bit 1 means +1, bit 0 means -1);
    the product is 2*popcount(a AND w) - popcount(a), an exact integer.
    """
    _check_same_shape(a, w_bits)
    return 2 * popcount_and(a, w_bits) - a.popcount()


@dataclass(frozen=True)
class TernTensor:
    """Two-plane ternary tensor: value = plus - minus, planes disjoint."""

    plus: BitTensor
    minus: BitTensor

    def __post_init__(self):
        _check_same_shape(self.plus, self.minus)
        if np.any(self.plus.words & self.minus.words):
            raise InvariantViolation("ternary planes overlap (+1 and -1 at one index)")

    @property
    def shape(self):
        return self.plus.shape


def pack_ternary(x: np.ndarray) -> TernTensor:
    """Pack a {-1, 0, +1} (N,T,H,W,C) tensor into two disjoint bit planes."""
    x = require_tensor5(x)
    if not np.isin(x, (-1, 0, 1)).all():
        raise NonBinaryInput("pack_ternary() requires elements in {-1, 0, 1}")
    return TernTensor(pack((x == 1).astype(np.float64)), pack((x == -1).astype(np.float64)))


def unpack_ternary(t: TernTensor) -> np.ndarray:
    return unpack(t.plus) - unpack(t.minus)


def ternary_dot_bipolar_weights(h: TernTensor, w_bits: BitTensor) -> int:
    """Dot product of {-1,0,+1} activations with {-1,+1} weights.

    Decomposes into the plus and minus planes:
    [2*pc(plus AND w) - pc(plus)] - [2*pc(minus AND w) - pc(minus)].
    """
    return binary_dot_bipolar_weights(h.plus, w_bits) - binary_dot_bipolar_weights(
        h.minus, w_bits
    )


def conv_same_pads(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(out_size, pad_before, pad_after) for zero "same" padding.

    out = ceil(size / stride); total padding is spread with the smaller
    half in front, matching the usual same-padding convention.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return out, before, total - before


def conv_output_shape(shape, kernel, strides) -> tuple[int, ...]:
    """Spatial/temporal output dims of a same-padded strided convolution."""
    return tuple(conv_same_pads(s, k, st)[0] for s, k, st in zip(shape, kernel, strides))


def pool_output_shape(shape, window, strides) -> tuple[int, ...]:
    """Floor-mode pooling output dims (remainder cropped)."""
    return tuple((s - w) // st + 1 for s, w, st in zip(shape, window, strides))
