"""Element-wise quantizers, their surrogate gradients, and norm folding.

All forward functions accept scalars or ndarrays and are pure.  The
surrogate-gradient functions return the closed forms used by the training
tape; they are exposed here so tests can pin them on a grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonBinaryInput, ZeroScale


def heaviside(x):
    """1 where x > 0, else 0 (strict at the boundary)."""
    return (np.asarray(x, dtype=np.float64) > 0).astype(np.float64)


def heaviside_ste_grad(x):
    """Surrogate gradient of heaviside: 1 where |x| <= 1, else 0."""
    return (np.abs(np.asarray(x, dtype=np.float64)) <= 1).astype(np.float64)


def clip(y):
    """Clipped identity: saturate to [-1, 1]."""
    return np.clip(np.asarray(y, dtype=np.float64), -1.0, 1.0)


def clip_ste_grad(y):
    """Surrogate gradient of the clipped identity: identically 1."""
    return np.ones_like(np.asarray(y, dtype=np.float64))


def or_gate(x1, x2):
    """Logical OR on {0,1} signals; equals clip(x1 + x2) bit for bit."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if not (np.isin(x1, (0, 1)).all() and np.isin(x2, (0, 1)).all()):
        raise NonBinaryInput("or_gate() requires binary inputs")
    return np.logical_or(x1, x2).astype(np.float64)


def sign_strict(x):
    """+1 where x > 0, else -1.  sign_strict(0) = -1 so that
    sign_strict(x) == 2*heaviside(x) - 1 everywhere."""
    return np.where(np.asarray(x, dtype=np.float64) > 0, 1.0, -1.0)


def sign_ste_grad(x):
    """Surrogate gradient shared by sign-like quantizers: 1 where |x| <= 1."""
    return heaviside_ste_grad(x)


def ssign_scale(n_i: int, n_o: int) -> float:
    return 3.0 / np.sqrt(n_i + n_o)


def ssign(w, n_i: int, n_o: int):
    """Scaled sign binarization for recurrent kernels: +-3/sqrt(n_i+n_o).

    The fixed positive scale keeps pre-activation magnitudes in the range
    where sigmoid/tanh behave like their later hard replacements; it never
    changes the sign of anything downstream, so inference can drop it.
    """
    return ssign_scale(n_i, n_o) * sign_strict(w)


def stern_scale(m: int) -> float:
    return 1.0 / np.sqrt(4 * m)


def tern_threshold(w) -> float:
    """Ternarization threshold: 0.7 times the mean absolute weight."""
    return 0.7 * float(np.mean(np.abs(w)))


def tern(w):
    """{-1, 0, +1} ternarization: zero where |w| <= 0.7*mean|w|."""
    w = np.asarray(w, dtype=np.float64)
    delta = tern_threshold(w)
    return np.where(np.abs(w) > delta, sign_strict(w), 0.0)


def stern(w, m: int):
    """Scaled ternarization: returns (ternary values, scale 1/sqrt(4m))."""
    return tern(w), stern_scale(m)


# ---------------------------------------------------------------------------
# Thresholded global average pooling (parameter-free channel attention)
# ---------------------------------------------------------------------------


def tgap_select(x, quantized: bool, calibration: float | None = None):
    """Binary select signal per (batch, time, channel) from spatial content.

    Quantized form: 1 iff the spatial mean of the binary map exceeds 1/2,
    i.e. the one-count strictly exceeds half the spatial resolution.
    Float form: 1 iff the spatial average exceeds half of ``calibration``;
    when no calibration constant is supplied the maximum of this layer's
    average-pool output is used (recomputed per forward pass).
    """
    x = np.asarray(x, dtype=np.float64)
    ap = x.mean(axis=(2, 3), keepdims=True)
    if quantized:
        m = 1.0
    elif calibration is not None:
        m = float(calibration)
    else:
        m = float(ap.max()) if ap.size else 0.0
    return (ap > 0.5 * m).astype(np.float64)


def tgap_count_threshold(h: int, w: int) -> int:
    """Integer threshold for the bitcount form: strictly more ones than this."""
    return (h * w) // 2


# ---------------------------------------------------------------------------
# Batch normalization folding
# ---------------------------------------------------------------------------


@dataclass
class BNParams:
    """Per-channel batch-norm statistics and affine parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if np.any(self.var < 0) or self.eps <= 0:
            raise ValueError("variance must be >= 0 and eps > 0")

    @property
    def scale(self) -> np.ndarray:
        """Folded multiplier gamma / sqrt(var + eps)."""
        return self.gamma / np.sqrt(self.var + self.eps)

    @property
    def offset(self) -> np.ndarray:
        """Folded offset beta - gamma*mean / sqrt(var + eps)."""
        return self.beta - self.gamma * self.mean / np.sqrt(self.var + self.eps)


def bn_forward(x, p: BNParams):
    """Inference-time affine: scale * x + offset, per channel."""
    return p.scale * np.asarray(x, dtype=np.float64) + p.offset


@dataclass
class ShiftNorm:
    """Offset-free power-of-two normalization: y = 2**shift * x."""

    shift: np.ndarray

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.int64)

    @property
    def scale(self) -> np.ndarray:
        return np.ldexp(1.0, self.shift.astype(np.int64))


def bsn_fold(p: BNParams) -> ShiftNorm:
    """Fold batch-norm statistics into a power-of-two shift.

    shift = round(log2|scale|) with ties to even; the offset is discarded.
    Because the result is a positive per-channel scale, a following strict
    sign/step activation is unaffected, so the folded norm never has to be
    executed in the logic path.
    """
    g = p.scale
    if np.any(g == 0):
        raise ZeroScale("cannot fold a zero-scale channel into a shift")
    return ShiftNorm(np.rint(np.log2(np.abs(g))).astype(np.int64))


def bsn_forward(x, s: ShiftNorm):
    return s.scale * np.asarray(x, dtype=np.float64)
