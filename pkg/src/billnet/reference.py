"""Arithmetic reference path: dense-tensor forward for every training stage.

Everything here operates on (N, T, H, W, C) float64 arrays.  The model-level
``forward`` evaluates a built graph at its current stage using frozen
statistics (moving batch-norm stats, folded shifts), records the binary and
ternary intermediates the logic path must reproduce, and returns per-step
logits plus aggregated class scores.

Inputs are 8-bit fixed point (gray levels scaled by 1/255).  In the
offset-free stages every threshold sits exactly at zero, so pre-activations
that feed a step function are accumulated over integer-valued operands;
float64 keeps such sums exact and the two execution paths agree bit for bit
rather than merely within tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import BadConfig, BadGrouping, NonBinarySelect, ShapeMismatch
from .quantize import (
    BNParams,
    ShiftNorm,
    bn_forward,
    bsn_forward,
    clip,
    heaviside,
    sign_strict,
    ssign_scale,
    stern,
    tgap_select,
)
from .tensors import conv_same_pads


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 3-D convolution (cross-correlation, zero padding)."""

    kernel: tuple[int, int, int]
    strides: tuple[int, int, int]
    groups: int
    in_channels: int
    out_channels: int
    padding: str = "same"

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise BadGrouping(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible "
                f"by {self.groups} groups"
            )
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise BadConfig(f"'same' padding requires odd kernel dims, got {self.kernel}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        kt, kh, kw = self.kernel
        return (kt, kh, kw, self.in_channels // self.groups, self.out_channels)


def _patches(x: np.ndarray, kernel, strides):
    """Strided (N,To,Ho,Wo,kt,kh,kw,C) view over a same-padded input."""
    n, t, h, w, c = x.shape
    dims, before = [], []
    for size, k, s in zip((t, h, w), kernel, strides):
        out, pb, pa = conv_same_pads(size, k, s)
        dims.append(out)
        before.append((pb, pa))
    xp = np.pad(x, ((0, 0), before[0], before[1], before[2], (0, 0)))
    sn, st, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(n, dims[0], dims[1], dims[2], kernel[0], kernel[1], kernel[2], c),
        strides=(sn, st * strides[0], sh * strides[1], sw * strides[2], st, sh, sw, sc),
        writeable=False,
    )
    return view, tuple(dims)


def conv3d(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Grouped 3-D cross-correlation with zero "same" padding."""
    if x.ndim != 5 or x.shape[4] != spec.in_channels:
        raise ShapeMismatch(f"input {x.shape} incompatible with {spec}")
    if w.shape != spec.weight_shape:
        raise ShapeMismatch(f"weights {w.shape}, expected {spec.weight_shape}")
    view, dims = _patches(x, spec.kernel, spec.strides)
    n = x.shape[0]
    g = spec.groups
    cig = spec.in_channels // g
    cog = spec.out_channels // g
    kt, kh, kw = spec.kernel
    out = np.empty((n, *dims, spec.out_channels))
    for gi in range(g):
        cols = view[..., gi * cig : (gi + 1) * cig].reshape(-1, kt * kh * kw * cig)
        wg = w[..., gi * cog : (gi + 1) * cog].reshape(-1, cog)
        out[..., gi * cog : (gi + 1) * cog] = (cols @ wg).reshape(n, *dims, cog)
    return out


def maxpool3d(x: np.ndarray, window=(1, 2, 2), strides=None) -> np.ndarray:
    """Max pooling over (T,H,W) windows, floor mode (remainder cropped)."""
    if x.ndim != 5:
        raise ShapeMismatch(f"expected 5 axes, got {x.shape}")
    strides = strides or window
    n, t, h, w, c = x.shape
    dims = [(s - k) // st + 1 for s, k, st in zip((t, h, w), window, strides)]
    if any(d < 1 for d in dims):
        raise ShapeMismatch(f"window {window} larger than input {x.shape}")
    sn, st_, sh, sw, sc = x.strides
    view = as_strided(
        x,
        shape=(n, dims[0], dims[1], dims[2], window[0], window[1], window[2], c),
        strides=(sn, st_ * strides[0], sh * strides[1], sw * strides[2], st_, sh, sw, sc),
        writeable=False,
    )
    return view.max(axis=(4, 5, 6))


def gap_spatial(x: np.ndarray) -> np.ndarray:
    """Spatial global average per (batch, time, channel): (N,T,1,1,C)."""
    if x.ndim != 5:
        raise ShapeMismatch(f"expected 5 axes, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def mux(i0: np.ndarray, i1: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Channel-wise two-way select: i1 where s==1, i0 where s==0."""
    if i0.shape != i1.shape:
        raise ShapeMismatch(f"branch shapes differ: {i0.shape} vs {i1.shape}")
    if s.shape != (i0.shape[0], i0.shape[1], 1, 1, i0.shape[4]):
        raise ShapeMismatch(f"select shape {s.shape} not (N,T,1,1,C) for {i0.shape}")
    if not np.isin(s, (0, 1)).all():
        raise NonBinarySelect("mux select must be binary")
    return i1 * s + i0 * (1.0 - s)


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


@dataclass
class LSTMWeights:
    """Four gate kernels of shape (n_i + n_o, n_o); biases only in float mode."""

    wi: np.ndarray
    wf: np.ndarray
    wo: np.ndarray
    wc: np.ndarray
    bi: np.ndarray | None = None
    bf: np.ndarray | None = None
    bo: np.ndarray | None = None
    bc: np.ndarray | None = None

    @property
    def n_i(self) -> int:
        return self.wi.shape[0] - self.wi.shape[1]

    @property
    def n_o(self) -> int:
        return self.wi.shape[1]

    def kernels(self):
        return (self.wi, self.wf, self.wo, self.wc)

    def biases(self):
        return (self.bi, self.bf, self.bo, self.bc)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_cell(
    x_t: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
    weights: LSTMWeights,
    mode: str,
    input_denominator: int | None = None,
):
    """One recurrent step; returns (h_t, c_t).

    mode 'float':  sigmoid gates, tanh candidate and output squash, biases.
    mode 'wq':     kernels binarized to +-3/sqrt(n_i+n_o), no biases,
                   activations unchanged.
    mode 'fq':     step gates, strict-sign candidate, cell state saturated
                   to {-1,0,+1}, output squash removed (h = o * c).

    In 'fq' mode with ``input_denominator`` d, inputs are taken to lie on
    the grid k/d; pre-activations are then accumulated as exact integers so
    the strict zero thresholds match the logic path bit for bit.
    """
    if x_t.shape[1] + h_prev.shape[1] != weights.wi.shape[0]:
        raise ShapeMismatch(
            f"x {x_t.shape} + h {h_prev.shape} does not match kernel {weights.wi.shape}"
        )
    if mode == "float":
        zx = np.concatenate([x_t, h_prev], axis=1)
        pre = [zx @ w + (b if b is not None else 0.0) for w, b in zip(weights.kernels(), weights.biases())]
        i, f, o = _sigmoid(pre[0]), _sigmoid(pre[1]), _sigmoid(pre[2])
        c_new = f * c_prev + i * np.tanh(pre[3])
        return o * np.tanh(c_new), c_new
    scale = ssign_scale(weights.n_i, weights.n_o)
    if mode == "wq":
        zx = np.concatenate([x_t, h_prev], axis=1)
        pre = [zx @ (scale * sign_strict(w)) for w in weights.kernels()]
        i, f, o = _sigmoid(pre[0]), _sigmoid(pre[1]), _sigmoid(pre[2])
        c_new = f * c_prev + i * np.tanh(pre[3])
        return o * np.tanh(c_new), c_new
    if mode != "fq":
        raise ValueError(f"unknown lstm mode {mode!r}")
    n_i = weights.n_i
    if input_denominator:
        d = input_denominator
        counts = np.rint(x_t * d)
        pre = [
            counts @ sign_strict(w[:n_i]) + d * (h_prev @ sign_strict(w[n_i:]))
            for w in weights.kernels()
        ]
    else:
        zx = np.concatenate([x_t, h_prev], axis=1)
        pre = [zx @ sign_strict(w) for w in weights.kernels()]
    # The positive factor scale/d cannot move a strict zero threshold, so the
    # gates are taken on the integer form directly.
    i, f, o = heaviside(pre[0]), heaviside(pre[1]), heaviside(pre[2])
    ctilde = sign_strict(pre[3])
    c_new = clip(f * c_prev + i * ctilde)
    return o * c_new, c_new


def lstm_mode(stage: int) -> str:
    return "float" if stage <= 1 else ("wq" if stage <= 4 else "fq")


# ---------------------------------------------------------------------------
# Classifier head
# ---------------------------------------------------------------------------


def dense_head(h_seq: np.ndarray, w: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Per-step logits: (N, T', n) @ (n, classes), scaled."""
    if h_seq.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"h_seq {h_seq.shape} vs dense kernel {w.shape}")
    return scale * (h_seq @ w)


def aggregate_logits(logits: np.ndarray) -> np.ndarray:
    """Class scores: mean of per-step logits over the time axis."""
    return logits.mean(axis=1)


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax with ties broken toward the lowest class index."""
    return np.argmax(scores, axis=-1)


# ---------------------------------------------------------------------------
# Stage-aware model forward
# ---------------------------------------------------------------------------


def conv_weight(w: np.ndarray, stage: int) -> np.ndarray:
    """Latent conv weights as used at a given stage (binary from stage 2)."""
    return w if stage <= 1 else sign_strict(w)


def apply_norm(x, norm):
    if isinstance(norm, BNParams):
        return bn_forward(x, norm)
    if isinstance(norm, ShiftNorm):
        return bsn_forward(x, norm)
    raise TypeError(f"unknown norm {type(norm)!r}")


def apply_act(x, stage: int):
    return relu(x) if stage <= 2 else heaviside(x)


@dataclass
class ForwardResult:
    logits: np.ndarray  # (N, T', classes) per-step responses
    scores: np.ndarray  # (N, classes) temporal mean
    pred: np.ndarray  # (N,) argmax class
    intermediates: dict[str, np.ndarray]


def _cf_apply(x, layer, stage):
    """Pointwise -> grouped -> pointwise, no nonlinearity in between."""
    z = conv3d(x, conv_weight(layer.pw1_w, stage), layer.pw1_spec)
    z = conv3d(z, conv_weight(layer.gconv_w, stage), layer.gconv_spec)
    return conv3d(z, conv_weight(layer.pw2_w, stage), layer.pw2_spec)


def _tgap_args(model, name: str, stage: int):
    quantized = stage >= 3
    calib = None
    if not quantized and model.tgap_calibration is not None:
        calib = model.tgap_calibration.get(name)
    return quantized, calib


def snap_to_grid(x: np.ndarray, levels: int = 255) -> np.ndarray:
    """Snap input values onto the 8-bit fixed-point grid k/levels."""
    return np.rint(np.asarray(x, dtype=np.float64) * levels) / levels


def forward(model, x: np.ndarray, record: bool = False) -> ForwardResult:
    """Evaluate the graph at ``model.stage`` on a (N,T,H,W,C) input."""
    stage = model.stage
    inter: dict[str, np.ndarray] = {}
    x = snap_to_grid(x)
    gap_den = 0

    def put(key, value):
        if record:
            inter[key] = value

    for layer in model.layers:
        kind = layer.kind
        if kind == "stem":
            wq = conv_weight(layer.w, stage)
            if stage >= 4:
                # Offset-free norm ahead: accumulate the 8-bit grid exactly.
                z = conv3d(np.rint(x * 255.0), wq, layer.spec) / 255.0
            else:
                z = conv3d(x, wq, layer.spec)
            x = apply_act(apply_norm(z, layer.norm), stage)
            put(f"{layer.name}.out", x)
        elif kind == "cf":
            z = _cf_apply(x, layer, stage)
            x = apply_act(apply_norm(z, layer.norm), stage)
            put(f"{layer.name}.out", x)
        elif kind == "mor":
            if layer.skip_w is not None:
                skip = apply_act(conv3d(x, conv_weight(layer.skip_w, stage), layer.skip_spec), stage)
            else:
                skip = x
            quantized, calib = _tgap_args(model, layer.name, stage)
            sel = tgap_select(skip, quantized=quantized, calibration=calib)
            v = apply_act(apply_norm(_cf_apply(x, layer, stage), layer.norm1), stage)
            i0 = clip(v + skip)
            i1 = apply_act(apply_norm(i0, layer.norm2), stage)
            x = mux(i0, i1, sel)
            put(f"{layer.name}.skip", skip)
            put(f"{layer.name}.v", v)
            put(f"{layer.name}.i0", i0)
            put(f"{layer.name}.i1", i1)
            put(f"{layer.name}.sel", sel)
            put(f"{layer.name}.out", x)
        elif kind == "mp":
            x = maxpool3d(x, layer.window, layer.strides)
            put(f"{layer.name}.out", x)
        elif kind == "gap":
            gap_den = x.shape[2] * x.shape[3]
            x = gap_spatial(x).reshape(x.shape[0], x.shape[1], x.shape[4])
            if stage >= 5:
                put(f"{layer.name}.counts", np.rint(x * gap_den).astype(np.int64))
        elif kind == "lstm":
            mode = lstm_mode(stage)
            n, t_steps, _ = x.shape
            h = np.zeros((n, layer.weights.n_o))
            c = np.zeros((n, layer.weights.n_o))
            hs = []
            for t in range(t_steps):
                h, c = lstm_cell(
                    x[:, t, :], h, c, layer.weights, mode,
                    input_denominator=gap_den if mode == "fq" else None,
                )
                hs.append(h)
            x = np.stack(hs, axis=1)  # (N, T', n_o)
            if stage >= 5:
                put(f"{layer.name}.h", x.astype(np.int8))
                # c of the final step is enough to pin closure; full h carries
                # the information the classifier consumes.
            put(f"{layer.name}.out", x)
        elif kind == "dense":
            if stage <= 1:
                logits = dense_head(x, layer.w)
                scores = aggregate_logits(logits)
            else:
                t_vals, scale = stern(layer.w, layer.m)
                raw = x @ t_vals  # exact integers from stage 5 on
                logits = scale * raw
                scores = scale * aggregate_logits(raw)
                if stage >= 5:
                    put(f"{layer.name}.intlogits", np.rint(raw).astype(np.int64))
            put(f"{layer.name}.logits", logits)
        else:
            raise TypeError(f"unknown layer kind {kind!r}")
    pred = predict(scores)
    put("pred", pred)
    return ForwardResult(logits=logits, scores=scores, pred=pred, intermediates=inter)
