"""Minimal reverse-mode differentiation on float64 arrays.

A ``Tape`` records one closure per primal op in execution order; ``backward``
replays them in exact reverse order, accumulating gradients additively into
each ``Var``.  Smooth ops carry their analytic adjoints; the quantizers carry
the surrogate (straight-through) gradients declared in ``quantize``:

    step(x)            backward  g * 1_{|x| <= 1}
    clip(x)            backward  g            (identity)
    sign(x), scaled    backward  scale * g * 1_{|x| <= 1}
    ternarize, scaled  backward  scale * g * 1_{|x| <= 1}

Latent (real) parameters therefore receive gradients straight through their
quantized images.
"""

from __future__ import annotations

import numpy as np

from .errors import DisconnectedGraph
from .quantize import (
    clip as q_clip,
    heaviside as q_heaviside,
    heaviside_ste_grad,
    sign_strict,
    tern,
)
from .reference import ConvSpec, conv3d, _patches
from .tensors import conv_same_pads


class Var:
    """Array node; ``trainable`` marks optimizer targets."""

    __slots__ = ("value", "grad", "trainable", "name")

    def __init__(self, value, trainable=False, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self._backward = []  # closures, execution order
        self.params: list[Var] = []
        self._touched: set[int] = set()

    def watch(self, var: Var) -> Var:
        if var.trainable and all(var is not p for p in self.params):
            self.params.append(var)
        return var

    def record(self, backward, *inputs: Var):
        for v in inputs:
            self._touched.add(id(v))
        self._backward.append(backward)

    def _acc(self, var: Var, g: np.ndarray):
        g = _unbroadcast(g, var.value.shape)
        if var.grad is None:
            # always own the buffer: upstream grads are shared between fan-ins
            var.grad = np.array(g)
        else:
            var.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum out broadcast axes so the gradient matches the operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Var):
    """Seed the scalar loss and sweep the tape in reverse.

    Raises DisconnectedGraph when a registered trainable never took part in
    the recorded forward pass.
    """
    if loss.value.size != 1:
        raise ValueError("loss must be scalar")
    for p in tape.params:
        if id(p) not in tape._touched:
            raise DisconnectedGraph(f"trainable {p.name or '<unnamed>'} unreachable from loss")
    loss.grad = np.ones_like(loss.value)
    for bwd in reversed(tape._backward):
        bwd()


# ---------------------------------------------------------------------------
# Smooth primitives
# ---------------------------------------------------------------------------


def add(tape: Tape, a: Var, b: Var) -> Var:
    out = Var(a.value + b.value)

    def bwd():
        if out.grad is None:
            return
        tape._acc(a, out.grad)
        tape._acc(b, out.grad)

    tape.record(bwd, a, b)
    return out


def mul(tape: Tape, a: Var, b: Var) -> Var:
    out = Var(a.value * b.value)

    def bwd():
        if out.grad is None:
            return
        tape._acc(a, out.grad * b.value)
        tape._acc(b, out.grad * a.value)

    tape.record(bwd, a, b)
    return out


def scale_const(tape: Tape, a: Var, s) -> Var:
    out = Var(a.value * s)

    def bwd():
        if out.grad is not None:
            tape._acc(a, out.grad * s)

    tape.record(bwd, a)
    return out


def add_const(tape: Tape, a: Var, c) -> Var:
    out = Var(a.value + c)

    def bwd():
        if out.grad is not None:
            tape._acc(a, out.grad)

    tape.record(bwd, a)
    return out


def matmul(tape: Tape, a: Var, w: Var) -> Var:
    """(..., k) @ (k, m); weight is 2-D."""
    out = Var(a.value @ w.value)

    def bwd():
        if out.grad is None:
            return
        tape._acc(a, out.grad @ w.value.T)
        ga = a.value.reshape(-1, a.value.shape[-1])
        go = out.grad.reshape(-1, out.grad.shape[-1])
        tape._acc(w, ga.T @ go)

    tape.record(bwd, a, w)
    return out


def concat(tape: Tape, a: Var, b: Var, axis: int = -1) -> Var:
    out = Var(np.concatenate([a.value, b.value], axis=axis))
    na = a.value.shape[axis]

    def bwd():
        if out.grad is None:
            return
        ga, gb = np.split(out.grad, [na], axis=axis)
        tape._acc(a, ga)
        tape._acc(b, gb)

    tape.record(bwd, a, b)
    return out


def mean_axes(tape: Tape, a: Var, axes: tuple, keepdims: bool = False) -> Var:
    out = Var(a.value.mean(axis=axes, keepdims=keepdims))
    count = np.prod([a.value.shape[ax] for ax in axes])

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes)
        tape._acc(a, np.broadcast_to(g / count, a.value.shape))

    tape.record(bwd, a)
    return out


def sum_all(tape: Tape, a: Var) -> Var:
    out = Var(a.value.sum())

    def bwd():
        if out.grad is not None:
            tape._acc(a, np.broadcast_to(out.grad, a.value.shape))

    tape.record(bwd, a)
    return out


def relu(tape: Tape, a: Var) -> Var:
    out = Var(np.maximum(a.value, 0.0))
    mask = (a.value > 0).astype(np.float64)

    def bwd():
        if out.grad is not None:
            tape._acc(a, out.grad * mask)

    tape.record(bwd, a)
    return out


def sigmoid(tape: Tape, a: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-a.value))
    out = Var(s)

    def bwd():
        if out.grad is not None:
            tape._acc(a, out.grad * s * (1.0 - s))

    tape.record(bwd, a)
    return out


def tanh(tape: Tape, a: Var) -> Var:
    t = np.tanh(a.value)
    out = Var(t)

    def bwd():
        if out.grad is not None:
            tape._acc(a, out.grad * (1.0 - t * t))

    tape.record(bwd, a)
    return out


def select_time(tape: Tape, a: Var, t: int) -> Var:
    out = Var(a.value[:, t])

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(a.value)
        g[:, t] = out.grad
        tape._acc(a, g)

    tape.record(bwd, a)
    return out


def stack_time(tape: Tape, items: list[Var]) -> Var:
    out = Var(np.stack([v.value for v in items], axis=1))

    def bwd():
        if out.grad is None:
            return
        for t, v in enumerate(items):
            tape._acc(v, out.grad[:, t])

    tape.record(bwd, *items)
    return out


# ---------------------------------------------------------------------------
# Convolution / pooling
# ---------------------------------------------------------------------------


def conv3d_op(tape: Tape, x: Var, w: Var, spec: ConvSpec) -> Var:
    out = Var(conv3d(x.value, w.value, spec))
    kt, kh, kw = spec.kernel
    stt, sth, stw = spec.strides
    g = spec.groups
    cig = spec.in_channels // g
    cog = spec.out_channels // g

    def bwd():
        if out.grad is None:
            return
        gout = out.grad
        n, to, ho, wo, _ = gout.shape
        # weight gradient: columns of the forward view against the output grad
        view, _ = _patches(x.value, spec.kernel, spec.strides)
        gw = np.empty_like(w.value)
        for gi in range(g):
            cols = view[..., gi * cig : (gi + 1) * cig].reshape(-1, kt * kh * kw * cig)
            go = gout[..., gi * cog : (gi + 1) * cog].reshape(-1, cog)
            gw[..., gi * cog : (gi + 1) * cog] = (cols.T @ go).reshape(kt, kh, kw, cig, cog)
        tape._acc(w, gw)
        # input gradient: scatter each kernel offset back onto the padded input
        pads = [conv_same_pads(s, k, st) for s, k, st in
                zip(x.value.shape[1:4], spec.kernel, spec.strides)]
        tpad = x.value.shape[1] + pads[0][1] + pads[0][2]
        hpad = x.value.shape[2] + pads[1][1] + pads[1][2]
        wpad = x.value.shape[3] + pads[2][1] + pads[2][2]
        gxp = np.zeros((n, tpad, hpad, wpad, spec.in_channels))
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    for gi in range(g):
                        wk = w.value[dt, dh, dw, :, gi * cog : (gi + 1) * cog]
                        gxp[
                            :,
                            dt : dt + to * stt : stt,
                            dh : dh + ho * sth : sth,
                            dw : dw + wo * stw : stw,
                            gi * cig : (gi + 1) * cig,
                        ] += gout[..., gi * cog : (gi + 1) * cog] @ wk.T
        tape._acc(
            x,
            gxp[
                :,
                pads[0][1] : pads[0][1] + x.value.shape[1],
                pads[1][1] : pads[1][1] + x.value.shape[2],
                pads[2][1] : pads[2][1] + x.value.shape[3],
            ],
        )

    tape.record(bwd, x, w)
    return out


def maxpool3d_op(tape: Tape, x: Var, window=(1, 2, 2)) -> Var:
    """Non-overlapping max pooling (strides == window), floor mode."""
    wt, wh, ww = window
    n, t, h, w_, c = x.value.shape
    to, ho, wo = t // wt, h // wh, w_ // ww
    crop = x.value[:, : to * wt, : ho * wh, : wo * ww, :]
    blocks = crop.reshape(n, to, wt, ho, wh, wo, ww, c)
    out_val = blocks.max(axis=(2, 4, 6))
    out = Var(out_val)
    mask = blocks == out_val[:, :, None, :, None, :, None, :]

    def bwd():
        if out.grad is None:
            return
        gx = np.zeros_like(x.value)
        gb = mask * out.grad[:, :, None, :, None, :, None, :]
        gx[:, : to * wt, : ho * wh, : wo * ww, :] = gb.reshape(n, to * wt, ho * wh, wo * ww, c)
        tape._acc(x, gx)

    tape.record(bwd, x)
    return out


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def batchnorm_train(tape: Tape, x: Var, gamma: Var, beta: Var, p, momentum: float = 0.1) -> Var:
    """Batch-statistics normalization over all but the channel axis.

    Side effect: moving statistics in ``p`` are advanced by ``momentum``
    toward the batch statistics (used later for eval and shift folding).
    """
    axes = tuple(range(x.value.ndim - 1))
    mu = x.value.mean(axis=axes)
    var = x.value.var(axis=axes)
    ivar = 1.0 / np.sqrt(var + p.eps)
    xhat = (x.value - mu) * ivar
    out = Var(gamma.value * xhat + beta.value)
    p.mean = (1.0 - momentum) * p.mean + momentum * mu
    p.var = (1.0 - momentum) * p.var + momentum * var
    m = x.value.size // x.value.shape[-1]

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        tape._acc(gamma, (g * xhat).sum(axis=axes))
        tape._acc(beta, g.sum(axis=axes))
        gxhat = g * gamma.value
        gvar = (gxhat * (x.value - mu)).sum(axis=axes) * (-0.5) * ivar**3
        gmu = -(gxhat.sum(axis=axes)) * ivar + gvar * (-2.0 / m) * (x.value - mu).sum(axis=axes)
        gx = gxhat * ivar + gvar * 2.0 * (x.value - mu) / m + gmu / m
        tape._acc(x, gx)

    tape.record(bwd, x, gamma, beta)
    return out


def channel_affine(tape: Tape, x: Var, scale: np.ndarray, offset=0.0) -> Var:
    """Fixed per-channel affine (eval-form norm or power-of-two shift)."""
    out = Var(x.value * scale + offset)

    def bwd():
        if out.grad is not None:
            tape._acc(x, out.grad * scale)

    tape.record(bwd, x)
    return out


# ---------------------------------------------------------------------------
# Quantizer nodes (surrogate gradients)
# ---------------------------------------------------------------------------


def heaviside_ste(tape: Tape, x: Var) -> Var:
    out = Var(q_heaviside(x.value))
    window = heaviside_ste_grad(x.value)

    def bwd():
        if out.grad is not None:
            tape._acc(x, out.grad * window)

    tape.record(bwd, x)
    return out


def clip_ste(tape: Tape, x: Var) -> Var:
    out = Var(q_clip(x.value))

    def bwd():
        if out.grad is not None:
            tape._acc(x, out.grad)

    tape.record(bwd, x)
    return out


def sign_ste(tape: Tape, x: Var, scale: float = 1.0) -> Var:
    out = Var(scale * sign_strict(x.value))
    window = heaviside_ste_grad(x.value)

    def bwd():
        if out.grad is not None:
            tape._acc(x, out.grad * (scale * window))

    tape.record(bwd, x)
    return out


def tern_ste(tape: Tape, x: Var, scale: float) -> Var:
    """Scaled ternarization; the data-dependent threshold is not differentiated."""
    out = Var(scale * tern(x.value))
    window = heaviside_ste_grad(x.value)

    def bwd():
        if out.grad is not None:
            tape._acc(x, out.grad * (scale * window))

    tape.record(bwd, x)
    return out


def mux_select(tape: Tape, i0: Var, i1: Var, sel: np.ndarray) -> Var:
    """Two-way channel select with a constant (non-differentiated) control."""
    out = Var(i1.value * sel + i0.value * (1.0 - sel))

    def bwd():
        if out.grad is None:
            return
        tape._acc(i1, out.grad * sel)
        tape._acc(i0, out.grad * (1.0 - sel))

    tape.record(bwd, i0, i1)
    return out


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax_cce(tape: Tape, logits: Var, labels: np.ndarray) -> Var:
    """Mean categorical cross-entropy over the batch; fused softmax adjoint."""
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = logits.value.shape[0]
    nll = -np.log(np.maximum(probs[np.arange(n), labels], 1e-300))
    out = Var(nll.mean())

    def bwd():
        if out.grad is None:
            return
        g = probs.copy()
        g[np.arange(n), labels] -= 1.0
        tape._acc(logits, out.grad * g / n)

    tape.record(bwd, logits)
    return out
