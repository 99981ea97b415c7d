"""Logic-path executor for fully quantized models.

``compile`` lowers a stage-5 graph into a flat plan of gate operations whose
only primitives are bitwise AND/OR/NOT, popcounts, integer comparisons and
small-integer adds; there is not a single real-valued constant in the plan.
Power-of-two norms vanish entirely (a positive scale cannot move a strict
zero threshold), and so do the fixed quantizer scales.  ``execute`` runs a
plan on 8-bit inputs presented as bit planes and reproduces, bit for bit,
every binary/ternary intermediate of the arithmetic reference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotFullyQuantized, ShapeMismatch, SlotTypeMismatch
from .quantize import stern, tgap_count_threshold
from .reference import _patches
from .tensors import (
    BitTensor,
    TernTensor,
    pack,
    pack_vector,
    unpack,
    words_per_channel,
)

# ---------------------------------------------------------------------------
# Plan structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlotSpec:
    name: str
    dtype: str  # 'bits' | 'tern' | 'int'


@dataclass(frozen=True)
class GateOp:
    kind: str
    name: str
    inputs: tuple[int, ...]
    output: int
    params: dict


@dataclass
class GatePlan:
    """Topologically ordered gate program over typed tensor slots."""

    slots: list[SlotSpec] = field(default_factory=list)
    ops: list[GateOp] = field(default_factory=list)
    outputs: dict[str, int] = field(default_factory=dict)  # intermediate name -> slot
    meta: dict = field(default_factory=dict)

    def add_slot(self, name: str, dtype: str) -> int:
        self.slots.append(SlotSpec(name, dtype))
        return len(self.slots) - 1

    def emit(self, kind: str, name: str, inputs: tuple[int, ...], out_dtype: str, **params) -> int:
        out = self.add_slot(name, out_dtype)
        self.ops.append(GateOp(kind, name, inputs, out, params))
        return out


_OP_INPUT_DTYPES = {
    "stem-conv": ("int",),
    "threshold": ("int",),
    "pw-conv-bin": ("bits",),
    "conv-int": ("int",),
    "or": ("bits", "bits"),
    "tgap": ("bits",),
    "mux": ("bits", "bits", "bits"),
    "maxpool-or": ("bits",),
    "gap-count": ("bits",),
    "qlstm": ("int",),
    "tern-dense": ("tern",),
    "argmax": ("int",),
}


# ---------------------------------------------------------------------------
# Weight packing
# ---------------------------------------------------------------------------


def _sign_int8(w: np.ndarray) -> np.ndarray:
    return np.where(w > 0, 1, -1).astype(np.int8)


def _pw_weight_words(w: np.ndarray) -> np.ndarray:
    """1x1x1 kernel (1,1,1,Ci,Co) -> per-output-channel sign words (Co, nw)."""
    signs = (w.reshape(w.shape[3], w.shape[4]) > 0).astype(np.uint8)
    return pack_vector(signs.T)


@dataclass
class QLSTMGates:
    """Per-gate packed kernels: int8 signs for the count features, packed
    sign planes for the ternary recurrent part (one lane per output unit)."""

    wx: list[np.ndarray]  # 4 x int8 (n_i, n_o)
    wh_words: list[np.ndarray]  # 4 x uint64 (n_o, words(n_o))
    n_i: int
    n_o: int

    @classmethod
    def from_latent(cls, weights) -> "QLSTMGates":
        n_i, n_o = weights.n_i, weights.n_o
        wx, whw = [], []
        for w in weights.kernels():
            wx.append(_sign_int8(w[:n_i]))
            whw.append(pack_vector((w[n_i:] > 0).astype(np.uint8).T))
        return cls(wx, whw, n_i, n_o)


@dataclass
class QLSTMState:
    """Recurrent carry in two-plane ternary form, one lane per unit."""

    c: TernTensor
    h: TernTensor

    @classmethod
    def zeros(cls, batch: int, n_o: int) -> "QLSTMState":
        z = pack(np.zeros((batch, 1, 1, 1, n_o)))
        z2 = pack(np.zeros((batch, 1, 1, 1, n_o)))
        zc = pack(np.zeros((batch, 1, 1, 1, n_o)))
        zc2 = pack(np.zeros((batch, 1, 1, 1, n_o)))
        return cls(TernTensor(zc, zc2), TernTensor(z, z2))

    def h_values(self) -> np.ndarray:
        return (unpack(self.h.plus) - unpack(self.h.minus)).reshape(
            self.h.shape[0], self.h.shape[4]
        ).astype(np.int8)

    def c_values(self) -> np.ndarray:
        return (unpack(self.c.plus) - unpack(self.c.minus)).reshape(
            self.c.shape[0], self.c.shape[4]
        ).astype(np.int8)


def _pack_tern_rows(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(.., n) in {-1,0,1} -> packed plus/minus word rows (.., nw)."""
    return pack_vector((values == 1).astype(np.uint8)), pack_vector(
        (values == -1).astype(np.uint8)
    )


def _tern_dot_bipolar_rows(plus_w, minus_w, lane_words) -> np.ndarray:
    """Row-wise ternary x bipolar dots: (..., nw) against (k, nw) -> (..., k)."""
    pcp = np.bitwise_count(plus_w).sum(axis=-1).astype(np.int64)
    pcm = np.bitwise_count(minus_w).sum(axis=-1).astype(np.int64)
    ap = np.bitwise_count(plus_w[..., None, :] & lane_words).sum(axis=-1).astype(np.int64)
    am = np.bitwise_count(minus_w[..., None, :] & lane_words).sum(axis=-1).astype(np.int64)
    return (2 * ap - pcp[..., None]) - (2 * am - pcm[..., None])


def qlstm_step(
    x_counts: np.ndarray, state: QLSTMState, gates: QLSTMGates, input_scale: int
) -> QLSTMState:
    """One fully quantized recurrent step on integer features.

    Gate pre-activations are exact integers: count features enter with
    weight signs, the ternary carry enters via plane popcounts weighted by
    ``input_scale`` (the pooling denominator), matching the reference path's
    normalized inputs without ever forming a real number.  The cell update
    is a saturating ternary add; the new hidden state is the gated cell.
    """
    counts = np.asarray(x_counts, dtype=np.int64)
    if counts.ndim != 2 or counts.shape[1] != gates.n_i:
        raise ShapeMismatch(f"counts {counts.shape} vs n_i={gates.n_i}")
    batch = counts.shape[0]
    hp = state.h.plus.words.reshape(batch, -1)
    hm = state.h.minus.words.reshape(batch, -1)
    c = state.c_values().astype(np.int64)
    pre = [
        counts @ wx.astype(np.int64) + input_scale * _tern_dot_bipolar_rows(hp, hm, whw)
        for wx, whw in zip(gates.wx, gates.wh_words)
    ]
    i, f, o = ((p > 0).astype(np.int64) for p in pre[:3])
    ctilde = np.where(pre[3] > 0, 1, -1)
    c_new = np.clip(f * c + i * ctilde, -1, 1)
    h_new = o * c_new
    shape = (batch, 1, 1, 1, gates.n_o)
    return QLSTMState(
        TernTensor(pack((c_new == 1).reshape(shape).astype(float)),
                   pack((c_new == -1).reshape(shape).astype(float))),
        TernTensor(pack((h_new == 1).reshape(shape).astype(float)),
                   pack((h_new == -1).reshape(shape).astype(float))),
    )


# ---------------------------------------------------------------------------
# Compiler
# ---------------------------------------------------------------------------


def compile(model) -> GatePlan:  # noqa: A001 - deliberate: it compiles the model
    """Lower a stage-5 graph to a gate plan (no reals, no norm nodes)."""
    if model.stage != 5:
        raise NotFullyQuantized(f"model is at stage {model.stage}, need 5")
    plan = GatePlan()
    cfg = model.config
    plan.meta = {
        "t": cfg.t, "h": cfg.h, "w": cfg.w, "in_channels": cfg.in_channels,
        "num_classes": cfg.num_classes,
    }
    cur = plan.add_slot("input", "int")  # 8-bit features reassembled from planes

    def conv_int(src, name, spec, w):
        return plan.emit(
            "conv-int", name, (src,), "int",
            w=_sign_int8(w), kernel=spec.kernel, strides=spec.strides,
            groups=spec.groups, out_channels=spec.out_channels,
        )

    def pw_bin(src, name, spec, w):
        return plan.emit(
            "pw-conv-bin", name, (src,), "int",
            w_words=_pw_weight_words(w), out_channels=spec.out_channels,
        )

    def cf_chain(src, base, lay):
        z = pw_bin(src, f"{base}.cf1", lay.pw1_spec, lay.pw1_w)
        z = conv_int(z, f"{base}.cf2", lay.gconv_spec, lay.gconv_w)
        return conv_int(z, f"{base}.cf3", lay.pw2_spec, lay.pw2_w)

    for lay in model.layers:
        if lay.kind == "stem":
            z = plan.emit(
                "stem-conv", f"{lay.name}.pre", (cur,), "int",
                w=_sign_int8(lay.w), kernel=lay.spec.kernel, strides=lay.spec.strides,
                groups=1, out_channels=lay.spec.out_channels,
            )
            cur = plan.emit("threshold", f"{lay.name}.out", (z,), "bits")
            plan.outputs[f"{lay.name}.out"] = cur
        elif lay.kind == "cf":
            z = cf_chain(cur, lay.name, lay)
            cur = plan.emit("threshold", f"{lay.name}.out", (z,), "bits")
            plan.outputs[f"{lay.name}.out"] = cur
        elif lay.kind == "mor":
            if lay.skip_w is not None:
                zs = pw_bin(cur, f"{lay.name}.skippre", lay.skip_spec, lay.skip_w)
                skip = plan.emit("threshold", f"{lay.name}.skip", (zs,), "bits")
            else:
                skip = cur
            plan.outputs[f"{lay.name}.skip"] = skip
            t_h, t_w = lay.out_shape[1], lay.out_shape[2]
            sel = plan.emit(
                "tgap", f"{lay.name}.sel", (skip,), "bits",
                threshold=tgap_count_threshold(t_h, t_w),
            )
            plan.outputs[f"{lay.name}.sel"] = sel
            u = cf_chain(cur, lay.name, lay)
            v = plan.emit("threshold", f"{lay.name}.v", (u,), "bits")
            plan.outputs[f"{lay.name}.v"] = v
            i0 = plan.emit("or", f"{lay.name}.i0", (v, skip), "bits")
            plan.outputs[f"{lay.name}.i0"] = i0
            # The second norm folds to a positive shift and the step function
            # fixes binary values, so i1 coincides with i0 in the gate plan.
            plan.outputs[f"{lay.name}.i1"] = i0
            cur = plan.emit("mux", f"{lay.name}.out", (i0, i0, sel), "bits")
            plan.outputs[f"{lay.name}.out"] = cur
        elif lay.kind == "mp":
            cur = plan.emit(
                "maxpool-or", f"{lay.name}.out", (cur,), "bits",
                window=lay.window, strides=lay.strides,
            )
            plan.outputs[f"{lay.name}.out"] = cur
        elif lay.kind == "gap":
            t_h, t_w = lay.in_shape[1], lay.in_shape[2]
            plan.meta["gap_den"] = t_h * t_w
            cur = plan.emit("gap-count", f"{lay.name}.counts", (cur,), "int")
            plan.outputs[f"{lay.name}.counts"] = cur
        elif lay.kind == "lstm":
            cur = plan.emit(
                "qlstm", f"{lay.name}.h", (cur,), "tern",
                gates=QLSTMGates.from_latent(lay.weights),
                input_scale=plan.meta["gap_den"],
            )
            plan.outputs[f"{lay.name}.h"] = cur
        elif lay.kind == "dense":
            t_vals, _ = stern(lay.w, lay.m)  # fixed positive scale dropped
            plus, minus = _pack_tern_rows(t_vals.T.astype(np.int8))
            cur = plan.emit(
                "tern-dense", f"{lay.name}.intlogits", (cur,), "int",
                w_plus=plus, w_minus=minus, num_classes=lay.w.shape[1],
            )
            plan.outputs[f"{lay.name}.intlogits"] = cur
        else:
            raise TypeError(f"unknown layer kind {lay.kind!r}")
    pred = plan.emit("argmax", "pred", (cur,), "int")
    plan.outputs["pred"] = pred
    _check_plan(plan)
    return plan


def _check_plan(plan: GatePlan):
    written = set()
    for op in plan.ops:
        expected = _OP_INPUT_DTYPES[op.kind]
        for s in op.inputs:
            if s != 0 and s not in written:
                raise SlotTypeMismatch(f"{op.name} reads slot {s} before any write")
        if len(op.inputs) != len(expected):
            raise SlotTypeMismatch(f"{op.name} arity {len(op.inputs)} != {len(expected)}")
        for s, dt in zip(op.inputs, expected):
            if plan.slots[s].dtype != dt:
                raise SlotTypeMismatch(
                    f"{op.name} input slot {plan.slots[s].name} is "
                    f"{plan.slots[s].dtype}, expected {dt}"
                )
        if op.output in written:
            raise SlotTypeMismatch(f"slot {plan.slots[op.output].name} written twice")
        written.add(op.output)
        for key, val in op.params.items():
            if isinstance(val, np.ndarray) and val.dtype.kind == "f":
                raise SlotTypeMismatch(f"real-valued constant {key} in {op.name}")


# ---------------------------------------------------------------------------
# Executor
# ---------------------------------------------------------------------------


def frames_to_bitplanes(frames: np.ndarray) -> list[BitTensor]:
    """uint8 (N,T,H,W,C) -> 8 bit planes, least significant first."""
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        raise ShapeMismatch("logic-path input must be uint8")
    return [pack(((frames >> b) & 1).astype(np.float64)) for b in range(8)]


def _conv_int(x: np.ndarray, w_int8: np.ndarray, kernel, strides, groups, out_channels):
    view, dims = _patches(x, kernel, strides)
    n = x.shape[0]
    ci = x.shape[4]
    cig = ci // groups
    cog = out_channels // groups
    kt, kh, kw = kernel
    out = np.empty((n, *dims, out_channels), dtype=np.int64)
    w = w_int8.astype(np.int64)
    for gi in range(groups):
        cols = view[..., gi * cig : (gi + 1) * cig].reshape(-1, kt * kh * kw * cig)
        wg = w[..., gi * cog : (gi + 1) * cog].reshape(-1, cog)
        out[..., gi * cog : (gi + 1) * cog] = (cols @ wg).reshape(n, *dims, cog)
    return out


def _pw_conv_bin(bt: BitTensor, w_words: np.ndarray, out_channels: int) -> np.ndarray:
    pc_all = np.bitwise_count(bt.words).sum(axis=-1).astype(np.int64)
    acc = np.bitwise_count(bt.words[..., None, :] & w_words).sum(axis=-1).astype(np.int64)
    return 2 * acc - pc_all[..., None]


def _threshold(x: np.ndarray) -> BitTensor:
    return pack((x > 0).astype(np.float64))


def _tgap(bt: BitTensor, threshold: int) -> BitTensor:
    counts = unpack(bt).sum(axis=(2, 3), keepdims=True).astype(np.int64)
    return pack((counts > threshold).astype(np.float64))


def _mux_bits(i0: BitTensor, i1: BitTensor, sel: BitTensor) -> BitTensor:
    s = sel.words  # (N,T,1,1,nw) broadcasts over the spatial axes
    words = (i1.words & s) | (i0.words & ~s)
    return BitTensor(i0.shape, words)


def _maxpool_or(bt: BitTensor, window, strides) -> BitTensor:
    from numpy.lib.stride_tricks import as_strided

    n, t, h, w, c = bt.shape
    nw = bt.words.shape[-1]
    dims = [(s - k) // st + 1 for s, k, st in zip((t, h, w), window, strides)]
    sn, st_, sh, sw, swd = bt.words.strides
    view = as_strided(
        bt.words,
        shape=(n, dims[0], dims[1], dims[2], window[0], window[1], window[2], nw),
        strides=(sn, st_ * strides[0], sh * strides[1], sw * strides[2], st_, sh, sw, swd),
        writeable=False,
    )
    words = np.bitwise_or.reduce(view.reshape(n, *dims, -1, nw), axis=-2)
    return BitTensor((n, dims[0], dims[1], dims[2], c), words)


def _gap_count(bt: BitTensor) -> np.ndarray:
    return unpack(bt).sum(axis=(2, 3)).astype(np.int64)


def _tern_dense(h_seq: np.ndarray, w_plus, w_minus, num_classes) -> np.ndarray:
    hp, hm = _pack_tern_rows(h_seq)
    pp = np.bitwise_count(hp[..., None, :] & w_plus).sum(axis=-1).astype(np.int64)
    mm = np.bitwise_count(hm[..., None, :] & w_minus).sum(axis=-1).astype(np.int64)
    pm = np.bitwise_count(hp[..., None, :] & w_minus).sum(axis=-1).astype(np.int64)
    mp = np.bitwise_count(hm[..., None, :] & w_plus).sum(axis=-1).astype(np.int64)
    return pp + mm - pm - mp


@dataclass
class ExecutionResult:
    pred: np.ndarray
    intlogits: np.ndarray  # (N, T', classes) integer per-step responses
    intermediates: dict[str, np.ndarray]


def execute(plan: GatePlan, planes: list[BitTensor]) -> ExecutionResult:
    """Run a gate plan on an input presented as 8 LSB-first bit planes."""
    if len(planes) != 8:
        raise ShapeMismatch(f"need 8 input bit planes, got {len(planes)}")
    shape = planes[0].shape
    for p in planes:
        if not isinstance(p, BitTensor):
            raise SlotTypeMismatch("input planes must be BitTensor")
        if p.shape != shape:
            raise ShapeMismatch("input planes disagree on shape")
    meta = plan.meta
    if shape[1:] != (meta["t"], meta["h"], meta["w"], meta["in_channels"]):
        raise ShapeMismatch(f"input {shape} does not match plan {meta}")
    feats = np.zeros(shape, dtype=np.int64)
    for b, p in enumerate(planes):
        feats += (unpack(p) > 0).astype(np.int64) << b

    values: dict[int, object] = {0: feats}
    intlogits = None
    for op in plan.ops:
        args = [values[s] for s in op.inputs]
        p = op.params
        if op.kind in ("stem-conv", "conv-int"):
            out = _conv_int(args[0], p["w"], p["kernel"], p["strides"], p["groups"], p["out_channels"])
        elif op.kind == "pw-conv-bin":
            out = _pw_conv_bin(args[0], p["w_words"], p["out_channels"])
        elif op.kind == "threshold":
            out = _threshold(args[0])
        elif op.kind == "or":
            out = BitTensor(args[0].shape, args[0].words | args[1].words)
        elif op.kind == "tgap":
            out = _tgap(args[0], p["threshold"])
        elif op.kind == "mux":
            out = _mux_bits(args[0], args[1], args[2])
        elif op.kind == "maxpool-or":
            out = _maxpool_or(args[0], p["window"], p["strides"])
        elif op.kind == "gap-count":
            out = _gap_count(args[0])
        elif op.kind == "qlstm":
            counts = args[0]  # (N, T', n_i)
            gates = p["gates"]
            state = QLSTMState.zeros(counts.shape[0], gates.n_o)
            hs = []
            for t in range(counts.shape[1]):
                state = qlstm_step(counts[:, t, :], state, gates, p["input_scale"])
                hs.append(state.h_values())
            out = np.stack(hs, axis=1)  # int8 (N, T', n_o)
        elif op.kind == "tern-dense":
            out = _tern_dense(args[0], p["w_plus"], p["w_minus"], p["num_classes"])
            intlogits = out
        elif op.kind == "argmax":
            out = np.argmax(args[0].sum(axis=1), axis=-1)
        else:
            raise SlotTypeMismatch(f"unknown op kind {op.kind!r}")
        values[op.output] = out

    inter = {}
    for name, slot in plan.outputs.items():
        val = values[slot]
        if isinstance(val, BitTensor):
            inter[name] = unpack(val)
        else:
            inter[name] = val
    return ExecutionResult(pred=values[plan.ops[-1].output], intlogits=intlogits, intermediates=inter)


# ---------------------------------------------------------------------------
# Path-equivalence harness
# ---------------------------------------------------------------------------


@dataclass
class Divergence:
    name: str
    index: tuple
    got: float
    want: float

    def describe(self) -> str:
        return (
            f"first divergence at {self.name}, index {self.index} "
            f"(logic={self.got}, reference={self.want})"
        )


def compare_paths(model, frames: np.ndarray) -> Divergence | None:
    """Run both paths on uint8 frames; None when every shared intermediate
    and the final prediction agree exactly."""
    from . import reference as ref

    res_ref = ref.forward(model, frames.astype(np.float64) / 255.0, record=True)
    res_logic = execute(compile(model), frames_to_bitplanes(frames))
    for name in list(res_logic.intermediates):
        got = np.asarray(res_logic.intermediates[name], dtype=np.float64)
        want = np.asarray(res_ref.intermediates[name], dtype=np.float64)
        want = want.reshape(got.shape)
        if not np.array_equal(got, want):
            idx = tuple(int(v) for v in np.argwhere(got != want)[0])
            return Divergence(name, idx, float(got[idx]), float(want[idx]))
    return None
