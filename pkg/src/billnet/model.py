"""Declarative model builder and parameter accounting.

A built graph is an ordered list of layer records, each carrying its latent
(real) weights, its normalization state (batch-norm statistics before stage
4, power-of-two shifts after), and its input/output shapes.  Forward
semantics are derived from the graph's current stage: the same latent
weights are consumed raw in stage 1 and through their quantizers afterwards.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, asdict
from typing import ClassVar

import numpy as np

from .errors import BadConfig, StageOrderViolation
from .quantize import BNParams, ShiftNorm, bsn_fold
from .reference import ConvSpec, LSTMWeights
from .tensors import conv_output_shape, pool_output_shape

# Default block stack at paper scale.  The published figure's exact block
# count is not recoverable; this stack is pinned by the measurable anchors:
# three spatial pools after the strided stem (96x128 -> 48x64 -> ... -> 6x8),
# the last residual blocks operating on 6x8 maps, about one million weights,
# and stage-wise bit-operation totals near the published ones.
DEFAULT_BLOCKS = (
    "mp",
    "mor:n",
    "mp",
    "mor:2n", "mor:2n", "mor:2n", "mor:2n", "mor:2n",
    "mp",
    "mor:4n", "mor:4n", "mor:4n", "mor:4n",
)
TOY_BLOCKS = ("mor:n", "mp", "mor:2n")


@dataclass
class BillnetConfig:
    """Everything needed to rebuild a graph deterministically."""

    n: int = 64
    g: int = 4
    m: int = 32
    t: int = 16
    h: int = 96
    w: int = 128
    num_classes: int = 27
    blocks: tuple[str, ...] = DEFAULT_BLOCKS
    in_channels: int = 1
    seed: int = 0
    tgap_mode: str = "batch_max"  # float-stage calibration: batch_max | calibrated
    batch_size: int = 40
    epochs_scale: float = 1.0

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        if self.n % (2 * self.g):
            raise BadConfig(f"n={self.n} must be divisible by 2*g={2 * self.g}")
        if self.m < 1 or self.num_classes < 2:
            raise BadConfig("need m >= 1 and at least two classes")
        if self.tgap_mode not in ("batch_max", "calibrated"):
            raise BadConfig(f"unknown tgap_mode {self.tgap_mode!r}")
        for entry in self.blocks:
            if entry != "mp" and not re.fullmatch(r"(mor|cf):\d*n", entry):
                raise BadConfig(f"bad block entry {entry!r} (want 'mor:<k>n', 'cf:<k>n' or 'mp')")

    @property
    def lstm_hidden(self) -> int:
        return 4 * self.m

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BillnetConfig":
        d = dict(d)
        d["blocks"] = tuple(d.get("blocks", DEFAULT_BLOCKS))
        return cls(**d)


def toy_config(**overrides) -> BillnetConfig:
    """Desk-scale default: small enough to train in minutes on a CPU."""
    base = dict(
        n=16, g=2, m=8, t=8, h=24, w=32, num_classes=4,
        blocks=TOY_BLOCKS, epochs_scale=0.1,
    )
    base.update(overrides)
    return BillnetConfig(**base)


def _channel_mult(entry: str) -> int:
    digits = entry.split(":")[1].rstrip("n")
    return int(digits) if digits else 1


# ---------------------------------------------------------------------------
# Layer records
# ---------------------------------------------------------------------------


@dataclass
class StemLayer:
    kind: ClassVar[str] = "stem"
    name: str
    spec: ConvSpec
    w: np.ndarray
    norm: BNParams | ShiftNorm
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass
class CFLayer:
    kind: ClassVar[str] = "cf"
    name: str
    pw1_spec: ConvSpec
    pw1_w: np.ndarray
    gconv_spec: ConvSpec
    gconv_w: np.ndarray
    pw2_spec: ConvSpec
    pw2_w: np.ndarray
    norm: BNParams | ShiftNorm
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass
class MORLayer:
    kind: ClassVar[str] = "mor"
    name: str
    pw1_spec: ConvSpec
    pw1_w: np.ndarray
    gconv_spec: ConvSpec
    gconv_w: np.ndarray
    pw2_spec: ConvSpec
    pw2_w: np.ndarray
    norm1: BNParams | ShiftNorm
    norm2: BNParams | ShiftNorm
    skip_spec: ConvSpec | None = None
    skip_w: np.ndarray | None = None
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass
class MaxPoolLayer:
    kind: ClassVar[str] = "mp"
    name: str
    window: tuple = (1, 2, 2)
    strides: tuple = (1, 2, 2)
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass
class GAPLayer:
    kind: ClassVar[str] = "gap"
    name: str
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass
class LSTMLayer:
    kind: ClassVar[str] = "lstm"
    name: str
    weights: LSTMWeights
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass
class DenseLayer:
    kind: ClassVar[str] = "dense"
    name: str
    w: np.ndarray
    m: int = 0  # controls the ternary scale 1/sqrt(4m)
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass
class ModelGraph:
    config: BillnetConfig
    layers: list
    stage: int = 1
    tgap_calibration: dict | None = None
    rng_state: dict | None = None

    def layer(self, name: str):
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _fresh_bn(c: int) -> BNParams:
    return BNParams(gamma=np.ones(c), beta=np.zeros(c), mean=np.zeros(c), var=np.ones(c))


def build(cfg: BillnetConfig) -> ModelGraph:
    """Construct the graph with reproducible weight initialization."""
    rng = np.random.default_rng(cfg.seed)
    layers: list = []
    shape = (cfg.t, cfg.h, cfg.w)
    c = cfg.in_channels

    def conv_init(spec: ConvSpec) -> np.ndarray:
        kt, kh, kw = spec.kernel
        fan_in = kt * kh * kw * spec.in_channels // spec.groups
        return _uniform(rng, fan_in, spec.weight_shape)

    stem_spec = ConvSpec((3, 3, 3), (2, 2, 2), 1, c, cfg.n)
    in_shape = shape + (c,)
    shape = conv_output_shape(shape, stem_spec.kernel, stem_spec.strides)
    c = cfg.n
    layers.append(
        StemLayer("stem", stem_spec, conv_init(stem_spec), _fresh_bn(c), in_shape, shape + (c,))
    )

    mor_i = cf_i = mp_i = 0
    for entry in cfg.blocks:
        if entry == "mp":
            mp_i += 1
            win = (1, 2, 2)
            out = pool_output_shape(shape, win, win)
            if any(d < 1 for d in out):
                raise BadConfig(f"pooling below 1x1 at block {mp_i}: {shape} -> {out}")
            layers.append(MaxPoolLayer(f"mp{mp_i}", win, win, shape + (c,), out + (c,)))
            shape = out
            continue
        kind, mult = entry.split(":")[0], _channel_mult(entry)
        c_out = mult * cfg.n
        mid = c // 2
        if mid % cfg.g:
            raise BadConfig(f"low dim {mid} of {entry} not divisible by g={cfg.g}")
        pw1 = ConvSpec((1, 1, 1), (1, 1, 1), 1, c, mid)
        gco = ConvSpec((3, 3, 3), (1, 1, 1), cfg.g, mid, mid)
        pw2 = ConvSpec((1, 1, 1), (1, 1, 1), 1, mid, c_out)
        if kind == "cf":
            cf_i += 1
            layers.append(
                CFLayer(
                    f"cf{cf_i}", pw1, conv_init(pw1), gco, conv_init(gco), pw2,
                    conv_init(pw2), _fresh_bn(c_out), shape + (c,), shape + (c_out,),
                )
            )
        else:
            mor_i += 1
            skip_spec = skip_w = None
            if c != c_out:
                skip_spec = ConvSpec((1, 1, 1), (1, 1, 1), 1, c, c_out)
                skip_w = conv_init(skip_spec)
            layers.append(
                MORLayer(
                    f"mor{mor_i}", pw1, conv_init(pw1), gco, conv_init(gco), pw2,
                    conv_init(pw2), _fresh_bn(c_out), _fresh_bn(c_out),
                    skip_spec, skip_w, shape + (c,), shape + (c_out,),
                )
            )
        c = c_out

    layers.append(GAPLayer("gap", shape + (c,), (shape[0], c)))
    n_o = cfg.lstm_hidden
    n_i = c
    bound = 1.0 / np.sqrt(n_i + n_o)
    lw = LSTMWeights(
        *(rng.uniform(-bound, bound, size=(n_i + n_o, n_o)) for _ in range(4)),
        *(np.zeros(n_o) for _ in range(4)),
    )
    layers.append(LSTMLayer("lstm", lw, (shape[0], n_i), (shape[0], n_o)))
    layers.append(
        DenseLayer(
            "dense", _uniform(rng, n_o, (n_o, cfg.num_classes)), cfg.m,
            (shape[0], n_o), (shape[0], cfg.num_classes),
        )
    )
    return ModelGraph(config=cfg, layers=layers, stage=1)


# ---------------------------------------------------------------------------
# Stage transitions
# ---------------------------------------------------------------------------


def apply_stage_transition(model: ModelGraph, stage: int) -> ModelGraph:
    """Advance the graph to ``stage``, applying that stage's swaps.

    Quantization only ever grows: each entry requires the immediately
    preceding stage.  Stage 2 removes recurrent biases, stage 4 folds all
    batch norms into offset-free shifts using the moving statistics frozen
    at that moment; stages 3 and 5 only flip activation semantics.
    """
    if stage < 1 or stage > 5 or stage != model.stage + 1:
        raise StageOrderViolation(
            f"cannot enter stage {stage} from stage {model.stage}"
        )
    if stage == 2:
        for lay in model.layers:
            if lay.kind == "lstm":
                lay.weights.bi = lay.weights.bf = lay.weights.bo = lay.weights.bc = None
    if stage == 4:
        for lay in model.layers:
            if lay.kind in ("stem", "cf"):
                lay.norm = bsn_fold(lay.norm)
            elif lay.kind == "mor":
                lay.norm1 = bsn_fold(lay.norm1)
                lay.norm2 = bsn_fold(lay.norm2)
    model.stage = stage
    return model


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


def _weight_bits(kind: str, stage: int) -> int:
    if stage <= 1:
        return 32
    return 2 if kind == "dense" else 1


@dataclass
class LayerParams:
    name: str
    kind: str
    weight_params: int
    weight_bits: int
    bookkeeping_bits: int


@dataclass
class ParamReport:
    stage: int
    layers: list[LayerParams] = field(default_factory=list)

    @property
    def total_weight_params(self) -> int:
        return sum(l.weight_params for l in self.layers)

    @property
    def total_weight_bits(self) -> int:
        return sum(l.weight_bits for l in self.layers)

    @property
    def total_bookkeeping_bits(self) -> int:
        return sum(l.bookkeeping_bits for l in self.layers)


def _norm_bits(norm, stage: int) -> int:
    if isinstance(norm, ShiftNorm):
        return norm.shift.size * 8
    # four per-channel statistics at full precision
    return 4 * norm.gamma.size * 32


def count_params(model: ModelGraph, stage: int | None = None) -> ParamReport:
    """Per-layer parameter counts and bit sizes under a stage's bitwidths.

    The headline weight size covers conv/recurrent/dense kernels only;
    normalization statistics and biases are reported separately as
    bookkeeping, mirroring how weight-related memory is usually quoted.
    """
    stage = model.stage if stage is None else stage
    rep = ParamReport(stage=stage)
    for lay in model.layers:
        bits = _weight_bits(lay.kind, stage)
        if lay.kind == "stem":
            n = lay.w.size
            rep.layers.append(LayerParams(lay.name, lay.kind, n, n * bits, _norm_bits(lay.norm, stage)))
        elif lay.kind == "cf":
            n = lay.pw1_w.size + lay.gconv_w.size + lay.pw2_w.size
            rep.layers.append(LayerParams(lay.name, lay.kind, n, n * bits, _norm_bits(lay.norm, stage)))
        elif lay.kind == "mor":
            n = lay.pw1_w.size + lay.gconv_w.size + lay.pw2_w.size
            if lay.skip_w is not None:
                n += lay.skip_w.size
            book = _norm_bits(lay.norm1, stage) + _norm_bits(lay.norm2, stage)
            rep.layers.append(LayerParams(lay.name, lay.kind, n, n * bits, book))
        elif lay.kind == "lstm":
            n = sum(w.size for w in lay.weights.kernels())
            book = sum(b.size * 32 for b in lay.weights.biases() if b is not None)
            rep.layers.append(LayerParams(lay.name, lay.kind, n, n * bits, book))
        elif lay.kind == "dense":
            n = lay.w.size
            rep.layers.append(LayerParams(lay.name, lay.kind, n, n * bits, 0))
    return rep
