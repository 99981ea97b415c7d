"""Multi-stage quantization training: Adam, schedule, and the stage driver.

Each stage trains the same latent weights through that stage's quantizer
set.  The tape graph mirrors the reference forward exactly, except that
normalization uses batch statistics (advancing the moving estimates that
stage 4 later folds into shifts).  Optimizer moments are reset at stage
boundaries; latent weights of quantized layers are clipped to [-1, 1] after
every update.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import StageOrderViolation
from .model import ModelGraph, apply_stage_transition
from .quantize import ssign_scale, stern_scale, tgap_select
from .reference import forward as eval_forward
from .reference import lstm_mode, snap_to_grid

# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

PAPER_LRS = {1: 5e-4, 2: 3e-4, 3: 3e-4, 4: 2e-4, 5: 1e-6}
PAPER_EPOCHS = {1: 100, 2: 80, 3: 80, 4: 80, 5: 80}
PAPER_DECAY_EPOCHS = 50
DECAY_RATE = 0.85


@dataclass
class StageConfig:
    stage: int
    initial_lr: float
    epochs: int
    decay_epochs: int
    decay_rate: float = DECAY_RATE
    batch_size: int = 40

    def __post_init__(self):
        if not 1 <= self.stage <= 5:
            raise StageOrderViolation(f"stage {self.stage} outside 1..5")
        if self.decay_epochs > self.epochs:
            raise ValueError("decay window longer than the stage")


def stage_config(stage: int, scale: float = 1.0, batch_size: int = 40) -> StageConfig:
    """Published per-stage (lr, epochs); epochs and the decay window shrink
    proportionally for desk-scale runs."""
    epochs = max(1, round(PAPER_EPOCHS[stage] * scale))
    decay = min(max(1, round(PAPER_DECAY_EPOCHS * scale)), epochs)
    return StageConfig(stage, PAPER_LRS[stage], epochs, decay, batch_size=batch_size)


def lr_schedule(cfg: StageConfig, epoch: int) -> float:
    """Constant, then exponential decay over the final ``decay_epochs``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside stage of {cfg.epochs}")
    start = cfg.epochs - cfg.decay_epochs
    if epoch < start:
        return cfg.initial_lr
    return cfg.initial_lr * cfg.decay_rate ** (epoch - start + 1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """In-place Adam update with bias correction; zero grads are no-ops."""
    state.t += 1
    b1c = 1.0 - state.beta1**state.t
    b2c = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Parameter binding
# ---------------------------------------------------------------------------


@dataclass
class BoundParams:
    """Trainable views over the model's own arrays for one stage."""

    vars: dict[str, Var] = field(default_factory=dict)
    clip_latents: list[str] = field(default_factory=list)

    def ordered(self) -> list[Var]:
        return [self.vars[k] for k in sorted(self.vars)]


def bind_params(model: ModelGraph) -> BoundParams:
    stage = model.stage
    bound = BoundParams()

    def reg(name, arr, clip=False):
        bound.vars[name] = Var(arr, trainable=True, name=name)
        if clip and stage >= 2:
            bound.clip_latents.append(name)

    for lay in model.layers:
        if lay.kind == "stem":
            reg(f"{lay.name}.w", lay.w, clip=True)
        elif lay.kind in ("cf", "mor"):
            reg(f"{lay.name}.pw1", lay.pw1_w, clip=True)
            reg(f"{lay.name}.gconv", lay.gconv_w, clip=True)
            reg(f"{lay.name}.pw2", lay.pw2_w, clip=True)
            if lay.kind == "mor" and lay.skip_w is not None:
                reg(f"{lay.name}.skip", lay.skip_w, clip=True)
        elif lay.kind == "lstm":
            for tag, w in zip("ifoc", lay.weights.kernels()):
                reg(f"{lay.name}.w{tag}", w, clip=True)
            if stage <= 1:
                for tag, b in zip("ifoc", lay.weights.biases()):
                    reg(f"{lay.name}.b{tag}", b)
        elif lay.kind == "dense":
            reg(f"{lay.name}.w", lay.w, clip=True)
    if stage <= 3:
        for lay in model.layers:
            if lay.kind in ("stem", "cf"):
                reg(f"{lay.name}.gamma", lay.norm.gamma)
                reg(f"{lay.name}.beta", lay.norm.beta)
            elif lay.kind == "mor":
                reg(f"{lay.name}.gamma1", lay.norm1.gamma)
                reg(f"{lay.name}.beta1", lay.norm1.beta)
                reg(f"{lay.name}.gamma2", lay.norm2.gamma)
                reg(f"{lay.name}.beta2", lay.norm2.beta)
    return bound


# ---------------------------------------------------------------------------
# Tape graph
# ---------------------------------------------------------------------------


def _norm_node(tape, x, lay_name, norm, bound, suffix=""):
    gamma = bound.vars.get(f"{lay_name}.gamma{suffix}")
    if gamma is not None:
        beta = bound.vars[f"{lay_name}.beta{suffix}"]
        return ad.batchnorm_train(tape, x, gamma, beta, norm)
    return ad.channel_affine(tape, x, norm.scale)


def _act_node(tape, x, stage):
    return ad.relu(tape, x) if stage <= 2 else ad.heaviside_ste(tape, x)


def _conv_node(tape, x, w_var, spec, stage):
    wq = ad.sign_ste(tape, w_var) if stage >= 2 else w_var
    tape.watch(w_var)
    return ad.conv3d_op(tape, x, wq, spec)


def training_graph(tape: Tape, model: ModelGraph, bound: BoundParams, x: np.ndarray, labels: np.ndarray):
    """Build the stage-semantics forward on the tape; returns (loss, scores)."""
    stage = model.stage
    for v in bound.vars.values():
        tape.watch(v)
    x = snap_to_grid(x)
    cur = Var(x)
    gap_den = 0
    for lay in model.layers:
        if lay.kind == "stem":
            if stage >= 4:
                cur = Var(np.rint(x * 255.0))
                z = _conv_node(tape, cur, bound.vars[f"{lay.name}.w"], lay.spec, stage)
                z = ad.scale_const(tape, z, 1.0 / 255.0)
            else:
                z = _conv_node(tape, cur, bound.vars[f"{lay.name}.w"], lay.spec, stage)
            cur = _act_node(tape, _norm_node(tape, z, lay.name, lay.norm, bound), stage)
        elif lay.kind == "cf":
            z = ad.conv3d_op(tape, cur, _quant_w(tape, bound, f"{lay.name}.pw1", stage), lay.pw1_spec)
            z = ad.conv3d_op(tape, z, _quant_w(tape, bound, f"{lay.name}.gconv", stage), lay.gconv_spec)
            z = ad.conv3d_op(tape, z, _quant_w(tape, bound, f"{lay.name}.pw2", stage), lay.pw2_spec)
            cur = _act_node(tape, _norm_node(tape, z, lay.name, lay.norm, bound), stage)
        elif lay.kind == "mor":
            if lay.skip_w is not None:
                zs = ad.conv3d_op(tape, cur, _quant_w(tape, bound, f"{lay.name}.skip", stage), lay.skip_spec)
                skip = _act_node(tape, zs, stage)
            else:
                skip = cur
            calib = None
            if stage < 3 and model.tgap_calibration is not None:
                calib = model.tgap_calibration.get(lay.name)
            sel = tgap_select(skip.value, quantized=stage >= 3, calibration=calib)
            z = ad.conv3d_op(tape, cur, _quant_w(tape, bound, f"{lay.name}.pw1", stage), lay.pw1_spec)
            z = ad.conv3d_op(tape, z, _quant_w(tape, bound, f"{lay.name}.gconv", stage), lay.gconv_spec)
            z = ad.conv3d_op(tape, z, _quant_w(tape, bound, f"{lay.name}.pw2", stage), lay.pw2_spec)
            v = _act_node(tape, _norm_node(tape, z, lay.name, lay.norm1, bound, "1"), stage)
            i0 = ad.clip_ste(tape, ad.add(tape, v, skip))
            i1 = _act_node(tape, _norm_node(tape, i0, lay.name, lay.norm2, bound, "2"), stage)
            cur = ad.mux_select(tape, i0, i1, sel)
        elif lay.kind == "mp":
            cur = ad.maxpool3d_op(tape, cur, lay.window)
        elif lay.kind == "gap":
            cur = ad.mean_axes(tape, cur, (2, 3))
        elif lay.kind == "lstm":
            cur = _lstm_nodes(tape, cur, lay, bound, stage)
        elif lay.kind == "dense":
            w = bound.vars[f"{lay.name}.w"]
            tape.watch(w)
            if stage >= 2:
                w = ad.tern_ste(tape, w, stern_scale(lay.m))
            logits = ad.matmul(tape, cur, w)
            scores = ad.mean_axes(tape, logits, (1,))
    loss = ad.softmax_cce(tape, scores, labels)
    return loss, scores.value


def _quant_w(tape, bound, name, stage):
    w = bound.vars[name]
    tape.watch(w)
    return ad.sign_ste(tape, w) if stage >= 2 else w


def _lstm_nodes(tape, x_seq, lay, bound, stage):
    mode = lstm_mode(stage)
    wts = lay.weights
    scale = ssign_scale(wts.n_i, wts.n_o)
    kernels = {}
    for tag in "ifoc":
        w = bound.vars[f"{lay.name}.w{tag}"]
        tape.watch(w)
        kernels[tag] = w if mode == "float" else ad.sign_ste(tape, w, scale)
    n, t_steps, _ = x_seq.value.shape
    h = Var(np.zeros((n, wts.n_o)))
    c = Var(np.zeros((n, wts.n_o)))
    hs = []
    for t in range(t_steps):
        xt = ad.select_time(tape, x_seq, t)
        z = ad.concat(tape, xt, h, axis=1)
        pre = {}
        for tag in "ifoc":
            p = ad.matmul(tape, z, kernels[tag])
            bias = bound.vars.get(f"{lay.name}.b{tag}")
            if mode == "float" and bias is not None:
                p = ad.add(tape, p, bias)
            pre[tag] = p
        if mode == "fq":
            i = ad.heaviside_ste(tape, pre["i"])
            f = ad.heaviside_ste(tape, pre["f"])
            o = ad.heaviside_ste(tape, pre["o"])
            ct = ad.sign_ste(tape, pre["c"])
            c = ad.clip_ste(tape, ad.add(tape, ad.mul(tape, f, c), ad.mul(tape, i, ct)))
            h = ad.mul(tape, o, c)
        else:
            i = ad.sigmoid(tape, pre["i"])
            f = ad.sigmoid(tape, pre["f"])
            o = ad.sigmoid(tape, pre["o"])
            ct = ad.tanh(tape, pre["c"])
            c = ad.add(tape, ad.mul(tape, f, c), ad.mul(tape, i, ct))
            h = ad.mul(tape, o, ad.tanh(tape, c))
        hs.append(h)
    return ad.stack_time(tape, hs)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(model: ModelGraph, frames: np.ndarray, labels: np.ndarray, batch_size: int = 40, path: str = "ref"):
    """Accuracy and confusion matrix on uint8 clips via either path."""
    classes = model.config.num_classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    plan = None
    if path == "logic":
        from . import engine

        plan = engine.compile(model)
    for lo in range(0, len(frames), batch_size):
        batch = frames[lo : lo + batch_size]
        if path == "logic":
            from . import engine

            pred = engine.execute(plan, engine.frames_to_bitplanes(batch)).pred
        elif path == "ref":
            pred = eval_forward(model, batch.astype(np.float64) / 255.0).pred
        else:
            raise ValueError(f"unknown path {path!r}")
        for want, got in zip(labels[lo : lo + batch_size], pred):
            confusion[int(want), int(got)] += 1
    accuracy = np.trace(confusion) / max(1, confusion.sum())
    return accuracy, confusion


# ---------------------------------------------------------------------------
# Stage driver
# ---------------------------------------------------------------------------


def run_stage(
    model: ModelGraph,
    cfg: StageConfig,
    train_frames: np.ndarray,
    train_labels: np.ndarray,
    test_frames: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> list[dict]:
    """Enter ``cfg.stage`` (applying its swaps) and train; returns log rows.

    Weights carry over verbatim from the previous stage; optimizer moments
    start from zero.
    """
    if cfg.stage == 1:
        if model.stage != 1:
            raise StageOrderViolation(f"stage 1 requested on a stage-{model.stage} model")
    else:
        apply_stage_transition(model, cfg.stage)
    rng = rng or np.random.default_rng(model.config.seed)
    bound = bind_params(model)
    params = bound.ordered()
    adam = AdamState.for_params([p.value for p in params])
    history = []
    n = len(train_frames)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = rng.permutation(n)
        losses, hits, seen = [], 0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = train_frames[idx].astype(np.float64) / 255.0
            y = train_labels[idx]
            for v in bound.vars.values():
                v.grad = None
            tape = Tape()
            loss, scores = training_graph(tape, model, bound, x, y)
            ad.backward(tape, loss)
            adam_step([p.value for p in params], [p.grad for p in params], adam, lr)
            for name in bound.clip_latents:
                v = bound.vars[name].value
                np.clip(v, -1.0, 1.0, out=v)
            losses.append(float(loss.value))
            hits += int((scores.argmax(axis=1) == y).sum())
            seen += len(idx)
        row = {
            "stage": cfg.stage,
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "train_acc": hits / seen,
            "batch_losses": losses,
        }
        if test_frames is not None:
            acc, _ = evaluate(model, test_frames, test_labels, cfg.batch_size)
            row["test_acc"] = float(acc)
        history.append(row)
    return history


def write_log_csv(path, rows):
    """epoch/stage/lr/loss/accuracy emission with stable formatting."""
    cols = ["stage", "epoch", "lr", "loss", "train_acc", "test_acc"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([repr(row.get(c, "")) for c in cols])
