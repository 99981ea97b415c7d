import numpy as np
import pytest

from billnet import engine
from billnet.engine import (
    QLSTMGates,
    QLSTMState,
    compare_paths,
    execute,
    frames_to_bitplanes,
    qlstm_step,
)
from billnet.errors import NotFullyQuantized, ShapeMismatch
from billnet.model import apply_stage_transition, build, toy_config
from billnet.reference import LSTMWeights, lstm_cell


def quantized_toy_model(seed=0, randomize_norms=True):
    rng = np.random.default_rng(seed + 1000)
    model = build(toy_config(seed=seed))
    if randomize_norms:
        for lay in model.layers:
            norms = []
            if lay.kind in ("stem", "cf"):
                norms = [lay.norm]
            elif lay.kind == "mor":
                norms = [lay.norm1, lay.norm2]
            for nm in norms:
                nm.gamma = rng.lognormal(0.0, 1.0, nm.gamma.shape)
                nm.beta = rng.normal(0.0, 0.3, nm.beta.shape)
                nm.mean = rng.normal(0.0, 1.0, nm.mean.shape)
                nm.var = rng.lognormal(0.0, 1.0, nm.var.shape)
    for k in (2, 3, 4, 5):
        apply_stage_transition(model, k)
    return model


class TestCompile:
    def test_requires_stage5(self):
        model = build(toy_config())
        for k in (2, 3):
            apply_stage_transition(model, k)
        with pytest.raises(NotFullyQuantized):
            engine.compile(model)

    def test_no_norm_nodes_no_real_constants(self):
        plan = engine.compile(quantized_toy_model())
        kinds = {op.kind for op in plan.ops}
        assert "norm" not in " ".join(kinds)
        for op in plan.ops:
            for val in op.params.values():
                if isinstance(val, np.ndarray):
                    assert val.dtype.kind != "f", (op.name, val.dtype)

    def test_final_mux_threshold_is_24_for_6x8(self):
        plan = engine.compile(quantized_toy_model())
        tgap = [op for op in plan.ops if op.kind == "tgap"]
        assert tgap[-1].params["threshold"] == 24

    def test_slots_written_once(self):
        plan = engine.compile(quantized_toy_model())
        outs = [op.output for op in plan.ops]
        assert len(outs) == len(set(outs))


class TestExecute:
    def test_zero_input_matches_reference(self):
        model = quantized_toy_model(seed=2)
        frames = np.zeros((1, 8, 24, 32, 1), dtype=np.uint8)
        assert compare_paths(model, frames) is None

    def test_constant_input_exact_zero_preactivations(self):
        # Balanced +-1 kernels over constant frames give exactly zero sums;
        # both paths must make the same strict-threshold decision.
        model = quantized_toy_model(seed=3)
        frames = np.full((1, 8, 24, 32, 1), 127, dtype=np.uint8)
        assert compare_paths(model, frames) is None

    def test_random_models_and_inputs_exact(self):
        rng = np.random.default_rng(4)
        for seed in range(8):
            model = quantized_toy_model(seed=seed)
            frames = rng.integers(0, 256, size=(2, 8, 24, 32, 1), dtype=np.uint8)
            assert compare_paths(model, frames) is None

    def test_input_validation(self):
        model = quantized_toy_model(seed=5)
        plan = engine.compile(model)
        frames = np.zeros((1, 8, 24, 32, 1), dtype=np.uint8)
        planes = frames_to_bitplanes(frames)
        with pytest.raises(ShapeMismatch):
            execute(plan, planes[:4])
        bad = frames_to_bitplanes(np.zeros((1, 4, 24, 32, 1), dtype=np.uint8))
        with pytest.raises(ShapeMismatch):
            execute(plan, bad)

    def test_bitplanes_require_uint8(self):
        with pytest.raises(ShapeMismatch):
            frames_to_bitplanes(np.zeros((1, 2, 2, 2, 1)))

    def test_intlogits_shape(self):
        model = quantized_toy_model(seed=6)
        plan = engine.compile(model)
        frames = np.zeros((3, 8, 24, 32, 1), dtype=np.uint8)
        res = execute(plan, frames_to_bitplanes(frames))
        assert res.intlogits.shape == (3, 4, 4)
        assert res.intlogits.dtype == np.int64


def random_gates(rng, n_i, n_o):
    wts = LSTMWeights(*(rng.normal(size=(n_i + n_o, n_o)) for _ in range(4)))
    return wts, QLSTMGates.from_latent(wts)


class TestQLSTMStep:
    def test_zero_everything_stays_zero(self):
        rng = np.random.default_rng(7)
        _, gates = random_gates(rng, 4, 3)
        state = QLSTMState.zeros(1, 3)
        out = qlstm_step(np.zeros((1, 4), dtype=np.int64), state, gates, 48)
        np.testing.assert_array_equal(out.h_values(), 0)
        np.testing.assert_array_equal(out.c_values(), 0)

    def test_saturating_add_clips_to_one(self):
        # All-positive kernels and strong inputs: every gate fires with a +1
        # candidate onto a +1 cell; the sum 2 must clip to +1.
        n_i, n_o = 2, 2
        wts = LSTMWeights(*(np.ones((n_i + n_o, n_o)) for _ in range(4)))
        gates = QLSTMGates.from_latent(wts)
        ones = np.ones((1, 1, 1, 1, n_o))
        from billnet.tensors import pack, TernTensor

        state = QLSTMState(
            TernTensor(pack(ones), pack(np.zeros_like(ones))),
            TernTensor(pack(np.zeros_like(ones)), pack(np.zeros_like(ones))),
        )
        out = qlstm_step(np.full((1, n_i), 10, dtype=np.int64), state, gates, 48)
        np.testing.assert_array_equal(out.c_values(), 1)
        np.testing.assert_array_equal(out.h_values(), 1)

    def test_matches_reference_cell_with_scales(self):
        # The reference cell carries the weight scale and normalized inputs;
        # strict thresholds at zero make the integer step exactly equal.
        rng = np.random.default_rng(8)
        n_i, n_o, den = 6, 5, 48
        wts, gates = random_gates(rng, n_i, n_o)
        state = QLSTMState.zeros(2, n_o)
        h_ref = np.zeros((2, n_o))
        c_ref = np.zeros((2, n_o))
        for _ in range(500):
            counts = rng.integers(0, den + 1, size=(2, n_i))
            state = qlstm_step(counts, state, gates, den)
            h_ref, c_ref = lstm_cell(
                counts / den, h_ref, c_ref, wts, "fq", input_denominator=den
            )
            np.testing.assert_array_equal(state.h_values(), h_ref)
            np.testing.assert_array_equal(state.c_values(), c_ref)

    def test_state_stays_ternary_with_disjoint_planes(self):
        rng = np.random.default_rng(9)
        _, gates = random_gates(rng, 4, 6)
        state = QLSTMState.zeros(1, 6)
        for _ in range(1000):
            counts = rng.integers(0, 49, size=(1, 4))
            state = qlstm_step(counts, state, gates, 48)
            assert not np.any(state.h.plus.words & state.h.minus.words)
            assert not np.any(state.c.plus.words & state.c.minus.words)
            assert np.isin(state.c_values(), (-1, 0, 1)).all()

    def test_shape_mismatch(self):
        rng = np.random.default_rng(10)
        _, gates = random_gates(rng, 4, 3)
        with pytest.raises(ShapeMismatch):
            qlstm_step(np.zeros((1, 5), dtype=np.int64), QLSTMState.zeros(1, 3), gates, 48)
