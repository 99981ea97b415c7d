import numpy as np
import pytest

from billnet import reference as ref
from billnet.errors import BadGrouping, NonBinarySelect, ShapeMismatch
from billnet.model import build, toy_config
from billnet.quantize import clip, heaviside, sign_strict, ssign_scale
from billnet.reference import ConvSpec, LSTMWeights, conv3d, gap_spatial, lstm_cell, maxpool3d, mux
from billnet.tensors import conv_same_pads


def conv3d_oracle(x, w, spec):
    """Direct summation over the kernel window (independent of im2col)."""
    n, t, h, wd, ci = x.shape
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.strides
    g = spec.groups
    cig, cog = ci // g, spec.out_channels // g
    dims, pads = [], []
    for size, k, s in zip((t, h, wd), spec.kernel, spec.strides):
        out, pb, _ = conv_same_pads(size, k, s)
        dims.append(out)
        pads.append(pb)
    out = np.zeros((n, *dims, spec.out_channels))
    for b in range(n):
        for ot in range(dims[0]):
            for oh in range(dims[1]):
                for ow in range(dims[2]):
                    for oc in range(spec.out_channels):
                        gi = oc // cog
                        acc = 0.0
                        for dt in range(kt):
                            for dh in range(kh):
                                for dw in range(kw):
                                    it = ot * st + dt - pads[0]
                                    ih = oh * sh + dh - pads[1]
                                    iw = ow * sw + dw - pads[2]
                                    if 0 <= it < t and 0 <= ih < h and 0 <= iw < wd:
                                        for c in range(cig):
                                            acc += (
                                                x[b, it, ih, iw, gi * cig + c]
                                                * w[dt, dh, dw, c, oc]
                                            )
                        out[b, ot, oh, ow, oc] = acc
    return out


class TestConv3d:
    def test_identity_pointwise(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 4, 5, 6))
        spec = ConvSpec((1, 1, 1), (1, 1, 1), 1, 6, 6)
        w = np.eye(6).reshape(1, 1, 1, 6, 6)
        np.testing.assert_array_equal(conv3d(x, w, spec), x)

    def test_impulse_all_ones_kernel(self):
        x = np.zeros((1, 7, 7, 7, 1))
        x[0, 3, 3, 3, 0] = 1.0
        spec = ConvSpec((3, 3, 3), (1, 1, 1), 1, 1, 1)
        w = np.ones(spec.weight_shape)
        y = conv3d(x, w, spec)
        assert y.sum() == 27
        assert set(np.unique(y)) == {0.0, 1.0}
        assert (y[0, 2:5, 2:5, 2:5, 0] == 1).all()

    def test_depthwise_degenerate_scaling(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 3, 3, 4))
        spec = ConvSpec((1, 1, 1), (1, 1, 1), 4, 4, 4)
        scales = np.array([2.0, -1.0, 0.5, 3.0])
        w = scales.reshape(1, 1, 1, 1, 4)
        np.testing.assert_allclose(conv3d(x, w, spec), x * scales)

    @pytest.mark.parametrize("groups,strides", [(1, (1, 1, 1)), (2, (1, 1, 1)), (2, (2, 2, 2)), (1, (2, 1, 2))])
    def test_matches_direct_summation(self, groups, strides):
        rng = np.random.default_rng(2)
        spec = ConvSpec((3, 3, 3), strides, groups, 4, 6)
        x = rng.normal(size=(2, 4, 5, 6, 4))
        w = rng.normal(size=spec.weight_shape)
        np.testing.assert_allclose(conv3d(x, w, spec), conv3d_oracle(x, w, spec), atol=1e-12)

    def test_grouped_equals_independent_slices(self):
        rng = np.random.default_rng(3)
        g = 4
        spec = ConvSpec((3, 3, 3), (1, 1, 1), g, 8, 8)
        x = rng.normal(size=(1, 3, 4, 4, 8))
        w = rng.normal(size=spec.weight_shape)
        full = conv3d(x, w, spec)
        for gi in range(g):
            sub = ConvSpec((3, 3, 3), (1, 1, 1), 1, 2, 2)
            got = conv3d(x[..., gi * 2 : gi * 2 + 2], w[..., gi * 2 : gi * 2 + 2], sub)
            np.testing.assert_allclose(full[..., gi * 2 : gi * 2 + 2], got, atol=1e-12)

    def test_bad_grouping_rejected(self):
        with pytest.raises(BadGrouping):
            ConvSpec((3, 3, 3), (1, 1, 1), 3, 4, 6)

    def test_weight_shape_checked(self):
        spec = ConvSpec((1, 1, 1), (1, 1, 1), 1, 3, 3)
        with pytest.raises(ShapeMismatch):
            conv3d(np.zeros((1, 1, 1, 1, 3)), np.zeros((1, 1, 1, 3, 4)), spec)


class TestPooling:
    def test_constant_input(self):
        x = np.full((1, 2, 4, 4, 3), 0.7)
        np.testing.assert_array_equal(maxpool3d(x), np.full((1, 2, 2, 2, 3), 0.7))

    def test_binary_pool_is_or_reduction(self):
        rng = np.random.default_rng(4)
        x = (rng.random((2, 3, 6, 6, 5)) < 0.4).astype(float)
        pooled = maxpool3d(x)
        view = x.reshape(2, 3, 3, 2, 3, 2, 5)
        orred = np.logical_or.reduce(
            [view[:, :, :, 0, :, 0], view[:, :, :, 0, :, 1], view[:, :, :, 1, :, 0], view[:, :, :, 1, :, 1]]
        ).astype(float)
        np.testing.assert_array_equal(pooled, orred)

    def test_floor_mode_crops(self):
        x = np.zeros((1, 1, 5, 7, 1))
        assert maxpool3d(x).shape == (1, 1, 2, 3, 1)

    def test_gap_counts(self):
        rng = np.random.default_rng(5)
        flat = np.zeros(48)
        flat[rng.choice(48, size=25, replace=False)] = 1.0
        x = flat.reshape(1, 1, 6, 8, 1)
        assert gap_spatial(x)[0, 0, 0, 0, 0] == pytest.approx(25 / 48)


class TestMux:
    def _inputs(self, seed=6):
        rng = np.random.default_rng(seed)
        i0 = (rng.random((2, 3, 4, 4, 5)) < 0.5).astype(float)
        i1 = (rng.random((2, 3, 4, 4, 5)) < 0.5).astype(float)
        return i0, i1

    def test_select_all_ones(self):
        i0, i1 = self._inputs()
        s = np.ones((2, 3, 1, 1, 5))
        np.testing.assert_array_equal(mux(i0, i1, s), i1)

    def test_select_all_zeros(self):
        i0, i1 = self._inputs()
        s = np.zeros((2, 3, 1, 1, 5))
        np.testing.assert_array_equal(mux(i0, i1, s), i0)

    def test_mixed_select_elementwise_oracle(self):
        i0, i1 = self._inputs()
        rng = np.random.default_rng(7)
        s = (rng.random((2, 3, 1, 1, 5)) < 0.5).astype(float)
        got = mux(i0, i1, s)
        expect = np.where(np.broadcast_to(s, i0.shape) == 1, i1, i0)
        np.testing.assert_array_equal(got, expect)

    def test_non_binary_select_rejected(self):
        i0, i1 = self._inputs()
        with pytest.raises(NonBinarySelect):
            mux(i0, i1, np.full((2, 3, 1, 1, 5), 0.5))


def textbook_lstm_oracle(x, h, c, weights):
    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    zx = np.concatenate([x, h], axis=1)
    i = sig(zx @ weights.wi + weights.bi)
    f = sig(zx @ weights.wf + weights.bf)
    o = sig(zx @ weights.wo + weights.bo)
    ct = np.tanh(zx @ weights.wc + weights.bc)
    c_new = f * c + i * ct
    return o * np.tanh(c_new), c_new


def random_weights(rng, n_i, n_o, biases=True):
    mk = lambda: rng.normal(size=(n_i + n_o, n_o))
    bk = (lambda: rng.normal(size=n_o)) if biases else (lambda: None)
    return LSTMWeights(mk(), mk(), mk(), mk(), bk(), bk(), bk(), bk())


class TestLSTMCell:
    def test_float_matches_textbook_oracle(self):
        rng = np.random.default_rng(8)
        wts = random_weights(rng, 6, 4)
        x = rng.normal(size=(3, 6))
        h = rng.normal(size=(3, 4))
        c = rng.normal(size=(3, 4))
        got_h, got_c = lstm_cell(x, h, c, wts, "float")
        exp_h, exp_c = textbook_lstm_oracle(x, h, c, wts)
        np.testing.assert_allclose(got_h, exp_h, atol=1e-6)
        np.testing.assert_allclose(got_c, exp_c, atol=1e-6)

    def test_fq_zero_preactivations(self):
        n_i, n_o = 4, 3
        wts = LSTMWeights(*(np.ones((n_i + n_o, n_o)) for _ in range(4)))
        x = np.zeros((1, n_i))
        h = np.zeros((1, n_o))
        c = np.full((1, n_o), 1.0)
        got_h, got_c = lstm_cell(x, h, c, wts, "fq")
        # gates are 0, candidate is -1, so the state empties and h is 0
        np.testing.assert_array_equal(got_c, np.zeros((1, n_o)))
        np.testing.assert_array_equal(got_h, np.zeros((1, n_o)))

    def test_fq_saturation_clips_to_plus_one(self):
        # every gate fires, candidate +1, previous cell +1: 1*1 + 1*1 -> +1
        n_i, n_o = 2, 2
        wts = LSTMWeights(*(np.ones((n_i + n_o, n_o)) for _ in range(4)))
        x = np.ones((1, n_i))
        h = np.zeros((1, n_o))
        c = np.ones((1, n_o))
        got_h, got_c = lstm_cell(x, h, c, wts, "fq")
        np.testing.assert_array_equal(got_c, np.ones((1, n_o)))
        np.testing.assert_array_equal(got_h, np.ones((1, n_o)))

    def test_fq_matches_substituted_equations(self):
        # Oracle: evaluate the gate equations directly with the hard
        # activations substituted in, scales attached.
        rng = np.random.default_rng(9)
        n_i, n_o = 5, 4
        wts = random_weights(rng, n_i, n_o, biases=False)
        s = ssign_scale(n_i, n_o)
        for _ in range(200):
            x = rng.integers(0, 2, size=(2, n_i)).astype(float)
            h = rng.integers(-1, 2, size=(2, n_o)).astype(float)
            c = rng.integers(-1, 2, size=(2, n_o)).astype(float)
            zx = np.concatenate([x, h], axis=1)
            i = heaviside(zx @ (s * sign_strict(wts.wi)))
            f = heaviside(zx @ (s * sign_strict(wts.wf)))
            o = heaviside(zx @ (s * sign_strict(wts.wo)))
            ct = sign_strict(zx @ (s * sign_strict(wts.wc)))
            exp_c = clip(f * c + i * ct)
            exp_h = o * exp_c
            got_h, got_c = lstm_cell(x, h, c, wts, "fq")
            np.testing.assert_array_equal(got_c, exp_c)
            np.testing.assert_array_equal(got_h, exp_h)

    def test_fq_exact_integer_form_matches_integer_oracle(self):
        # Pure int64 oracle: pre = counts . sign(Wx) + den * (h . sign(Wh));
        # strict zero thresholds on the integers themselves.
        rng = np.random.default_rng(10)
        n_i, n_o, den = 6, 4, 48
        wts = random_weights(rng, n_i, n_o, biases=False)
        sx = [np.where(w[:n_i] > 0, 1, -1).astype(np.int64) for w in wts.kernels()]
        sh = [np.where(w[n_i:] > 0, 1, -1).astype(np.int64) for w in wts.kernels()]
        for _ in range(200):
            counts = rng.integers(0, den + 1, size=(1, n_i))
            h = rng.integers(-1, 2, size=(1, n_o))
            c = rng.integers(-1, 2, size=(1, n_o))
            pre = [counts @ sx[k] + den * (h @ sh[k]) for k in range(4)]
            i, f, o = ((p > 0).astype(np.int64) for p in pre[:3])
            ct = np.where(pre[3] > 0, 1, -1)
            exp_c = np.clip(f * c + i * ct, -1, 1)
            exp_h = o * exp_c
            got_h, got_c = lstm_cell(
                counts / den, h.astype(float), c.astype(float), wts, "fq",
                input_denominator=den,
            )
            np.testing.assert_array_equal(got_c, exp_c)
            np.testing.assert_array_equal(got_h, exp_h)


class TestHead:
    def test_zero_sequence_ties_break_low(self):
        logits = ref.dense_head(np.zeros((2, 3, 5)), np.zeros((5, 4)))
        np.testing.assert_array_equal(logits, np.zeros((2, 3, 4)))
        scores = ref.aggregate_logits(logits)
        np.testing.assert_array_equal(ref.predict(scores), [0, 0])

    def test_positive_scaling_preserves_argmax(self):
        rng = np.random.default_rng(11)
        h = rng.normal(size=(4, 3, 6))
        w = rng.normal(size=(6, 5))
        a = ref.predict(ref.aggregate_logits(ref.dense_head(h, w, 1.0)))
        b = ref.predict(ref.aggregate_logits(ref.dense_head(h, w, 0.037)))
        np.testing.assert_array_equal(a, b)


class TestModelForward:
    def test_toy_forward_shapes(self):
        model = build(toy_config())
        rng = np.random.default_rng(12)
        x = rng.integers(0, 256, size=(2, 8, 24, 32, 1)) / 255.0
        res = ref.forward(model, x, record=True)
        assert res.logits.shape == (2, 4, 4)
        assert res.scores.shape == (2, 4)
        assert res.pred.shape == (2,)
        assert "mor2.sel" in res.intermediates

    def test_paper_scale_heatmap_shape(self):
        # 16 frames at 96x128 produce an 8 x 27 class-temporal map.
        from billnet.model import BillnetConfig

        model = build(BillnetConfig())
        x = np.zeros((1, 16, 96, 128, 1))
        res = ref.forward(model, x)
        assert res.logits.shape[1:] == (8, 27)

    def test_quantized_stage_intermediates_are_binary_or_ternary(self):
        from billnet.model import apply_stage_transition

        model = build(toy_config(seed=3))
        for k in (2, 3, 4, 5):
            apply_stage_transition(model, k)
        rng = np.random.default_rng(13)
        x = rng.integers(0, 256, size=(1, 8, 24, 32, 1)) / 255.0
        res = ref.forward(model, x, record=True)
        for name, val in res.intermediates.items():
            layer = name.split(".")[0]
            if layer.startswith(("stem", "mor", "cf", "mp")):
                assert np.isin(val, (0.0, 1.0)).all(), name
        assert np.isin(res.intermediates["lstm.h"], (-1, 0, 1)).all()
        assert res.intermediates["gap.counts"].dtype == np.int64

    def test_zero_input_mor_takes_or_branch(self):
        model = build(toy_config(seed=4))
        x = np.zeros((1, 8, 24, 32, 1))
        res = ref.forward(model, x, record=True)
        np.testing.assert_array_equal(res.intermediates["mor1.sel"], 0.0)
        np.testing.assert_array_equal(
            res.intermediates["mor1.out"], res.intermediates["mor1.i0"]
        )
