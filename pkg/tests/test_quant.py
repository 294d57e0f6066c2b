import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from apprentice import nn
from apprentice.models import ModelSpec, build_model
from apprentice.quant import (FULL_PRECISION, QuantNode, QuantSpec, apply_policy, count_quant_nodes,
                              kbit_quantize_acts, kbit_quantize_weights, round_half_away, ste_backward,
                              ternary_quantize, weight_grid_indices)
from apprentice.tensor import Tensor, matmul, relu
from oracles import kbit_act_oracle, kbit_weight_oracle, ternary_oracle

finite32 = st.floats(-3, 3, width=32, allow_subnormal=False)


class TestQuantSpec:
    def test_render_and_parse(self):
        spec = QuantSpec.parse("8A, 4W")
        assert (spec.act_bits, spec.weight_bits) == (8, 4)
        assert str(spec) == "8A,4W"
        assert QuantSpec.parse(str(spec)) == spec

    @pytest.mark.parametrize("text", ["8A", "4W,8A", "16A,4W", "8A,3W", "A,W"])
    def test_rejects_bad_text(self, text):
        with pytest.raises(ValueError):
            QuantSpec.parse(text)

    def test_full_precision(self):
        assert FULL_PRECISION.is_full_precision and str(FULL_PRECISION) == "32A,32W"
        assert not QuantSpec(2, 32).is_full_precision


class TestTernary:
    def test_hand_example(self):
        t = ternary_quantize(np.array([-0.5, 0.03, 0.8, -0.02]))
        assert t.codes.tolist() == [-1, 0, 1, 0]
        assert t.scale == pytest.approx(0.65, abs=1e-15)

    def test_all_zero(self):
        t = ternary_quantize(np.zeros(6))
        assert t.codes.tolist() == [0] * 6 and t.scale == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ternary_quantize(np.zeros(0))

    def test_dequantize(self):
        t = ternary_quantize(np.array([[1.0, -1.0], [0.1, 2.0]]))
        np.testing.assert_array_equal(t.dequantize(), t.scale * t.codes)

    def test_oracle_equivalence_sample(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            w = rng.standard_normal(rng.integers(1, 60)).astype(np.float32)
            codes, scale = ternary_oracle(w)
            t = ternary_quantize(w)
            assert t.codes.tolist() == codes and t.scale == scale


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.float32, st.integers(1, 40), elements=finite32))
def test_ternary_takes_at_most_three_values(w):
    t = ternary_quantize(w)
    deq = t.dequantize()
    assert set(np.unique(deq)) <= {-t.scale, 0.0, t.scale}
    assert (t.scale == 0) == (not np.any(t.codes))
    assert t.scale >= 0


class TestKbit:
    def test_clipping(self):
        assert kbit_quantize_weights(np.array([1.3]), 4).tolist() == [1.0]

    def test_tie_rounds_away_from_zero(self):
        assert kbit_quantize_weights(np.array([0.5]), 4)[0] == 4 / 7
        assert kbit_quantize_weights(np.array([-0.5]), 4)[0] == -4 / 7
        assert kbit_quantize_acts(np.array([0.5]), 8)[0] == 128 / 255

    def test_zero_and_endpoints(self):
        for k in (4, 8):
            assert kbit_quantize_weights(np.array([0.0]), k)[0] == 0.0
        assert kbit_quantize_acts(np.array([-0.2]), 8)[0] == 0.0
        assert kbit_quantize_acts(np.array([1.0]), 8)[0] == 1.0

    def test_round_half_away(self):
        np.testing.assert_array_equal(round_half_away(np.array([-2.5, -1.5, -0.4, 0.5, 1.5, 2.49])),
                                      [-3, -2, 0, 1, 2, 2])

    def test_unsupported_bits(self):
        with pytest.raises(ValueError):
            weight_grid_indices(np.ones(2), 3)
        with pytest.raises(ValueError):
            kbit_quantize_acts(np.ones(2), 4)

    def test_dtype_preserved(self):
        assert kbit_quantize_weights(np.ones(3, dtype=np.float32), 8).dtype == np.float32

    def test_oracle_equivalence_sample(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            x = (rng.standard_normal(rng.integers(1, 50)) * 0.8).astype(np.float32)
            for k in (4, 8):
                assert weight_grid_indices(x, k).tolist() == kbit_weight_oracle(x, k)
            s = 255
            assert np.round(kbit_quantize_acts(x, 8).astype(np.float64) * s).astype(int).tolist() == kbit_act_oracle(x, 8)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, st.integers(1, 30), elements=finite32), st.sampled_from([4, 8]))
def test_kbit_weights_idempotent_and_bounded(x, k):
    q = kbit_quantize_weights(x, k)
    np.testing.assert_array_equal(kbit_quantize_weights(q, k), q)
    s = 2 ** (k - 1) - 1
    assert np.all(np.abs(q.astype(np.float64) - np.clip(x, -1, 1)) <= 1 / (2 * s) + 1e-7)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, st.integers(1, 30), elements=finite32))
def test_kbit_acts_idempotent_and_bounded(x):
    q = kbit_quantize_acts(x, 8)
    np.testing.assert_array_equal(kbit_quantize_acts(q, 8), q)
    assert np.all(np.abs(q.astype(np.float64) - np.clip(x, 0, 1)) <= 1 / (2 * 255) + 1e-7)


class TestSte:
    def test_weight_node_clipped_region(self):
        assert ste_backward(QuantNode("weight", 4), [1.3], [1.0]).tolist() == [0.0]

    def test_weight_node_pass_through(self):
        assert ste_backward(QuantNode("weight", 4), [0.5], [2.5]).tolist() == [2.5]

    def test_act_node_range(self):
        g = ste_backward(QuantNode("act", 8), [-0.1, 0.0, 0.5, 1.0, 1.2], [1.0] * 5)
        assert g.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]

    def test_ternary_passes_everywhere(self):
        g = ste_backward(QuantNode("ternary", 2), [-5.0, 0.0, 3.0], [1.0, 2.0, 3.0])
        assert g.tolist() == [1.0, 2.0, 3.0]

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            QuantNode("binary", 1)

    @pytest.mark.parametrize("kind,bits", [("weight", 4), ("weight", 8), ("ternary", 2)])
    def test_two_layer_gradient_matches_clip_network(self, kind, bits):
        # with STE, latent-weight gradients equal those of a network whose
        # weights are the quantized values themselves (inside the clip range)
        rng = np.random.default_rng(bits)
        x = rng.uniform(0, 1, (6, 5))
        w1 = rng.uniform(-0.9, 0.9, (5, 4))
        w2 = rng.uniform(-0.9, 0.9, (4, 3))
        node, act = QuantNode(kind, bits), QuantNode("act", 8)

        l1, l2 = Tensor(w1, requires_grad=True), Tensor(w2, requires_grad=True)
        out = matmul(act(relu(matmul(Tensor(x), node(l1)))), node(l2))
        (out * out).sum().backward()

        q1 = Tensor(node.quantize(w1), requires_grad=True)
        q2 = Tensor(node.quantize(w2), requires_grad=True)
        h = relu(matmul(Tensor(x), q1))
        hq = Tensor(act.quantize(h.data))
        # activation STE: pass-through where 0 <= h <= 1
        h_leaf = Tensor(hq.data, requires_grad=True)
        ref = matmul(h_leaf, q2)
        (ref * ref).sum().backward()
        h.backward(h_leaf.grad * ((h.data >= 0) & (h.data <= 1)))

        np.testing.assert_allclose(l1.grad, q1.grad, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(l2.grad, q2.grad, rtol=1e-12, atol=1e-12)

    def test_latent_weights_stay_full_precision(self):
        w = Tensor(np.array([0.31, -0.77, 0.05]), requires_grad=True)
        q = QuantNode("weight", 4)(w)
        assert not np.array_equal(q.data, w.data)
        assert w.data.tolist() == [0.31, -0.77, 0.05]


def _mlp(depth):
    widths = [784] + [8] * (depth - 1) + [10]
    return build_model(ModelSpec("mnist_mlp", widths=widths))


class TestPolicy:
    def test_five_layer_example(self):
        model = apply_policy(_mlp(5), QuantSpec.parse("8A,2W"))
        kinds = [None if layer.weight_quant is None else layer.weight_quant.kind for layer in model.weight_layers()]
        assert kinds == [None, "ternary", "ternary", "ternary", None]
        acts = model.activations()
        assert len(acts) == 4 and all(a.act_quant is not None and a.act_quant.bits == 8 for a in acts)

    def test_full_precision_inserts_nothing(self):
        assert count_quant_nodes(apply_policy(_mlp(5), FULL_PRECISION)) == (0, 0)

    def test_resnet20_has_18_weight_nodes(self):
        model = apply_policy(build_model(ModelSpec("cifar_resnet", n=3)), QuantSpec.parse("8A,2W"))
        assert count_quant_nodes(model)[0] == 18

    def test_two_layer_exemption_rejected(self):
        with pytest.raises(ValueError, match="at least 3"):
            apply_policy(_mlp(2), QuantSpec.parse("8A,4W"))

    def test_two_layer_without_exemption(self):
        model = apply_policy(_mlp(2), QuantSpec(4, 8, exempt_first_last=False))
        assert count_quant_nodes(model) == (2, 1)

    def test_shapes_unchanged_and_replaceable(self):
        model = _mlp(4)
        before = [(n, p.shape) for n, p in model.named_parameters()]
        apply_policy(model, QuantSpec.parse("8A,4W"))
        apply_policy(model, FULL_PRECISION)
        assert [(n, p.shape) for n, p in model.named_parameters()] == before
        assert count_quant_nodes(model) == (0, 0)

    def test_weight_and_bias_layers_only(self):
        model = apply_policy(_mlp(4), QuantSpec.parse("8A,4W"))
        assert all(isinstance(layer, (nn.Conv2d, nn.Linear)) for layer in model.weight_layers())
