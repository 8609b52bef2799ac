"""Propagation-rule behavior against definitional oracles.

The key reference routes:

- ratio-form loops (``naive_lrp_linear`` / ``naive_lrp_zb``) applied either
  directly to linear layers or to the unrolled matrix of a small conv;
- conservation identities that hold exactly for bias-free layers;
- float64 finite differences for the gradient x input equivalence.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from relprop.errors import DivisionGuardError, RuleError, ShapeError
from relprop.lrp import (
    LRP0,
    PixelBounds,
    Rule,
    RuleAssignment,
    default_rules,
    epsilon_rule,
    gamma_rule,
    init_output_relevance,
    lrp_explain,
    lrp_step,
    lrp_zb_input,
    parse_rules,
    rho,
    rules_from_doc,
    zb_rule,
)
from relprop.network import LayerSpec, build_network, forward_trace, load_arch
from relprop.tensor import conv2d

from oracles import naive_conv2d, naive_lrp_linear, naive_lrp_zb
from toynets import random_relu_cnn, tiny_cnn


def unrolled_conv_matrix(weight, bias, in_shape, stride=1, padding=0):
    """Extract the exact linear map of a conv by probing basis vectors."""
    n_in = int(np.prod(in_shape))
    zero = np.zeros(in_shape)
    out0 = naive_conv2d(zero, weight, bias, stride, padding)
    cols = []
    for j in range(n_in):
        probe = np.zeros(n_in)
        probe[j] = 1.0
        out = naive_conv2d(probe.reshape(in_shape), weight, bias, stride, padding)
        cols.append((out - out0).ravel())
    matrix = np.stack(cols, axis=1)
    bias_flat = out0.ravel()  # per-output-cell bias (replicated spatially)
    return matrix, bias_flat, out0.shape


class TestRuleObjects:
    def test_unknown_kind(self):
        with pytest.raises(RuleError):
            Rule("alpha-beta")

    def test_negative_parameters(self):
        with pytest.raises(RuleError):
            Rule("epsilon", eps=-1.0)
        with pytest.raises(RuleError):
            Rule("gamma", gamma=-0.1)
        with pytest.raises(RuleError):
            epsilon_rule(0.0)

    def test_rho_gamma(self):
        w = np.array([[-2.0, 3.0]], dtype=np.float32)
        assert_allclose(rho(w, gamma_rule(0.5)), [[-2.0, 4.5]])
        assert_allclose(rho(w, gamma_rule(0.5, positive_only=True)), [[0.0, 3.0]])
        assert rho(w, LRP0) is w
        assert rho(w, epsilon_rule(1e-6)) is w

    def test_describe(self):
        assert gamma_rule(0.25).describe() == "gamma:0.25"
        assert gamma_rule(0.1, positive_only=True).describe() == "gamma+:0.1"
        assert epsilon_rule(1e-6).describe() == "epsilon:1e-06"


class TestRuleAssignment:
    def test_parse_round_trip(self):
        ra = parse_rules("0=zb;1-16=gamma:0.25;17-35=epsilon:1e-6;36=lrp0")
        assert ra.rule_for(0).kind == "zb"
        assert ra.rule_for(5).gamma == pytest.approx(0.25)
        assert ra.rule_for(20).eps == pytest.approx(1e-6)
        assert ra.rule_for(36).kind == "lrp0"
        assert ra.uses_zb()

    def test_parse_rejects_garbage(self):
        with pytest.raises(RuleError):
            parse_rules("0=nope")
        with pytest.raises(RuleError):
            parse_rules("abc=lrp0")
        with pytest.raises(RuleError):
            parse_rules("")

    def test_doc_rules_from_bundled_arch(self, assets_dir):
        _, meta = load_arch(assets_dir / "vgg16.json")
        ra = rules_from_doc(meta["rules"])
        assert ra.rule_for(0).kind == "zb"
        assert ra.rule_for(8).kind == "gamma"
        assert ra.rule_for(30).kind == "epsilon"
        assert ra.rule_for(36).kind == "lrp0"

    def test_coverage_gap_and_overlap(self):
        net = tiny_cnn()
        with pytest.raises(RuleError):
            RuleAssignment(((0, 3, LRP0),)).validate(net)  # gap
        with pytest.raises(RuleError):
            RuleAssignment(((0, 8, LRP0), (4, 8, LRP0))).validate(net)
        with pytest.raises(RuleError):
            RuleAssignment(((0, 20, LRP0),)).validate(net)  # out of range

    def test_zb_only_on_first_conv(self):
        net = tiny_cnn()
        bad = RuleAssignment(((0, 2, LRP0), (3, 3, zb_rule()), (4, 8, LRP0)))
        with pytest.raises(RuleError):
            bad.validate(net)
        ok = RuleAssignment(((0, 0, zb_rule()), (1, 8, epsilon_rule())))
        ok.validate(net)

    def test_default_rules_cover(self):
        net = tiny_cnn()
        ra = default_rules(net)
        ra.validate(net)
        assert ra.rule_for(len(net.layers) - 1).kind == "lrp0"


class TestInitOutputRelevance:
    def test_one_hot_score(self):
        r = init_output_relevance(np.array([1.5, -2.0, 3.0], dtype=np.float32), 1)
        assert_array_equal(r, [0.0, -2.0, 0.0])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            init_output_relevance(np.zeros(3, dtype=np.float32), 3)


class TestLrpStepLinear:
    def test_hand_example(self):
        """a=[1,2], W=[[1,1],[0,1]]: z=[3,2], shares [1,2]+[0,2] = [1,4]."""
        layer = LayerSpec.linear("f", 2, bias=False)
        params = {"f.weight": np.array([[1.0, 1.0], [0.0, 1.0]], dtype=np.float32)}
        a = np.array([1.0, 2.0], dtype=np.float32)
        r_above = np.array([3.0, 2.0], dtype=np.float32)
        r = lrp_step(layer, params, a, r_above, LRP0)
        assert_allclose(r, [1.0, 4.0], rtol=1e-6)

    @pytest.mark.parametrize(
        "rule,ref_rho,eps",
        [
            (LRP0, lambda w: w, 0.0),
            (epsilon_rule(0.05), lambda w: w, 0.05),
            (gamma_rule(0.25), lambda w: w + 0.25 * max(w, 0.0), 0.0),
            (gamma_rule(0.4, positive_only=True), lambda w: max(w, 0.0), 0.0),
        ],
    )
    def test_matches_ratio_form_oracle(self, rule, ref_rho, eps, rng):
        layer = LayerSpec.linear("f", 6)
        params = {
            "f.weight": rng.standard_normal((6, 9)).astype(np.float32),
            "f.bias": (rng.standard_normal(6) * 0.2).astype(np.float32),
        }
        a = np.abs(rng.standard_normal(9)).astype(np.float32)
        r_above = rng.standard_normal(6).astype(np.float32)
        got = lrp_step(layer, params, a, r_above, rule)
        want = naive_lrp_linear(
            a, params["f.weight"], params["f.bias"], r_above, ref_rho, eps
        )
        assert_allclose(got, want, rtol=5e-4, atol=1e-5)

    def test_bias_free_conservation_is_exact(self, rng):
        layer = LayerSpec.linear("f", 5, bias=False)
        params = {"f.weight": rng.standard_normal((5, 8)).astype(np.float32)}
        a = rng.standard_normal(8).astype(np.float32)
        r_above = rng.standard_normal(5).astype(np.float32)
        r = lrp_step(layer, params, a, r_above, LRP0)
        assert float(r.sum()) == pytest.approx(float(r_above.sum()), rel=1e-4)

    def test_bias_absorbs_its_share(self, rng):
        """Deficit equals sum_k s_k * (rho(b_k) + eps), nothing else."""
        rule = epsilon_rule(0.01)
        layer = LayerSpec.linear("f", 5)
        params = {
            "f.weight": rng.standard_normal((5, 8)).astype(np.float32),
            "f.bias": rng.standard_normal(5).astype(np.float32),
        }
        a = np.abs(rng.standard_normal(8)).astype(np.float32)
        r_above = rng.standard_normal(5).astype(np.float32)
        r = lrp_step(layer, params, a, r_above, rule)

        z = params["f.weight"].astype(np.float64) @ a + params["f.bias"] + 0.01
        s = r_above / z
        absorbed = float((s * (params["f.bias"] + 0.01)).sum())
        assert float(r_above.sum()) - float(r.sum()) == pytest.approx(
            absorbed, rel=1e-3, abs=1e-5
        )

    def test_gamma_zero_equals_lrp0(self, rng):
        layer = LayerSpec.linear("f", 4)
        params = {
            "f.weight": rng.standard_normal((4, 7)).astype(np.float32),
            "f.bias": rng.standard_normal(4).astype(np.float32),
        }
        a = np.abs(rng.standard_normal(7)).astype(np.float32)
        r_above = rng.standard_normal(4).astype(np.float32)
        got = lrp_step(layer, params, a, r_above, gamma_rule(0.0))
        want = lrp_step(layer, params, a, r_above, LRP0)
        assert_array_equal(got, want)

    def test_larger_eps_absorbs_more(self, rng):
        """With positive denominators, growing eps strictly shrinks shares.

        (The stabilizer is added to the denominator as-is, so the monotone
        statement is only meaningful when z > 0.)
        """
        layer = LayerSpec.linear("f", 5, bias=False)
        params = {
            "f.weight": np.abs(rng.standard_normal((5, 8))).astype(np.float32)
        }
        a = np.abs(rng.standard_normal(8)).astype(np.float32) + 0.1
        r_above = np.abs(rng.standard_normal(5)).astype(np.float32)
        totals = [
            float(np.abs(lrp_step(layer, params, a, r_above, epsilon_rule(e))).sum())
            for e in (1e-6, 0.1, 1.0)
        ]
        assert totals[0] > totals[1] > totals[2]


class TestLrpStepConv:
    def test_matches_unrolled_matrix_oracle(self, rng):
        """A conv's step equals the ratio form on its unrolled matrix."""
        in_shape = (2, 4, 4)
        weight = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        bias = (rng.standard_normal(3) * 0.2).astype(np.float32)
        layer = LayerSpec.conv("c", 3, 3, padding=1)
        params = {"c.weight": weight, "c.bias": bias}
        a = np.abs(rng.standard_normal(in_shape)).astype(np.float32)
        out_shape = conv2d(a, weight, bias, padding=1).shape
        r_above = rng.standard_normal(out_shape).astype(np.float32)

        for rule, ref_rho, eps in [
            (LRP0, lambda w: w, 0.0),
            (epsilon_rule(0.05), lambda w: w, 0.05),
            (gamma_rule(0.25), lambda w: w + 0.25 * max(w, 0.0), 0.0),
        ]:
            rw = np.vectorize(ref_rho)(weight.astype(np.float64))
            rb = np.vectorize(ref_rho)(bias.astype(np.float64))
            matrix, bias_flat, _ = unrolled_conv_matrix(rw, rb, in_shape, 1, 1)
            got = lrp_step(layer, params, a, r_above, rule)
            want = naive_lrp_linear(
                a.ravel(), matrix, bias_flat, r_above.ravel(), lambda w: w, eps
            ).reshape(in_shape)
            assert_allclose(got, want, rtol=1e-3, atol=1e-5)

    def test_strided_conv_conservation(self, rng):
        layer = LayerSpec.conv("c", 4, 2, stride=2, bias=False)
        params = {"c.weight": rng.standard_normal((4, 3, 2, 2)).astype(np.float32)}
        a = rng.standard_normal((3, 6, 6)).astype(np.float32)
        out_shape = conv2d(a, params["c.weight"], stride=2).shape
        r_above = rng.standard_normal(out_shape).astype(np.float32)
        r = lrp_step(layer, params, a, r_above, LRP0)
        assert float(r.sum()) == pytest.approx(float(r_above.sum()), rel=1e-3)

    def test_rejects_non_weighted_layers(self):
        with pytest.raises(RuleError):
            lrp_step(LayerSpec.relu(), {}, np.zeros(1), np.zeros(1), LRP0)
        with pytest.raises(RuleError):
            lrp_step(
                LayerSpec.linear("f", 1), {}, np.zeros(1), np.zeros(1), zb_rule()
            )


class TestDivisionGuard:
    def test_raises_when_relevance_would_vanish(self):
        layer = LayerSpec.linear("f", 1, bias=False)
        params = {"f.weight": np.array([[1.0, 1.0]], dtype=np.float32)}
        a = np.array([1.0, -1.0], dtype=np.float32)
        r_above = np.array([1.0], dtype=np.float32)
        with pytest.raises(DivisionGuardError):
            lrp_step(layer, params, a, r_above, LRP0)

    def test_zero_relevance_on_zero_denominator_is_fine(self):
        layer = LayerSpec.linear("f", 1, bias=False)
        params = {"f.weight": np.array([[1.0, 1.0]], dtype=np.float32)}
        a = np.array([1.0, -1.0], dtype=np.float32)
        r = lrp_step(layer, params, a, np.zeros(1, dtype=np.float32), LRP0)
        assert_array_equal(r, [0.0, 0.0])

    def test_epsilon_rule_falls_back_and_counts(self):
        # z = eps + a*w = 0.5 - 0.5 = 0 exactly: drop, count, no raise
        layer = LayerSpec.linear("f", 1, bias=False)
        params = {"f.weight": np.array([[-1.0]], dtype=np.float32)}
        a = np.array([0.5], dtype=np.float32)
        stats = {}
        r = lrp_step(
            layer, params, a, np.ones(1, dtype=np.float32),
            epsilon_rule(0.5), stats=stats,
        )
        assert_array_equal(r, [0.0])
        assert stats["dropped"] == 1


class TestZbRule:
    def test_matches_matrix_oracle(self, rng):
        in_shape = (2, 3, 3)
        weight = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        layer = LayerSpec.conv("c", 4, 3)  # padding 0: one output cell
        params = {"c.weight": weight, "c.bias": rng.standard_normal(4).astype(np.float32)}
        x = rng.uniform(-1.0, 2.0, in_shape).astype(np.float32)
        low = np.full(in_shape, -1.0, dtype=np.float32)
        high = np.full(in_shape, 2.0, dtype=np.float32)
        r_above = rng.standard_normal((4, 1, 1)).astype(np.float32)

        matrix, _, _ = unrolled_conv_matrix(
            weight.astype(np.float64), None, in_shape
        )
        want = naive_lrp_zb(
            x.ravel(), matrix, low.ravel(), high.ravel(), r_above.ravel()
        ).reshape(in_shape)
        got = lrp_zb_input(
            layer, params, x, r_above, PixelBounds(low=low, high=high)
        )
        assert_allclose(got, want, rtol=1e-3, atol=1e-5)

    def test_conservation_exact_by_construction(self, rng):
        in_shape = (3, 6, 6)
        weight = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        layer = LayerSpec.conv("c", 5, 3, padding=1)
        params = {"c.weight": weight, "c.bias": np.ones(5, dtype=np.float32)}
        x = rng.uniform(0.0, 1.0, in_shape).astype(np.float32)
        bounds = PixelBounds(
            low=np.zeros(in_shape, dtype=np.float32),
            high=np.ones(in_shape, dtype=np.float32),
        )
        r_above = rng.standard_normal((5, 6, 6)).astype(np.float32)
        r = lrp_zb_input(layer, params, x, r_above, bounds)
        assert float(r.sum()) == pytest.approx(float(r_above.sum()), rel=1e-3)

    def test_bounds_construction(self):
        b = PixelBounds.from_normalization(
            ((0.5, 0.5), (0.5, 0.25)), (2, 2, 2)
        )
        assert_allclose(b.low[0], -1.0)
        assert_allclose(b.high[0], 1.0)
        assert_allclose(b.low[1], -2.0)
        assert_allclose(b.high[1], 2.0)
        with pytest.raises(ShapeError):
            PixelBounds(low=np.ones((1, 2, 2)), high=np.zeros((1, 2, 2)))

    def test_requires_bounds_and_conv(self):
        layer = LayerSpec.conv("c", 1, 1)
        params = {"c.weight": np.ones((1, 1, 1, 1), dtype=np.float32),
                  "c.bias": np.zeros(1, dtype=np.float32)}
        x = np.ones((1, 2, 2), dtype=np.float32)
        with pytest.raises(RuleError):
            lrp_zb_input(layer, params, x, x, None)
        with pytest.raises(RuleError):
            lrp_zb_input(LayerSpec.linear("f", 1), params, x, x, None)


class TestLrpExplain:
    def test_boundary_structure(self):
        net = tiny_cnn(seed=5)
        x = np.random.default_rng(1).standard_normal(net.input_shape)
        trace = forward_trace(net, x.astype(np.float32))
        rmap = lrp_explain(trace, 2)
        n = len(net.layers)
        assert len(rmap.relevances) == n + 1
        for i in range(n):
            assert rmap.relevances[i].shape == trace.inputs[i].shape
        expected_top = np.zeros_like(trace.scores)
        expected_top[2] = trace.scores[2]
        assert_array_equal(rmap.output, expected_top)
        assert rmap.pixel.shape == net.input_shape

    def test_relu_passes_relevance_through(self):
        net = tiny_cnn(seed=5)
        x = np.random.default_rng(1).standard_normal(net.input_shape)
        trace = forward_trace(net, x.astype(np.float32))
        rmap = lrp_explain(trace, 0)
        # layer 7 is the relu after f1: boundary 7 equals boundary 8
        assert net.layers[7].kind == "relu"
        assert_array_equal(rmap.relevances[7], rmap.relevances[8])

    def test_maxpool_routes_to_winners_only(self):
        net = tiny_cnn(seed=5)
        x = np.random.default_rng(2).standard_normal(net.input_shape)
        trace = forward_trace(net, x.astype(np.float32))
        rmap = lrp_explain(trace, 1)
        pool_idx = net.pool_indices[0]
        below = rmap.relevances[pool_idx]
        above = rmap.relevances[pool_idx + 1]
        winners = trace.switches[pool_idx].indices.ravel()
        assert_array_equal(below.ravel()[winners], above.ravel())
        off = np.ones(below.size, dtype=bool)
        off[winners] = False
        assert_array_equal(below.ravel()[off], 0.0)

    def test_conservation_bias_free_lrp0(self):
        outer = np.random.default_rng(99)
        checked = 0
        while checked < 5:
            net = random_relu_cnn(outer, bias=False)
            x = outer.standard_normal(net.input_shape).astype(np.float32)
            trace = forward_trace(net, x)
            c = int(np.argmax(np.abs(trace.scores)))
            if abs(float(trace.scores[c])) < 1e-3:
                continue
            rules = RuleAssignment.uniform(len(net.layers), LRP0)
            rmap = lrp_explain(trace, c, rules)
            sums = rmap.boundary_sums()
            for s in sums:
                assert s == pytest.approx(sums[-1], rel=1e-3)
            checked += 1

    def test_gradient_times_input_equivalence(self):
        """LRP-0 on a bias-free relu net equals x * d(score_c)/dx.

        The gradient oracle is float64 central finite differences through an
        independent forward chain; seeds are fixed to keep pre-activations
        away from relu kinks.
        """
        from oracles import naive_linear, naive_maxpool2d

        def f64_forward(net, x64):
            h = x64
            for layer in net.layers:
                if layer.kind == "conv":
                    h = naive_conv2d(
                        h, net.params[layer.weight_name],
                        net.params[layer.bias_name] if layer.bias else None,
                        layer.stride, layer.padding,
                    )
                elif layer.kind == "relu":
                    h = np.maximum(h, 0)
                elif layer.kind == "maxpool":
                    h, _ = naive_maxpool2d(h, layer.size, layer.stride)
                elif layer.kind == "flatten":
                    h = h.reshape(-1)
                else:
                    h = naive_linear(
                        h, net.params[layer.weight_name],
                        net.params[layer.bias_name] if layer.bias else None,
                    )
            return h

        net = tiny_cnn(seed=8, bias=False, input_shape=(1, 6, 6))
        x = np.random.default_rng(3).standard_normal(net.input_shape)
        x = x.astype(np.float32)
        trace = forward_trace(net, x)
        c = int(np.argmax(np.abs(trace.scores)))
        rules = RuleAssignment.uniform(len(net.layers), LRP0)
        rmap = lrp_explain(trace, c, rules)

        x64 = x.astype(np.float64)
        delta = 1e-5
        grad = np.zeros_like(x64)
        for j in range(x64.size):
            hi = x64.copy().ravel()
            lo = x64.copy().ravel()
            hi[j] += delta
            lo[j] -= delta
            fh = f64_forward(net, hi.reshape(x64.shape))[c]
            fl = f64_forward(net, lo.reshape(x64.shape))[c]
            grad.ravel()[j] = (fh - fl) / (2 * delta)
        want = x64 * grad
        err = np.linalg.norm(rmap.pixel - want) / max(np.linalg.norm(want), 1e-12)
        assert err < 1e-3

    def test_composite_assignment_smoke(self):
        net = tiny_cnn(seed=6)
        x = np.random.default_rng(4).uniform(0, 1, net.input_shape)
        trace = forward_trace(net, x.astype(np.float32))
        rules = parse_rules("0=zb;1-5=gamma:0.25;6-7=epsilon:1e-6;8=lrp0")
        rmap = lrp_explain(trace, 3, rules)
        assert np.isfinite(rmap.pixel).all()
        assert rmap.pixel.shape == net.input_shape

    def test_explain_rejects_uncovered_assignment(self):
        net = tiny_cnn()
        x = np.zeros(net.input_shape, dtype=np.float32)
        trace = forward_trace(net, x)
        with pytest.raises(RuleError):
            lrp_explain(trace, 0, RuleAssignment(((0, 2, LRP0),)))
