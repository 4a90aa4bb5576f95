import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svflow import distributions as dist
from svflow.attention import (AttentionHead, Expert, GaussianKeys, MhaLayer, MoeLayer, QuadratureError,
                              ToyTransformer, attention_posterior, component_scores, head_field, head_literal,
                              head_vmf_terms, kernel_limit_error, kernel_limit_errors,
                              kernel_smoothed_expectation, load_balance_loss, mean_direction_decompose,
                              mha_forward, moe_forward, transformer_layer, window_keys)
from svflow.geometry import loglog_slope
from svflow.metrics import svflow_metrics

seeds = st.integers(0, 2**32 - 1)


class TestHead:
    @given(seeds, st.integers(1, 8), st.integers(2, 32))
    def test_literal_and_svflow_forms_agree(self, seed, H, d):
        rng = np.random.default_rng(seed)
        layer = MhaLayer([AttentionHead.random(rng, d) for _ in range(H)])
        keys = rng.standard_normal((64, d))
        values = rng.standard_normal((64, d))
        xq = rng.standard_normal(d)
        np.testing.assert_allclose(mha_forward(layer, xq, keys, values, "svflow"),
                                   mha_forward(layer, xq, keys, values, "literal"), atol=1e-12, rtol=0)

    def test_field_is_posterior_expectation_of_scores(self, rng):
        head = AttentionHead.random(rng, 4)
        keys, values = rng.standard_normal((10, 4)), rng.standard_normal((10, 4))
        xq = rng.standard_normal(4)
        q = attention_posterior(head, xq, keys)
        np.testing.assert_allclose(head_field(head, xq, keys, values), q @ component_scores(head, values),
                                   rtol=1e-14)
        np.testing.assert_allclose(head_literal(head, xq, keys, values), head_field(head, xq, keys, values),
                                   rtol=1e-12)

    def test_posterior_is_vmf_posterior(self, rng):
        # logits x^T QK k equal kappa mu^T x_hat with kappa mu = |x| QK k; normalizers are shared
        # only when the kappas agree, so compare against softmax of the raw logits
        head = AttentionHead.random(rng, 3)
        keys = rng.standard_normal((6, 3))
        xq = rng.standard_normal(3)
        w = np.linalg.norm(xq) * keys @ head.QK.T
        logits = w @ (xq / np.linalg.norm(xq))
        np.testing.assert_allclose(attention_posterior(head, xq, keys), dist.softmax(logits), rtol=1e-13)

    def test_mean_direction_decompose(self):
        u, k = mean_direction_decompose(np.array([3.0, 4.0]))
        np.testing.assert_allclose(u, [0.6, 0.8])
        assert k == 5.0
        u, k = mean_direction_decompose(np.zeros(3))
        np.testing.assert_array_equal(u, [1.0, 0.0, 0.0])
        assert k == 0.0

    def test_validation(self, rng):
        with pytest.raises(ValueError, match="square"):
            AttentionHead(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError, match="probability"):
            MhaLayer([AttentionHead.random(rng, 2)] * 2, np.array([0.7, 0.7]))
        with pytest.raises(ValueError):
            head_field(AttentionHead.random(rng, 2), np.ones(2), np.ones((3, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError, match="form"):
            mha_forward(MhaLayer([AttentionHead.random(rng, 2)]), np.ones(2), np.ones((2, 2)), np.ones((2, 2)), "x")

    def test_single_key_gets_all_mass(self, rng):
        head = AttentionHead.random(rng, 3)
        np.testing.assert_array_equal(attention_posterior(head, rng.standard_normal(3), rng.standard_normal(3)), [1.0])


class TestMoe:
    def test_routing_weighted_expert_sum(self, rng):
        layer = MoeLayer.random(rng, 4, 3)
        x = rng.standard_normal((5, 4))
        out, g = moe_forward(layer, x)
        manual = sum(g[:, i:i + 1] * e(x) for i, e in enumerate(layer.experts))
        np.testing.assert_allclose(out, manual, rtol=1e-13)
        np.testing.assert_allclose(g.sum(-1), 1.0)

    def test_ema_centering(self, rng):
        layer = MoeLayer.random(rng, 3, 2, ema_center=True)
        x = rng.standard_normal((50, 3))
        raw = np.stack([e(x) for e in layer.experts], axis=-2).mean(0)
        out, g = moe_forward(layer, x, update_ema=True)
        np.testing.assert_allclose(layer.ema_means, 0.01 * raw, rtol=1e-12)
        # first call centers with the zero initial means
        np.testing.assert_allclose(out, moe_forward(MoeLayer.random(np.random.default_rng(0), 3, 2), x)[0] * 0
                                   + np.einsum("be,bed->bd", g, np.stack([e(x) for e in layer.experts], -2)),
                                   rtol=1e-12)
        before = layer.ema_means.copy()
        moe_forward(layer, x, update_ema=False)
        np.testing.assert_array_equal(layer.ema_means, before)

    def test_shape_validation(self, rng):
        with pytest.raises(ValueError, match="inconsistent"):
            Expert(np.zeros((4, 2)), np.zeros(3), np.zeros((2, 4)), np.zeros(2))
        with pytest.raises(ValueError, match="gate"):
            MoeLayer([Expert.random(rng, 2)], np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError, match="decay"):
            MoeLayer([Expert.random(rng, 2)], np.zeros((1, 2)), np.zeros(1), ema_decay=1.0)


class TestBalanceLoss:
    @given(st.integers(2, 16), st.integers(1, 64), seeds)
    def test_hard_routing_bounds(self, E, B, seed):
        rng = np.random.default_rng(seed)
        R = np.eye(E)[rng.integers(0, E, B)]
        loss = load_balance_loss(R)
        assert 1.0 / E - 1e-15 <= loss <= 1.0 + 1e-15

    @given(st.integers(2, 16), st.integers(1, 64), seeds)
    def test_soft_routing_upper_bound(self, E, B, seed):
        rng = np.random.default_rng(seed)
        R = dist.softmax(2 * rng.standard_normal((B, E)))
        assert 0.0 < load_balance_loss(R) <= 1.0 + 1e-15

    def test_soft_routing_can_fall_below_one_over_e(self):
        R = np.array([[0.4, 0.3, 0.3], [0.0, 0.5, 0.5]])
        assert load_balance_loss(R) == pytest.approx(0.3)

    def test_equalities(self):
        E = 5
        assert load_balance_loss(np.eye(E)) == pytest.approx(1.0 / E, abs=1e-15)
        assert load_balance_loss(np.tile(np.eye(E)[2], (9, 1))) == 1.0

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            load_balance_loss(np.zeros((0, 3)))


class TestTransformerLayer:
    def test_output_on_radius_sphere(self, rng):
        d = 8
        x = rng.standard_normal(d)
        keys = rng.standard_normal((5, d))
        for layer in (MhaLayer([AttentionHead.random(rng, d)]), MoeLayer.random(rng, d, 3), lambda v: 0.1 * v):
            y = transformer_layer(x, layer, keys, keys)
            assert np.linalg.norm(y) == pytest.approx(np.sqrt(d), rel=1e-14)

    def test_unsupported_layer(self):
        with pytest.raises(TypeError):
            transformer_layer(np.ones(2), 3)


class TestKernelLimit:
    def _setup(self, rng):
        head = AttentionHead(0.5 * rng.standard_normal((2, 2)), np.eye(2))
        return head, rng.standard_normal(2), GaussianKeys((0.0, 0.0), 1.0)

    def test_quadrature_matches_closed_form(self, rng):
        # with Gaussian keys the tilted density is N(mu + s^2 QK^T x, s^2 I), so E[k] is known
        head, xq, keys = self._setup(rng)
        shift = head.QK.T @ xq
        for i in range(2):
            val = kernel_smoothed_expectation(head, xq, lambda k, i=i: k[:, i], keys)
            assert val == pytest.approx(shift[i], rel=1e-10, abs=1e-12)

    def test_error_shrinks_like_inverse_sqrt(self, rng):
        head, xq, keys = self._setup(rng)
        f = lambda k: np.sin(k[:, 0]) + 0.5 * np.cos(k[:, 1])
        target = kernel_smoothed_expectation(head, xq, f, keys)
        sizes = [64, 256, 1024, 4096]
        errs = [np.mean(kernel_limit_errors(head, xq, keys, f, n, range(100), target=target)) for n in sizes]
        assert abs(loglog_slope(sizes, errs) + 0.5) <= 0.15
        assert kernel_limit_error(head, xq, keys, f, 64, seeds=range(100)) == pytest.approx(errs[0])

    def test_unconverged_quadrature_raises(self, rng):
        head = AttentionHead(8.0 * np.eye(2), np.eye(2))
        with pytest.raises(QuadratureError):
            kernel_smoothed_expectation(head, np.array([3.0, 3.0]), lambda k: np.sin(3 * k[:, 0]),
                                        GaussianKeys((0.0, 0.0), 1.0), resolution=6)

    def test_dimension_limit(self, rng):
        with pytest.raises(ValueError):
            kernel_smoothed_expectation(AttentionHead.random(rng, 4), np.ones(4), lambda k: k[:, 0],
                                        GaussianKeys((0.0,) * 4))


class TestToyTransformer:
    def _model(self, rng, kinds=("mha", "moe", "mha")):
        return ToyTransformer.random(rng, 8, 5, 4, list(kinds), num_heads=2, num_experts=3)

    def test_window_keys_layout(self, rng):
        X = rng.standard_normal((2, 6, 3))
        K, mask = window_keys(X, 3)
        assert K.shape == (2, 6, 3, 3)
        np.testing.assert_array_equal(K[:, 4, 2], X[:, 3])  # last slot = previous token
        np.testing.assert_array_equal(K[:, 4, 0], X[:, 1])
        assert not mask[0].any() and mask[1].tolist() == [False, False, True]

    def test_states_on_sphere_and_causal(self, rng):
        m = self._model(rng)
        emb = rng.standard_normal((2, 10, 8))
        emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
        rec = m.forward(emb)
        for X in rec.states:
            np.testing.assert_allclose(np.linalg.norm(X, axis=-1), np.sqrt(8), rtol=1e-14)
        changed = emb.copy()
        changed[:, 7] = emb[:, 2]
        later = m.forward(changed)
        np.testing.assert_array_equal(later.logits[:, :7], rec.logits[:, :7])
        np.testing.assert_allclose(rec.probs.sum(-1), 1.0)

    def test_sequence_attention_matches_single_query(self, rng):
        m = self._model(rng, ("mha",))
        emb = rng.standard_normal((1, 9, 8))
        emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
        rec = m.forward(emb)
        X = rec.states[0]
        n = 6
        keys = X[0, n - 4:n]
        y = transformer_layer(X[0, n], m.layers[0], keys, keys)
        np.testing.assert_allclose(rec.states[1][0, n], y, rtol=1e-12)

    def test_json_roundtrip(self, rng):
        m = self._model(rng)
        back = ToyTransformer.from_json(m.to_json())
        emb = rng.standard_normal((1, 5, 8))
        emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
        np.testing.assert_array_equal(back.forward(emb).logits, m.forward(emb).logits)

    def test_rejects_unknown_layer_kind(self, rng):
        with pytest.raises(ValueError, match="kind"):
            ToyTransformer.random(rng, 4, 3, 2, ["conv"])

    def test_head_vmf_terms_satisfy_metric_identity(self, rng):
        m = self._model(rng, ("mha",))
        emb = rng.standard_normal((2, 12, 8))
        emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
        X = m.forward(emb).states[0]
        q, cond, mask = head_vmf_terms(m.layers[0].heads[0], X, 4)
        rec = m.forward(emb)
        np.testing.assert_allclose(q[:, 4:], rec.attention[0][0][:, 4:], rtol=1e-12, atol=1e-15)
        svflow_metrics(q[:, 4:], cond[:, 4:], 8, check=True)
