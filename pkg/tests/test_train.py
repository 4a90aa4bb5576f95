import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svflow import train
from svflow.flow import FlowModel
from svflow.train import ClassifierHead, ObjectiveConfig

BETAS = [0.0, 0.1, 0.5, math.inf]


def instance(rng, family="gaussian", posterior="untied", d=2, K=3, L=3, B=5, C=2):
    if family == "gaussian":
        m = FlowModel.random_gaussian(rng, d, K, L, 0.2, posterior, logit_scale=1.0)
        x = rng.standard_normal((B, d))
    else:
        m = FlowModel.random_vmf(rng, d, K, L, 0.2, posterior)
        x = rng.standard_normal((B, d))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    head = ClassifierHead(rng.standard_normal((d, C)), rng.standard_normal(C))
    return m, head, x, rng.integers(0, C, B)


def fd_all(m, head, x, y, obj):
    params = dict(m.params())
    params.update(head.params())
    return {k: train.finite_diff_oracle(lambda _: train.j_hybrid(m, head, x, y, obj), v)
            for k, v in params.items()}


CASES = [("gaussian", "untied", "euclidean"), ("gaussian", "tied", "euclidean"),
         ("vmf", "untied", "spherical"), ("vmf", "tied", "spherical"), ("vmf", "untied", "euclidean")]


class TestAnalyticGradients:
    @pytest.mark.parametrize("family,posterior,mode", CASES)
    @pytest.mark.parametrize("beta", BETAS)
    def test_all_blocks_match_finite_differences(self, rng, family, posterior, mode, beta):
        m, head, x, y = instance(rng, family, posterior, d=3 if family == "vmf" else 2)
        obj = ObjectiveConfig(beta=beta, mode=mode)
        g = train.gradients(m, head, x, y, obj).flat()
        fd = fd_all(m, head, x, y, obj)
        for k in fd:
            assert train.relative_error(g[k], fd[k]) <= 1e-5, k

    @pytest.mark.parametrize("beta", [0.0, 0.1, 0.5])
    def test_grad_phi_and_grad_theta(self, rng, beta):
        m, head, x, y = instance(rng, K=4, L=4)
        obj = ObjectiveConfig(beta=beta)
        fd = fd_all(m, head, x, y, obj)
        phi = train.grad_phi(m, head, x, y, obj)
        theta = train.grad_theta(m, head, x, y, obj)
        for k in phi:
            assert train.relative_error(phi[k], fd[f"phi.{k}"]) <= 1e-5
        for k in theta:
            assert train.relative_error(theta[k], fd[f"theta.{k}"]) <= 1e-5

    def test_theta_split_sums_to_total(self, rng):
        m, head, x, y = instance(rng)
        total, flow_part, cons = train.grad_theta(m, head, x, y, ObjectiveConfig(beta=0.3), split=True)
        for k in total:
            np.testing.assert_allclose(flow_part[k] + cons[k], total[k], rtol=1e-14, atol=1e-15)

    def test_consistency_term_vanishes_without_regularizer(self, rng):
        m, head, x, y = instance(rng)
        _, _, cons = train.grad_theta(m, head, x, y, ObjectiveConfig(beta=0.0), split=True)
        for v in cons.values():
            assert np.all(v == 0.0)

    def test_weighted_steps(self, rng):
        m, head, x, y = instance(rng, L=4)
        obj = ObjectiveConfig(beta=0.5, lambda_weights=np.array([0.4, 1.6, 1.0, 1.0]))
        g = train.gradients(m, head, x, y, obj).flat()
        fd = fd_all(m, head, x, y, obj)
        for k in fd:
            assert train.relative_error(g[k], fd[k]) <= 1e-5

    def test_strict_mode_is_not_trainable(self, rng):
        m, head, x, y = instance(rng, "vmf", d=3)
        with pytest.raises(ValueError, match="spherical_strict"):
            train.gradients(m, head, x, y, ObjectiveConfig(mode="spherical_strict"))

    def test_grad_phi_requires_untied(self, rng):
        m, head, x, y = instance(rng, posterior="tied")
        with pytest.raises(ValueError, match="tied"):
            train.grad_phi(m, head, x, y)


class TestObjectives:
    def test_var_only_drops_alignment(self, rng):
        m, head, x, y = instance(rng)
        obj = ObjectiveConfig(beta=math.inf)
        assert train.j_hybrid(m, head, x, y, obj) == pytest.approx(train.j_var(m, train.forward(m, x).states, obj))

    def test_j_var_zero_when_tied(self, rng):
        m, head, x, y = instance(rng, posterior="tied")
        assert train.j_var(m, train.forward(m, x).states) == pytest.approx(0.0, abs=1e-14)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(beta=-1.0)
        with pytest.raises(ValueError):
            ObjectiveConfig(lambda_weights=np.array([2.0, 2.0]))

    def test_label_range_checked(self, rng):
        m, head, x, _ = instance(rng)
        with pytest.raises(ValueError):
            train.j_align(m, head, x, np.full(len(x), 5))


class TestAdam:
    def test_matches_reference_update(self):
        p = {"w": np.array([1.0, -2.0])}
        state = train.adam_init(p)
        g = {"w": np.array([0.5, 0.1])}
        train.adam_step(p, g, state, lr=0.1)
        # first bias-corrected step moves each coordinate by lr * sign(g)
        np.testing.assert_allclose(p["w"], [0.9, -2.1], rtol=1e-7)

    def test_key_mismatch(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(ValueError):
            train.adam_step(p, {"v": np.zeros(2)}, train.adam_init(p))

    @given(st.floats(1e-7, 1e-3))
    def test_finite_difference_oracle_exact_on_quadratic(self, h):
        a = np.array([[1.0, 2.0], [3.0, -1.0]])
        g = train.finite_diff_oracle(lambda p: float(np.sum(p**2)), a.copy(), h)
        np.testing.assert_allclose(g, 2 * a, rtol=1e-6)

    def test_finite_difference_step_range(self):
        with pytest.raises(ValueError):
            train.finite_diff_oracle(lambda p: 0.0, np.zeros(1), h=0.1)


class TestTrainRun:
    def _data(self, rng, n=128):
        x = rng.standard_normal((n, 2))
        return x, (x[:, 0] > 0).astype(int)

    def test_deterministic_and_logged(self, rng):
        x, y = self._data(rng)
        cfg = train.TrainConfig(num_components=3, num_steps=5, step_size=0.1, batch_size=32, iterations=20,
                                log_every=10, beta=0.1)
        _, _, h1 = train.train_run(cfg, x, y)
        _, _, h2 = train.train_run(cfg, x, y)
        assert h1.to_csv() == h2.to_csv()
        assert h1.to_csv().startswith("# svflow-lab schema v1\n")
        assert [r["step"] for r in h1.rows] == [0, 10, 20]
        usage = [h1.rows[-1][f"usage_{z}"] for z in range(3)]
        assert sum(usage) == pytest.approx(1.0)

    def test_learns_linear_split(self, rng):
        x, y = self._data(rng, 512)
        cfg = train.TrainConfig(num_components=4, num_steps=5, step_size=0.1, batch_size=64, iterations=300,
                                log_every=100)
        _, _, h = train.train_run(cfg, x, y)
        assert h.last("accuracy") >= 0.95

    def test_kernel_and_reference_paths_agree(self, rng):
        x, y = self._data(rng)
        cfg = train.TrainConfig(num_components=3, num_steps=4, step_size=0.1, batch_size=16, iterations=10,
                                log_every=5, beta=0.5)
        _, _, fast = train.train_run(cfg, x, y)
        cfg.use_kernels = False
        _, _, ref = train.train_run(cfg, x, y)
        for a, b in zip(fast.rows, ref.rows):
            assert a["j_hybrid"] == pytest.approx(b["j_hybrid"], rel=1e-10)

    def test_divergence_raises(self, rng):
        x, y = self._data(rng)
        cfg = train.TrainConfig(num_components=3, num_steps=3, batch_size=16, iterations=5, divergence_limit=1e-9)
        with pytest.raises(train.DivergenceError):
            train.train_run(cfg, x, y)
