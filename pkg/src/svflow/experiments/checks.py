"""Fast invariant and oracle suite behind ``svflow check``.

Each check returns (ok, detail).  The whole suite runs in well under a
minute and prints one line per check.
"""

import math
import time

import numpy as np

from .. import distributions as dist
from .. import flow, train
from ..attention import (AttentionHead, GaussianKeys, MhaLayer, attention_posterior, head_vmf_terms,
                         kernel_smoothed_expectation, load_balance_loss, mha_forward)
from ..data import make_sequence_task, prefix_shuffle
from ..geometry import loglog_slope, random_unit, relaxed_retraction_residual
from ..metrics import svflow_metrics


def _random_model(rng, family, mode="untied", d=2, K=4, L=3):
    if family == "gaussian":
        return flow.FlowModel.random_gaussian(rng, d, K, L, 0.1, mode, logit_scale=1.0)
    return flow.FlowModel.random_vmf(rng, d, K, L, 0.1, mode)


def check_elbo_bound(rng):
    worst, tied_gap = -np.inf, 0.0
    for i in range(200):
        family = "gaussian" if i % 2 else "vmf"
        d = int(rng.integers(2, 6))
        m = _random_model(rng, family, "untied", d=d)
        x = rng.standard_normal((4, d))
        if family == "vmf":
            x /= np.linalg.norm(x, axis=1, keepdims=True)
        step = int(rng.integers(m.num_steps))
        worst = max(worst, float(np.max(flow.elbo(m, step, x) - flow.marginal_log_density(m, step, x))))
        t = _random_model(rng, family, "tied", d=d)
        tied_gap = max(tied_gap, float(np.max(np.abs(flow.elbo(t, step, x)
                                                      - flow.marginal_log_density(t, step, x)))))
    return worst <= 1e-9 and tied_gap <= 1e-9, f"max elbo-logp {worst:.2e}, tied gap {tied_gap:.2e}"


def check_grad_decomposition(rng):
    worst = 0.0
    for _ in range(10):
        m = _random_model(rng, "gaussian", "untied")
        step = int(rng.integers(m.num_steps))
        worst = max(worst, flow.grad_decomposition(m, step, rng.standard_normal(2)).relative_residual)
    return worst <= 1e-5, f"max relative residual {worst:.2e}"


def check_training_gradients(rng):
    worst = 0.0
    for beta in (0.0, 0.1, 0.5):
        m = _random_model(rng, "gaussian", "untied", K=3, L=3)
        head = train.ClassifierHead(rng.standard_normal((2, 2)), rng.standard_normal(2))
        x, y = rng.standard_normal((5, 2)), rng.integers(0, 2, 5)
        obj = train.ObjectiveConfig(beta=beta)
        g = train.gradients(m, head, x, y, obj)
        for name, arr in (("mean", m.theta["mean"]), ("weight", m.phi["weight"])):
            fd = train.finite_diff_oracle(lambda _: train.j_hybrid(m, head, x, y, obj), arr)
            an = g.theta[name] if name in g.theta else g.phi[name]
            worst = max(worst, train.relative_error(an, fd))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def check_compiled_gradients(rng):
    from .._kernels import GradientKernel

    worst = 0.0
    for family, mode, posterior in (("gaussian", "euclidean", "untied"), ("vmf", "spherical", "tied")):
        m = _random_model(rng, family, posterior, d=3, L=4)
        head = train.ClassifierHead(rng.standard_normal((3, 2)), np.zeros(2))
        x = rng.standard_normal((16, 3))
        if family == "vmf":
            x /= np.linalg.norm(x, axis=1, keepdims=True)
        y = rng.integers(0, 2, 16)
        obj = train.ObjectiveConfig(beta=0.3, mode=mode)
        ref = train.gradients(m, head, x, y, obj).flat()
        fast = GradientKernel(m, obj).gradients(m, head, x, y).flat()
        worst = max(worst, max(train.relative_error(fast[k], ref[k]) for k in ref))
    return worst <= 1e-10, f"max relative error {worst:.2e}"


def check_retraction_order(rng):
    x = random_unit(rng, 16)
    direction = random_unit(rng, 16)
    scales = np.logspace(-4, 0, 9)
    res = [relaxed_retraction_residual(x, s * direction) for s in scales]
    slope = loglog_slope(scales, res)
    return 1.9 <= slope <= 2.1, f"slope {slope:.3f}"


def check_mha_equivalence(rng):
    worst = 0.0
    for _ in range(20):
        d, H = int(rng.integers(2, 17)), int(rng.integers(1, 5))
        layer = MhaLayer([AttentionHead.random(rng, d) for _ in range(H)])
        keys = rng.standard_normal((32, d))
        xq = rng.standard_normal(d)
        diff = mha_forward(layer, xq, keys, keys, "literal") - mha_forward(layer, xq, keys, keys, "svflow")
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst <= 1e-12, f"max abs difference {worst:.2e}"


def check_vmf_normalizer(rng):
    kappa = np.concatenate([np.logspace(-6, 5, 60), rng.uniform(0, 100, 20)])
    worst = 0.0
    for d in (3, 16, 64):
        vec = dist.vmf_log_normalizer_array(d, kappa)
        ref = np.array([dist.vmf_log_normalizer(d, k) for k in kappa])
        worst = max(worst, float(np.max(np.abs(vec - ref) / np.maximum(1.0, np.abs(ref)))))
    # d = 3 has the closed form log(kappa / (4 pi sinh kappa))
    k = np.array([0.5, 3.0, 40.0])
    closed = np.log(k) - np.log(4 * np.pi) - (k + np.log1p(-np.exp(-2 * k)) - np.log(2))
    cerr = float(np.max(np.abs(dist.vmf_log_normalizer_array(3, k) - closed)))
    return worst <= 1e-12 and cerr <= 1e-12, f"vectorized vs scalar {worst:.2e}, closed form {cerr:.2e}"


def check_metric_identity(rng):
    head = AttentionHead.random(rng, 8)
    X = rng.standard_normal((2, 20, 8))
    X *= np.sqrt(8) / np.linalg.norm(X, axis=-1, keepdims=True)
    q, cond, _ = head_vmf_terms(head, X, 4)
    svflow_metrics(q[:, 4:], cond[:, 4:], 8, check=True)
    return True, "logsumexp and ELBO+KL routes agree"


def check_zero_shuffle(rng):
    corpus = make_sequence_task(6, 32, 8, seed=int(rng.integers(1 << 30)), num_sequences=4)
    same = all(np.array_equal(prefix_shuffle(s, 0.0, seed=i).tokens, s.tokens)
               for i, s in enumerate(corpus.sequences))
    return same, "p = 0 leaves every sequence unchanged"


def check_balance_loss(rng):
    E = 6
    balanced = np.eye(E)[np.arange(4 * E) % E]
    collapsed = np.eye(E)[np.zeros(10, dtype=int)]
    lo, hi = load_balance_loss(balanced), load_balance_loss(collapsed)
    ok = math.isclose(lo, 1.0 / E, rel_tol=0, abs_tol=1e-15) and hi == 1.0
    return ok, f"balanced {lo:.6f} (1/E = {1 / E:.6f}), collapsed {hi}"


def check_kernel_limit(rng):
    head = AttentionHead(0.5 * rng.standard_normal((2, 2)), np.eye(2))
    xq = rng.standard_normal(2)
    keys = GaussianKeys((0.0, 0.0), 1.0)
    const = kernel_smoothed_expectation(head, xq, lambda k: np.full(len(k), 2.5), keys)
    k = keys.sample(rng, 64)
    q = attention_posterior(head, xq, k)
    return abs(const - 2.5) <= 1e-12 and abs(q.sum() - 1) <= 1e-12, f"constant expectation {const!r}"


CHECKS = [
    ("elbo_bound", check_elbo_bound),
    ("grad_decomposition", check_grad_decomposition),
    ("training_gradients", check_training_gradients),
    ("compiled_gradients", check_compiled_gradients),
    ("retraction_order", check_retraction_order),
    ("mha_equivalence", check_mha_equivalence),
    ("vmf_normalizer", check_vmf_normalizer),
    ("metric_identity", check_metric_identity),
    ("zero_shuffle", check_zero_shuffle),
    ("balance_loss", check_balance_loss),
    ("kernel_limit", check_kernel_limit),
]


def run_checks(seed=0, out=print):
    """Run every check; prints one line each and returns True when all pass."""
    all_ok = True
    for i, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name:<20} {detail}  ({time.perf_counter() - t0:.2f}s)")
    out("all checks passed" if all_ok else "some checks FAILED")
    return all_ok
