"""Attention read as posterior-weighted scores, and its kernel-smoothing limit.

1. A multi-head attention layer computed the usual way and as H times the
   head-averaged posterior expectation of the value scores agree to rounding.
2. With keys drawn from a Gaussian, the attention average of f(k) converges
   to a kernel-smoothed expectation at the Monte Carlo rate N^(-1/2).

    python3 demos/attention_as_posterior.py
"""

import numpy as np

from svflow.attention import (AttentionHead, GaussianKeys, MhaLayer, attention_posterior,
                              kernel_limit_errors, kernel_smoothed_expectation, mha_forward)
from svflow.geometry import loglog_slope


def main():
    rng = np.random.default_rng(0)
    layer = MhaLayer([AttentionHead.random(rng, 16) for _ in range(4)])
    keys = rng.standard_normal((64, 16))
    xq = rng.standard_normal(16)
    a = mha_forward(layer, xq, keys, keys, "literal")
    b = mha_forward(layer, xq, keys, keys, "svflow")
    q = attention_posterior(layer.heads[0], xq, keys)
    print(f"literal vs posterior form: max |diff| = {np.max(np.abs(a - b)):.2e}")
    print(f"head 0 posterior: max weight {q.max():.3f}, entropy {-(q * np.log(q)).sum():.3f} nats")

    head = AttentionHead(0.5 * rng.standard_normal((2, 2)), np.eye(2))
    xq = rng.standard_normal(2)
    dist = GaussianKeys((0.0, 0.0), 1.0)
    f = lambda k: np.sin(k[:, 0]) + 0.5 * np.cos(k[:, 1])
    target = kernel_smoothed_expectation(head, xq, f, dist)
    sizes = [64, 256, 1024, 4096]
    errs = [kernel_limit_errors(head, xq, dist, f, n, range(200), target=target).mean() for n in sizes]
    print(f"\nkernel limit {target:.6f}")
    for n, e in zip(sizes, errs):
        print(f"  N = {n:>5}: mean |error| = {e:.4f}")
    print(f"  log-log slope {loglog_slope(sizes, errs):.3f} (Monte Carlo rate is -0.5)")


if __name__ == "__main__":
    main()
