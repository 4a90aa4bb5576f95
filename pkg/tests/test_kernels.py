import math

import numpy as np
import pytest

from svflow import train
from svflow._kernels import GradientKernel
from svflow.flow import FlowModel
from svflow.train import ClassifierHead, ObjectiveConfig


def setup(rng, family, posterior, B, d=3, K=5, L=6):
    if family == "gaussian":
        m = FlowModel.random_gaussian(rng, d, K, L, 0.05, posterior, logit_scale=1.0)
        x = rng.standard_normal((B, d))
    else:
        m = FlowModel.random_vmf(rng, d, K, L, 0.1, posterior, kappa_range=(0.5, 30.0))
        x = rng.standard_normal((B, d))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    head = ClassifierHead(rng.standard_normal((d, 3)), rng.standard_normal(3))
    return m, head, x, rng.integers(0, 3, B)


@pytest.mark.parametrize("family,posterior,mode", [
    ("gaussian", "untied", "euclidean"), ("gaussian", "tied", "euclidean"),
    ("vmf", "untied", "spherical"), ("vmf", "tied", "spherical"),
])
@pytest.mark.parametrize("beta", [0.0, 0.25, math.inf])
def test_compiled_gradients_match_reference(rng, family, posterior, mode, beta):
    m, head, x, y = setup(rng, family, posterior, B=130)  # spans three 64-sample chunks
    obj = ObjectiveConfig(beta=beta, mode=mode)
    ref = train.gradients(m, head, x, y, obj)
    fast = GradientKernel(m, obj).gradients(m, head, x, y)
    rf, ff = ref.flat(), fast.flat()
    assert set(rf) == set(ff)
    for k in rf:
        assert train.relative_error(ff[k], rf[k]) <= 1e-12, k
    assert fast.j_align == pytest.approx(ref.j_align, rel=1e-12)
    if beta:
        assert fast.j_var == pytest.approx(ref.j_var, rel=1e-12, abs=1e-15)


def test_workspace_reuse_across_batch_sizes(rng):
    m, head, x, y = setup(rng, "gaussian", "untied", B=100)
    obj = ObjectiveConfig(beta=0.1)
    k = GradientKernel(m, obj)
    for B in (100, 7, 100):
        a = k.gradients(m, head, x[:B], y[:B]).flat()
        b = train.gradients(m, head, x[:B], y[:B], obj).flat()
        for key in a:
            assert train.relative_error(a[key], b[key]) <= 1e-12


def test_parameter_updates_are_seen(rng):
    m, head, x, y = setup(rng, "vmf", "untied", B=16)
    obj = ObjectiveConfig(beta=0.1, mode="spherical")
    k = GradientKernel(m, obj)
    k.gradients(m, head, x, y)
    m.theta["kappa_raw"] += 0.5
    a = k.gradients(m, head, x, y).flat()
    b = train.gradients(m, head, x, y, obj).flat()
    assert train.relative_error(a["theta.kappa_raw"], b["theta.kappa_raw"]) <= 1e-12
