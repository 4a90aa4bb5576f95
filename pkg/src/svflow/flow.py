"""Discretized score-based variational flows.

A :class:`FlowModel` holds L piecewise-constant parameter tables, one per
Euler step. At step ``l`` the state moves along

    v_l(x) = sum_z q_l(z | x) * grad_x log p_l(x | z),

the posterior-weighted average of the conditional scores. Two likelihood
families are supported (diagonal Gaussian, von Mises-Fisher) and two
posterior parameterizations:

``tied``
    q(z|x) = softmax_z log p(x|z): the posterior reuses the likelihood
    parameters, so it coincides with the Bayes posterior under the uniform
    prior.
``untied``
    q(z|x) = softmax_z (W_l x + b_l) with free logit parameters.

All batch functions take states of shape (..., d).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import distributions as dist
from .distributions import logsumexp
from .geometry import DegenerateNormError

FAMILIES = ("gaussian", "vmf")
POSTERIOR_MODES = ("tied", "untied")
MODES = ("euclidean", "spherical", "spherical_strict")


def softplus(a):
    return np.logaddexp(0.0, a)


def inv_softplus(k):
    k = np.asarray(k, dtype=float)
    return k + np.log(-np.expm1(-k))


@dataclass
class FlowModel:
    family: str
    dim: int
    num_components: int
    num_steps: int
    step_size: float
    theta: dict
    phi: dict = field(default_factory=dict)
    posterior_mode: str = "untied"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.posterior_mode not in POSTERIOR_MODES:
            raise ValueError(f"unknown posterior mode {self.posterior_mode!r}")
        if self.num_steps < 1 or self.step_size <= 0 or self.num_components < 1:
            raise ValueError("need L >= 1, h > 0 and |Z| >= 1")
        L, K, d = self.num_steps, self.num_components, self.dim
        shapes = {
            "gaussian": {"mean": (L, K, d), "log_std": (L, K, d)},
            "vmf": {"direction": (L, K, d), "kappa_raw": (L, K)},
        }[self.family]
        if self.posterior_mode == "untied":
            phi_shapes = {"weight": (L, K, d), "bias": (L, K)}
        else:
            phi_shapes = {}
        for name, table, expected in (("theta", self.theta, shapes), ("phi", self.phi, phi_shapes)):
            if set(table) != set(expected):
                raise ValueError(f"{name} keys {sorted(table)} != {sorted(expected)}")
            for key, shape in expected.items():
                table[key] = np.asarray(table[key], dtype=float)
                if table[key].shape != shape:
                    raise ValueError(f"{name}[{key!r}] has shape {table[key].shape}, expected {shape}")

    @property
    def horizon(self):
        return self.num_steps * self.step_size

    def copy(self):
        return FlowModel(
            self.family, self.dim, self.num_components, self.num_steps, self.step_size,
            {k: v.copy() for k, v in self.theta.items()},
            {k: v.copy() for k, v in self.phi.items()},
            self.posterior_mode,
        )

    def params(self):
        """Flat view {"theta.mean": array, ...} of every trainable table."""
        out = {f"theta.{k}": v for k, v in self.theta.items()}
        out.update({f"phi.{k}": v for k, v in self.phi.items()})
        return out

    # -- constructors ---------------------------------------------------------

    @classmethod
    def random_gaussian(cls, rng, dim, num_components, num_steps, step_size,
                        posterior_mode="untied", mean_scale=1.0, log_std_range=(-0.3, 0.3),
                        logit_scale=1.0):
        L, K, d = num_steps, num_components, dim
        theta = {
            "mean": mean_scale * rng.standard_normal((L, K, d)),
            "log_std": rng.uniform(*log_std_range, size=(L, K, d)),
        }
        phi = _random_phi(rng, L, K, d, logit_scale) if posterior_mode == "untied" else {}
        return cls("gaussian", d, K, L, step_size, theta, phi, posterior_mode)

    @classmethod
    def random_vmf(cls, rng, dim, num_components, num_steps, step_size,
                   posterior_mode="untied", kappa_range=(0.5, 5.0), logit_scale=1.0):
        L, K, d = num_steps, num_components, dim
        theta = {
            "direction": rng.standard_normal((L, K, d)),
            "kappa_raw": inv_softplus(rng.uniform(*kappa_range, size=(L, K))),
        }
        phi = _random_phi(rng, L, K, d, logit_scale) if posterior_mode == "untied" else {}
        return cls("vmf", d, K, L, step_size, theta, phi, posterior_mode)

    # -- per-step parameter views --------------------------------------------

    def component_params(self, step):
        """Per-component parameter objects at ``step`` (for inspection)."""
        _check_step(self, step)
        if self.family == "gaussian":
            return [dist.DiagGaussianParams(self.theta["mean"][step, z], self.theta["log_std"][step, z])
                    for z in range(self.num_components)]
        mu, kappa = vmf_mean_kappa(self, step)
        return [dist.VmfParams(mu[z], float(kappa[z])) for z in range(self.num_components)]

    # -- serialization --------------------------------------------------------

    def to_dict(self):
        L, K = self.num_steps, self.num_components
        theta = [[{k: _tolist(v[l, z]) for k, v in self.theta.items()} for z in range(K)] for l in range(L)]
        phi = [[{k: _tolist(v[l, z]) for k, v in self.phi.items()} for z in range(K)] for l in range(L)]
        return {
            "family": self.family,
            "dim": self.dim,
            "num_components": K,
            "L": L,
            "h": self.step_size,
            "posterior_mode": self.posterior_mode,
            "theta": theta,
            "phi": phi if self.phi else [],
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc):
        L, K = int(doc["L"]), int(doc["num_components"])
        theta = _stack_table(doc["theta"], L, K)
        phi = _stack_table(doc["phi"], L, K) if doc["phi"] else {}
        return cls(doc["family"], int(doc["dim"]), K, L, float(doc["h"]), theta, phi, doc["posterior_mode"])

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _random_phi(rng, L, K, d, scale):
    return {"weight": scale * rng.standard_normal((L, K, d)), "bias": scale * rng.standard_normal((L, K))}


def _tolist(a):
    a = np.asarray(a)
    return a.tolist() if a.ndim else float(a)


def _stack_table(rows, L, K):
    if len(rows) != L or any(len(r) != K for r in rows):
        raise ValueError("parameter table does not match L x |Z|")
    keys = rows[0][0].keys()
    return {k: np.array([[rows[l][z][k] for z in range(K)] for l in range(L)], dtype=float) for k in keys}


def _check_step(m, step):
    if not 0 <= step < m.num_steps:
        raise IndexError(f"step {step} outside [0, {m.num_steps})")


def vmf_mean_kappa(m, step):
    u = m.theta["direction"][step]
    mu = u / np.linalg.norm(u, axis=-1, keepdims=True)
    kappa = softplus(m.theta["kappa_raw"][step])
    return mu, kappa


# ---------------------------------------------------------------------------
# per-step quantities
# ---------------------------------------------------------------------------


@dataclass
class StepTerms:
    """Everything the forward and backward passes need at one step."""

    x: np.ndarray          # (B, d)
    cond: np.ndarray       # (B, K)  log p(x | z)
    score: np.ndarray      # (B, K, d)
    logits: np.ndarray     # (B, K)  g(x)
    log_q: np.ndarray      # (B, K)
    log_p: np.ndarray      # (B, K)  Bayes posterior under the uniform prior

    @property
    def q(self):
        return np.exp(self.log_q)

    @property
    def p(self):
        return np.exp(self.log_p)


def step_terms(m, step, x):
    """Conditional log-densities, scores and both posteriors at ``step``."""
    _check_step(m, step)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if m.family == "gaussian":
        mean = m.theta["mean"][step]
        inv_var = np.exp(-2.0 * m.theta["log_std"][step])
        diff = x[:, None, :] - mean[None]
        cond = np.sum(-0.5 * diff * diff * inv_var - m.theta["log_std"][step] - 0.5 * dist.LOG_2PI, axis=-1)
        score = -diff * inv_var
    else:
        mu, kappa = vmf_mean_kappa(m, step)
        log_c = dist.vmf_log_normalizer_array(m.dim, kappa)
        cond = log_c + kappa * (x @ mu.T)
        score = np.broadcast_to(kappa[:, None] * mu, (x.shape[0],) + mu.shape)
    if m.posterior_mode == "tied":
        logits = cond
    else:
        logits = x @ m.phi["weight"][step].T + m.phi["bias"][step]
    log_q = dist.log_softmax(logits)
    log_p = dist.log_softmax(cond)
    return StepTerms(x, cond, score, logits, log_q, log_p)


def _maybe_squeeze(x, out):
    return out[0] if np.ndim(x) == 1 else out


def posterior(m, step, x):
    """Variational posterior q_l(z | x)."""
    return _maybe_squeeze(x, step_terms(m, step, x).q)


def true_posterior(m, step, x):
    """Bayes posterior p_l(z | x) under the uniform prior."""
    return _maybe_squeeze(x, step_terms(m, step, x).p)


def vector_field(m, step, x):
    t = step_terms(m, step, x)
    return _maybe_squeeze(x, np.einsum("bk,bkd->bd", t.q, t.score))


def elbo(m, step, x):
    """E_q[log p(x|z)] - KL(q || uniform prior)."""
    t = step_terms(m, step, x)
    K = m.num_components
    out = np.sum(t.q * (t.cond - t.log_q), axis=-1) - np.log(K)
    return _maybe_squeeze(x, out)


def marginal_log_density(m, step, x, route="logsumexp"):
    """log p_l(x) under the uniform mixture.

    ``route="identity"`` evaluates ELBO + KL(q || p) instead of the direct
    log-sum-exp; the two agree to rounding.
    """
    t = step_terms(m, step, x)
    K = m.num_components
    if route == "logsumexp":
        out = logsumexp(t.cond, axis=-1) - np.log(K)
    elif route == "identity":
        out = (np.sum(t.q * (t.cond - t.log_q), axis=-1) - np.log(K)
               + dist.categorical_kl_logits(t.log_q, t.log_p))
    else:
        raise ValueError(f"unknown route {route!r}")
    return _maybe_squeeze(x, out)


def logit_gradients(m, step, terms):
    """grad_x g_z(x) for every component, shape (B, K, d)."""
    if m.posterior_mode == "tied":
        return terms.score
    W = m.phi["weight"][step]
    return np.broadcast_to(W, (terms.x.shape[0],) + W.shape)


def elbo_error_term(m, step, x):
    """E_q[ log(p(z|x)/q(z|x)) grad_x log q(z|x) ].

    The gap between grad_x ELBO and the vector field; zero when q = p.
    """
    t = step_terms(m, step, x)
    q = t.q
    grad_g = logit_gradients(m, step, t)
    mean_grad = np.einsum("bk,bkd->bd", q, grad_g)
    grad_log_q = grad_g - mean_grad[:, None, :]
    out = np.einsum("bk,bkd->bd", q * (t.log_p - t.log_q), grad_log_q)
    return _maybe_squeeze(x, out)


def _central_grad(f, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


@dataclass
class GradDecomposition:
    grad_elbo: np.ndarray
    field: np.ndarray
    error: np.ndarray

    @property
    def residual(self):
        return float(np.linalg.norm(self.grad_elbo - self.field - self.error))

    @property
    def relative_residual(self):
        return self.residual / max(float(np.linalg.norm(self.grad_elbo)), 1e-300)


def grad_decomposition(m, step, x, fd_step=1e-5):
    """Finite-difference grad_x ELBO next to the field and the error term."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("grad_decomposition works on a single state")
    g = _central_grad(lambda y: float(elbo(m, step, y)), x, fd_step)
    return GradDecomposition(g, vector_field(m, step, x), elbo_error_term(m, step, x))


# ---------------------------------------------------------------------------
# Euler integration
# ---------------------------------------------------------------------------


def euler_step(m, step, x, mode="euclidean"):
    """One explicit Euler step.

    ``spherical`` renormalizes x + h v without projecting v onto the tangent
    space (the residual + RMSNorm update, radius divided out);
    ``spherical_strict`` retracts the tangent-projected step instead.
    """
    x = np.asarray(x, dtype=float)
    v = vector_field(m, step, x)
    h = m.step_size
    if mode == "euclidean":
        return x + h * v
    if mode not in ("spherical", "spherical_strict"):
        raise ValueError(f"unknown mode {mode!r}")
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-10):
        raise ValueError("spherical steps need unit-norm states")
    if mode == "spherical_strict":
        v = v - np.sum(v * x, axis=-1, keepdims=True) * x
    y = x + h * v
    n = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateNormError("x + h v vanished during a spherical step")
    return y / n


@dataclass
class Trajectory:
    states: np.ndarray                 # (L+1, ..., d)
    posteriors: np.ndarray = None      # (L, ..., K)
    elbos: np.ndarray = None           # (L, ...)

    def __len__(self):
        return self.states.shape[0]

    @property
    def final(self):
        return self.states[-1]


def integrate(m, x0, mode="euclidean", record=False):
    x = np.asarray(x0, dtype=float)
    states = [x]
    posts, elbos = [], []
    for step in range(m.num_steps):
        if record:
            posts.append(posterior(m, step, x))
            elbos.append(elbo(m, step, x))
        x = euler_step(m, step, x, mode)
        states.append(x)
    if record:
        return Trajectory(np.stack(states), np.stack(posts), np.stack(elbos))
    return Trajectory(np.stack(states))


def with_zero_field(m):
    """Copy of ``m`` whose vector field vanishes everywhere (for tests)."""
    out = m.copy()
    if out.family == "gaussian":
        raise ValueError("a Gaussian score only vanishes at its mean")
    out.theta["kappa_raw"][:] = -800.0  # softplus underflows to 0
    return out
