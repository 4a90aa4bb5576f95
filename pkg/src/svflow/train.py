"""Hybrid objective and its analytic gradients.

    J_hybrid = J_align + beta * J_var

``J_align`` is the classifier negative log-likelihood at the terminal state
and ``J_var`` the step-weighted trajectory average of KL(q_l || p_l). The
gradients are assembled from advantage functions: per-component weights that
multiply the softmax Jacobian of the posterior logits.

* task advantage      A_l(z)   = h * ghat_{l+1}(delta) . s_l(z)
* self advantage      R_l(z)   = log q_l(z|x) - log p_l(z|x)
* future advantage    B_{k,l}(z) = h * ghat_{l+1}(gamma_k) . s_l(z)

``ghat`` is the adjoint with respect to the pre-normalization state
x + h v; in Euclidean mode it is the adjoint itself. The total advantage

    eta_l = c(A_l) + beta * (w_l c(R_l) + sum_k c(B_{k,l})),   c(f) = f - E_q f

drives dJ/dphi_l = E_batch sum_z q eta dg_z/dphi_l. Step weights
w_l = lambda_l / L come from the trajectory average in J_var; B_{k,l}
already carries w_k through gamma_k.

Everything here is vectorized numpy and serves as the reference
implementation. ``svflow._kernels`` holds a compiled copy of the same sweep
for long training runs.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import distributions as dist
from .flow import FlowModel, logit_gradients, step_terms, vmf_mean_kappa

SCHEMA_HEADER = "# svflow-lab schema v1"


class DivergenceError(RuntimeError):
    """Training produced a NaN or an exploding objective."""


@dataclass
class ClassifierHead:
    weight: np.ndarray   # (d, C)
    bias: np.ndarray     # (C,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("classifier parameters must be finite")

    @property
    def num_classes(self):
        return self.weight.shape[1]

    @classmethod
    def zeros(cls, dim, num_classes):
        return cls(np.zeros((dim, num_classes)), np.zeros(num_classes))

    def logits(self, x):
        return np.asarray(x) @ self.weight + self.bias

    def params(self):
        return {"head.weight": self.weight, "head.bias": self.bias}

    def copy(self):
        return ClassifierHead(self.weight.copy(), self.bias.copy())


@dataclass
class ObjectiveConfig:
    """beta = math.inf trains on J_var alone."""

    beta: float = 0.0
    lambda_weights: np.ndarray = None
    mode: str = "euclidean"

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if self.lambda_weights is not None:
            lam = np.asarray(self.lambda_weights, dtype=float)
            if np.any(lam < 0) or abs(lam.mean() - 1.0) > 1e-9:
                raise ValueError("lambda weights must be nonnegative with mean 1")
            self.lambda_weights = lam

    @property
    def var_only(self):
        return math.isinf(self.beta)

    @property
    def align_coef(self):
        return 0.0 if self.var_only else 1.0

    @property
    def var_coef(self):
        return 1.0 if self.var_only else self.beta

    def step_weights(self, num_steps):
        lam = np.ones(num_steps) if self.lambda_weights is None else self.lambda_weights
        if lam.shape != (num_steps,):
            raise ValueError("need one lambda weight per step")
        return lam / num_steps


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    terms: list          # StepTerms per step
    states: np.ndarray   # (L+1, B, d)
    pre_norm: np.ndarray # (L, B, d) x + h v before any renormalization


def forward(m, x0, mode="euclidean"):
    if mode not in ("euclidean", "spherical"):
        raise ValueError(f"gradients are available for euclidean/spherical modes, not {mode!r}")
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    states, pre, terms = [x], [], []
    for step in range(m.num_steps):
        t = step_terms(m, step, x)
        y = x + m.step_size * np.einsum("bk,bkd->bd", t.q, t.score)
        x = y if mode == "euclidean" else y / np.linalg.norm(y, axis=-1, keepdims=True)
        terms.append(t)
        pre.append(y)
        states.append(x)
    return ForwardCache(terms, np.stack(states), np.stack(pre))


def step_kl(cache):
    """KL(q_l || p_l) per step and sample, shape (L, B)."""
    return np.stack([dist.categorical_kl_logits(t.log_q, t.log_p) for t in cache.terms])


def j_var(m, states, cfg=None):
    """Weighted mean over samples and steps of KL(q_l(.|x_l) || p_l(.|x_l)).

    ``states`` has shape (L+1, B, d) or (L, B, d); only x_0..x_{L-1} are used.
    """
    cfg = cfg or ObjectiveConfig()
    w = cfg.step_weights(m.num_steps)
    total = 0.0
    for step in range(m.num_steps):
        t = step_terms(m, step, states[step])
        total = total + w[step] * dist.categorical_kl_logits(t.log_q, t.log_p)
    return float(np.mean(total))


def _check_labels(head, y):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= head.num_classes):
        raise ValueError("label out of range")
    return y


def align_loss(head, x_final, y):
    y = _check_labels(head, y)
    logp = dist.log_softmax(head.logits(x_final))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def j_align(m, head, x0, y, mode="euclidean"):
    """Mean -log softmax(W^T x_L + b)_y over the batch."""
    y = _check_labels(head, y)
    return align_loss(head, forward(m, x0, mode).states[-1], y)


def j_hybrid(m, head, x0, y, cfg):
    cache = forward(m, x0, cfg.mode)
    var = float(np.mean(cfg.step_weights(m.num_steps) @ step_kl(cache)))
    align = align_loss(head, cache.states[-1], y)
    return cfg.align_coef * align + cfg.var_coef * var


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _pre_norm_adjoint(m, cache, step, G, mode):
    """Adjoint of y_l = x_l + h v_l given the adjoint of x_{l+1}."""
    if mode == "euclidean":
        return G
    xn = cache.states[step + 1]
    ny = np.linalg.norm(cache.pre_norm[step], axis=-1, keepdims=True)
    return (G - xn * np.sum(xn * G, axis=-1, keepdims=True)) / ny


def _score_jacobian_t(m, step, t, u):
    """sum_z q_z (ds_z/dx)^T u for adjoints u of shape (B, d)."""
    if m.family == "vmf":
        return np.zeros_like(u)
    inv_var = np.exp(-2.0 * m.theta["log_std"][step])      # (K, d)
    return -np.einsum("bk,kd->bd", t.q, inv_var) * u


def _state_vjp(m, step, t, ghat, kl_weight):
    """dJ/dx_l from the pre-norm adjoint and the local KL weight.

    Returns (gx, e, f) where e = dJ/dg (logit adjoint) and f = dJ/dlog p(x|z)
    through the Bayes posterior.
    """
    h = m.step_size
    q, p = t.q, t.p
    adv = h * np.einsum("bd,bkd->bk", ghat, t.score) + kl_weight * (t.log_q - t.log_p)
    e = q * (adv - np.sum(q * adv, axis=-1, keepdims=True))
    f = kl_weight * (p - q)
    gx = ghat + h * _score_jacobian_t(m, step, t, ghat)
    gx = gx + np.einsum("bk,bkd->bd", e, logit_gradients(m, step, t))
    gx = gx + np.einsum("bk,bkd->bd", f, t.score)
    return gx, e, f


def _local_kl_grad(m, step, t):
    """grad_x KL(q || p) at one step, shape (B, d)."""
    q = t.q
    e = q * centered(t.log_q - t.log_p, q)
    gx = np.einsum("bk,bkd->bd", e, logit_gradients(m, step, t))
    return gx + np.einsum("bk,bkd->bd", t.p - q, t.score)


@dataclass
class ErrorSignals:
    """Per-sample adjoints along the trajectory.

    delta[l] = dJ_align/dx_l (l = 0..L), var[l] = sum_{k>=l} dJ_var^k/dx_l with
    the step weights folded in. ``gamma[k, l]`` (k = 0..L-1, l = 0..L) is the
    full per-step table, only filled when requested.
    """

    delta: np.ndarray
    var: np.ndarray
    gamma: np.ndarray = None


def head_gradient(head, x_final, y):
    """Per-sample dJ_align/dx_L and the softmax residual pi - onehot."""
    pi = dist.softmax(head.logits(x_final))
    resid = pi.copy()
    resid[np.arange(len(y)), y] -= 1.0
    return resid @ head.weight.T, resid


def _sweep(m, cache, G_final, kl_weights, mode):
    """Reverse accumulation; kl_weights[l] scales grad_x KL_l. Returns (L+1, B, d)."""
    out = np.zeros_like(cache.states)
    G = G_final
    out[-1] = G
    for step in range(m.num_steps - 1, -1, -1):
        t = cache.terms[step]
        ghat = _pre_norm_adjoint(m, cache, step, G, mode)
        G, _, _ = _state_vjp(m, step, t, ghat, 0.0)
        if kl_weights[step] != 0.0:
            G = G + kl_weights[step] * _local_kl_grad(m, step, t)
        out[step] = G
    return out


def backward_signals(m, head, x0, y, cfg=None, full=False, cache=None):
    cfg = cfg or ObjectiveConfig()
    y = _check_labels(head, y)
    cache = cache or forward(m, x0, cfg.mode)
    L = m.num_steps
    w = cfg.step_weights(L)
    zero = np.zeros_like(cache.states[-1])
    gL, _ = head_gradient(head, cache.states[-1], y)
    delta = _sweep(m, cache, gL, np.zeros(L), cfg.mode)
    var = _sweep(m, cache, zero, w, cfg.mode)
    gamma = None
    if full:
        gamma = np.zeros((L,) + cache.states.shape)
        for k in range(L):
            gamma[k] = _sweep_from_local(m, cache, k, w[k], cfg.mode)
    return ErrorSignals(delta, var, gamma)


def _sweep_from_local(m, cache, k, weight, mode):
    """gamma_{k, l} for l <= k: the weighted KL_k gradient pulled back to x_l."""
    out = np.zeros_like(cache.states)
    t = cache.terms[k]
    G = weight * _local_kl_grad(m, k, t)
    out[k] = G
    for step in range(k - 1, -1, -1):
        ghat = _pre_norm_adjoint(m, cache, step, G, mode)
        G, _, _ = _state_vjp(m, step, cache.terms[step], ghat, 0.0)
        out[step] = G
    return out


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------


def centered(values, q):
    return values - np.sum(q * values, axis=-1, keepdims=True)


@dataclass
class AdvantageSet:
    A: np.ndarray           # (B, K) task advantage
    R: np.ndarray           # (B, K) self variational advantage
    B: np.ndarray           # (B, K) summed future variational advantage
    eta: np.ndarray         # (B, K) total centered advantage
    B_per_step: np.ndarray = None   # (L, B, K); rows k <= l are zero


def advantages(m, signals, step, cache, cfg=None):
    cfg = cfg or ObjectiveConfig()
    t = cache.terms[step]
    h = m.step_size
    w = cfg.step_weights(m.num_steps)

    def adv_of(G):
        ghat = _pre_norm_adjoint(m, cache, step, G, cfg.mode)
        return h * np.einsum("bd,bkd->bk", ghat, t.score)

    q = t.q
    A = adv_of(signals.delta[step + 1])
    R = t.log_q - t.log_p
    Bsum = adv_of(signals.var[step + 1])
    eta = (cfg.align_coef * centered(A, q)
           + cfg.var_coef * (w[step] * centered(R, q) + centered(Bsum, q)))
    B_per = None
    if signals.gamma is not None:
        B_per = np.zeros((m.num_steps,) + A.shape)
        for k in range(step + 1, m.num_steps):
            B_per[k] = adv_of(signals.gamma[k, step + 1])
    return AdvantageSet(A, R, Bsum, eta, B_per)


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------


def _zeros_like_tables(m):
    return ({k: np.zeros_like(v) for k, v in m.theta.items()},
            {k: np.zeros_like(v) for k, v in m.phi.items()})


def _theta_grad_step(m, step, t, u, c, out):
    """Accumulate dJ/dtheta_l from score adjoints u (B,K,d) and log-density adjoints c (B,K)."""
    if m.family == "gaussian":
        inv_var = np.exp(-2.0 * m.theta["log_std"][step])
        s = t.score
        out["mean"][step] += np.sum(u * inv_var - c[..., None] * s, axis=0)
        sq = s * s / inv_var                                   # (x - m)^2 / sigma^2
        out["log_std"][step] += np.sum(-2.0 * u * s + c[..., None] * (sq - 1.0), axis=0)
        return
    mu, kappa = vmf_mean_kappa(m, step)
    dlogc = np.array([dist.vmf_log_normalizer_grad(m.dim, k) for k in kappa])
    x = t.x
    d_kappa = np.sum(np.einsum("bkd,kd->bk", u, mu) + c * (dlogc + x @ mu.T), axis=0)
    d_mu = kappa[:, None] * np.sum(u + c[..., None] * x[:, None, :], axis=0)
    raw = m.theta["direction"][step]
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    out["direction"][step] += (d_mu - mu * np.sum(mu * d_mu, axis=-1, keepdims=True)) / norm
    out["kappa_raw"][step] += d_kappa * expit(m.theta["kappa_raw"][step])


@dataclass
class Gradients:
    theta: dict
    phi: dict
    head: dict
    j_align: float
    j_var: float
    j_hybrid: float
    extras: dict = field(default_factory=dict)

    def flat(self):
        out = {f"theta.{k}": v for k, v in self.theta.items()}
        out.update({f"phi.{k}": v for k, v in self.phi.items()})
        out.update(self.head)
        return out


def gradients(m, head, x0, y, cfg=None, cache=None, signals=None):
    """Analytic gradients of J_hybrid for every parameter block (batch mean)."""
    cfg = cfg or ObjectiveConfig()
    y = _check_labels(head, y)
    cache = cache or forward(m, x0, cfg.mode)
    signals = signals or backward_signals(m, head, x0, y, cfg, cache=cache)
    L, h = m.num_steps, m.step_size
    B = cache.states.shape[1]
    w = cfg.step_weights(L)
    a, b = cfg.align_coef, cfg.var_coef
    d_theta, d_phi = _zeros_like_tables(m)
    for step in range(L):
        t = cache.terms[step]
        G = a * signals.delta[step + 1] + b * signals.var[step + 1]
        ghat = _pre_norm_adjoint(m, cache, step, G, cfg.mode)
        _, e, f = _state_vjp(m, step, t, ghat, b * w[step])
        if m.posterior_mode == "untied":
            d_phi["weight"][step] = e.T @ t.x / B
            d_phi["bias"][step] = e.sum(axis=0) / B
            c = f
        else:
            c = f + e
        u = h * t.q[..., None] * ghat[:, None, :]
        tmp = {k: np.zeros_like(v) for k, v in d_theta.items()}
        _theta_grad_step(m, step, t, u / B, c / B, tmp)
        for k in d_theta:
            d_theta[k][step] += tmp[k][step]
    xL = cache.states[-1]
    _, resid = head_gradient(head, xL, y)
    d_head = {"head.weight": a * xL.T @ resid / B, "head.bias": a * resid.sum(axis=0) / B}
    kl = step_kl(cache)
    jv = float(np.mean(w @ kl))
    ja = align_loss(head, xL, y)
    return Gradients(d_theta, d_phi, d_head, ja, jv, a * ja + b * jv,
                     extras={"kl": kl, "states": cache.states})


def grad_phi(m, head, x0, y, cfg=None):
    """dJ_hybrid/dphi as the q * eta weighted logit gradient (untied only)."""
    if m.posterior_mode != "untied":
        raise ValueError("tied posteriors share theta; use grad_theta")
    cfg = cfg or ObjectiveConfig()
    cache = forward(m, x0, cfg.mode)
    signals = backward_signals(m, head, x0, y, cfg, cache=cache)
    B = cache.states.shape[1]
    out = {k: np.zeros_like(v) for k, v in m.phi.items()}
    for step in range(m.num_steps):
        t = cache.terms[step]
        adv = advantages(m, signals, step, cache, cfg)
        weight = t.q * adv.eta
        out["weight"][step] = weight.T @ t.x / B
        out["bias"][step] = weight.sum(axis=0) / B
    return out


def grad_theta(m, head, x0, y, cfg=None, split=False):
    """Flow-path term plus the consistency term beta * sum_z (p - q) dlog p(x|z)/dtheta.

    With ``split=True`` returns (total, flow_path, consistency). For tied
    posteriors the posterior path through the shared parameters is part of
    ``flow_path``.
    """
    cfg = cfg or ObjectiveConfig()
    cache = forward(m, x0, cfg.mode)
    signals = backward_signals(m, head, x0, y, cfg, cache=cache)
    L, h = m.num_steps, m.step_size
    B = cache.states.shape[1]
    w = cfg.step_weights(L)
    a, b = cfg.align_coef, cfg.var_coef
    flow_part, _ = _zeros_like_tables(m)
    cons_part, _ = _zeros_like_tables(m)
    for step in range(L):
        t = cache.terms[step]
        G = a * signals.delta[step + 1] + b * signals.var[step + 1]
        ghat = _pre_norm_adjoint(m, cache, step, G, cfg.mode)
        u = h * t.q[..., None] * ghat[:, None, :] / B
        zero_c = np.zeros_like(t.log_q)
        if m.posterior_mode == "tied":
            adv = advantages(m, signals, step, cache, cfg)
            zero_c = t.q * adv.eta
        _theta_grad_step(m, step, t, u, zero_c / B, flow_part)
        c = b * w[step] * (t.p - t.q) / B
        _theta_grad_step(m, step, t, np.zeros_like(u), c, cons_part)
    total = {k: flow_part[k] + cons_part[k] for k in flow_part}
    if split:
        return total, flow_part, cons_part
    return total


# ---------------------------------------------------------------------------
# finite differences and optimizer
# ---------------------------------------------------------------------------


def finite_diff_oracle(loss, params, h=1e-5):
    """Central differences of ``loss(params)`` for every entry of ``params``.

    ``params`` is modified in place during evaluation and restored.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("finite-difference step must lie in [1e-7, 1e-3]")
    grad = np.zeros_like(params)
    flat = params.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss(params)
        flat[i] = old - h
        down = loss(params)
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(b), np.linalg.norm(a), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params):
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update on a dict of arrays."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient keys differ")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: {g.shape} vs {p.shape}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        p -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    family: str = "gaussian"
    dim: int = 2
    num_components: int = 8
    num_steps: int = 100
    step_size: float = 0.01
    posterior_mode: str = "untied"
    num_classes: int = 2
    beta: float = 0.0
    mode: str = "euclidean"
    batch_size: int = 512
    iterations: int = 10_000
    lr: float = 0.01
    b1: float = 0.9
    b2: float = 0.999
    seed: int = 0
    log_every: int = 100
    init_mean_scale: float = 1.0
    init_logit_scale: float = 0.1
    init_kappa_range: tuple = (1.0, 5.0)
    divergence_limit: float = 1e6
    use_kernels: bool = True


@dataclass
class History:
    rows: list = field(default_factory=list)
    num_components: int = 0

    def columns(self):
        base = ["step", "j_align", "j_var", "j_hybrid", "accuracy", "max_component_usage"]
        return base + [f"usage_{z}" for z in range(self.num_components)]

    def to_csv(self):
        buf = io.StringIO()
        buf.write(SCHEMA_HEADER + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for row in self.rows:
            writer.writerow([row["step"]] + [repr(float(row[c])) for c in self.columns()[1:]])
        return buf.getvalue()

    def last(self, key):
        return self.rows[-1][key]


def component_usage(m, cache):
    """E over samples and steps of q_l(z | x_l), shape (K,)."""
    return np.mean([t.q.mean(axis=0) for t in cache.terms], axis=0)


def init_model(cfg, rng):
    if cfg.family == "gaussian":
        return FlowModel.random_gaussian(rng, cfg.dim, cfg.num_components, cfg.num_steps, cfg.step_size,
                                         cfg.posterior_mode, mean_scale=cfg.init_mean_scale,
                                         logit_scale=cfg.init_logit_scale)
    return FlowModel.random_vmf(rng, cfg.dim, cfg.num_components, cfg.num_steps, cfg.step_size,
                                cfg.posterior_mode, kappa_range=cfg.init_kappa_range,
                                logit_scale=cfg.init_logit_scale)


def evaluate(m, head, x0, y, obj):
    """Objective values, accuracy and component usage on a fixed batch."""
    cache = forward(m, x0, obj.mode)
    w = obj.step_weights(m.num_steps)
    jv = float(np.mean(w @ step_kl(cache)))
    ja = align_loss(head, cache.states[-1], y)
    acc = float(np.mean(np.argmax(head.logits(cache.states[-1]), axis=-1) == y))
    usage = component_usage(m, cache)
    return {"j_align": ja, "j_var": jv, "j_hybrid": obj.align_coef * ja + obj.var_coef * jv,
            "accuracy": acc, "usage": usage, "cache": cache}


def train_run(cfg, data_x, data_y, eval_x=None, eval_y=None, callback=None):
    """Adam on J_hybrid with seeded minibatches; returns (model, head, history).

    Minibatches are drawn uniformly with replacement from (data_x, data_y).
    History rows are logged every ``cfg.log_every`` iterations on the
    evaluation set (defaults to the training set).
    """
    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg, rng)
    head = ClassifierHead(0.1 * rng.standard_normal((cfg.dim, cfg.num_classes)), np.zeros(cfg.num_classes))
    obj = ObjectiveConfig(beta=cfg.beta, mode=cfg.mode)
    eval_x = data_x if eval_x is None else eval_x
    eval_y = data_y if eval_y is None else eval_y
    params = dict(model.params())
    params.update(head.params())
    state = adam_init(params)
    history = History(num_components=cfg.num_components)
    kernel = None
    if cfg.use_kernels:
        from . import _kernels
        kernel = _kernels.GradientKernel(model, obj)
    n = len(data_x)
    for it in range(cfg.iterations + 1):
        if it % cfg.log_every == 0 or it == cfg.iterations:
            ev = evaluate(model, head, eval_x, eval_y, obj)
            row = {"step": it, "j_align": ev["j_align"], "j_var": ev["j_var"], "j_hybrid": ev["j_hybrid"],
                   "accuracy": ev["accuracy"], "max_component_usage": float(ev["usage"].max())}
            row.update({f"usage_{z}": float(u) for z, u in enumerate(ev["usage"])})
            history.rows.append(row)
            if callback is not None:
                callback(it, model, head, row)
        if it == cfg.iterations:
            break
        idx = rng.integers(0, n, size=cfg.batch_size)
        xb, yb = data_x[idx], data_y[idx]
        if kernel is not None:
            g = kernel.gradients(model, head, xb, yb)
        else:
            g = gradients(model, head, xb, yb, obj)
        if not math.isfinite(g.j_hybrid) or abs(g.j_hybrid) > cfg.divergence_limit:
            raise DivergenceError(f"objective diverged at iteration {it}: J = {g.j_hybrid!r}")
        adam_step(params, g.flat(), state, cfg.lr, cfg.b1, cfg.b2)
    return model, head, history
