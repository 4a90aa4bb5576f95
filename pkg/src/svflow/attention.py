"""Attention and mixture-of-experts layers read as posterior-weighted scores.

A single head with merged matrices QK = W_q W_k^T and OV = W_o W_v^T computes
softmax_z(x_q^T QK k_z) OV v_z.  Read as inference, the softmax weight is the
posterior over keys of a vMF mixture with kappa_z mu_z = QK k_z, and OV v_z is
the score carried by component z.  The "literal" and "svflow" forms below
compute the same layer along the two readings and must agree to rounding.

The ToyTransformer stacks such layers with a residual update followed by RMS
normalization, which is one spherical Euler step per layer.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.polynomial.hermite_e import hermegauss

from . import distributions as dist
from .geometry import rms_normalize

EMA_DECAY = 0.99


# ---------------------------------------------------------------------------
# heads and layers
# ---------------------------------------------------------------------------


def _square(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


@dataclass
class AttentionHead:
    QK: np.ndarray
    OV: np.ndarray

    def __post_init__(self):
        self.QK = _square(self.QK, "QK")
        self.OV = _square(self.OV, "OV")
        if self.QK.shape != self.OV.shape:
            raise ValueError("QK and OV must have the same shape")

    @property
    def dim(self):
        return self.QK.shape[0]

    @classmethod
    def random(cls, rng, d, scale=None):
        scale = 1.0 / np.sqrt(d) if scale is None else scale
        return cls(scale * rng.standard_normal((d, d)), scale * rng.standard_normal((d, d)))


@dataclass
class MhaLayer:
    heads: list
    head_weights: np.ndarray = None

    def __post_init__(self):
        if not self.heads:
            raise ValueError("an attention layer needs at least one head")
        H = len(self.heads)
        if self.head_weights is None:
            self.head_weights = np.full(H, 1.0 / H)
        self.head_weights = np.asarray(self.head_weights, dtype=float)
        if self.head_weights.shape != (H,):
            raise ValueError(f"expected {H} head weights")
        if np.any(self.head_weights < 0) or abs(self.head_weights.sum() - 1.0) > 1e-12:
            raise ValueError("head weights must form a probability vector")
        dims = {h.dim for h in self.heads}
        if len(dims) != 1:
            raise ValueError("all heads must share the model dimension")

    @property
    def num_heads(self):
        return len(self.heads)

    @property
    def dim(self):
        return self.heads[0].dim


def mean_direction_decompose(w):
    """Split a score vector into (unit direction, concentration).

    The zero vector maps to (e_1, 0): with zero concentration the direction
    does not enter the density or its score.
    """
    w = np.asarray(w, dtype=float)
    n = float(np.linalg.norm(w))
    if n == 0.0:
        e1 = np.zeros_like(w)
        e1[0] = 1.0
        return e1, 0.0
    return w / n, n


def _stack(vectors, name):
    a = np.asarray(vectors, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[0] == 0:
        raise ValueError(f"{name} must be nonempty")
    return a


def attention_logits(head, x_q, keys):
    """x_q^T QK k_z for every key."""
    keys = _stack(keys, "keys")
    return keys @ (head.QK.T @ np.asarray(x_q, dtype=float))


def attention_posterior(head, x_q, keys):
    """q(z | x_q) = softmax over keys of x_q^T QK k_z."""
    return dist.softmax(attention_logits(head, x_q, keys))


def component_scores(head, values):
    """Rows OV v_z: the score vector carried by each value."""
    return _stack(values, "values") @ head.OV.T


def head_field(head, x_q, keys, values):
    """Posterior-weighted average of the component scores."""
    keys = _stack(keys, "keys")
    values = _stack(values, "values")
    if len(keys) != len(values):
        raise ValueError(f"{len(keys)} keys but {len(values)} values")
    return attention_posterior(head, x_q, keys) @ component_scores(head, values)


def head_literal(head, x_q, keys, values):
    """Single head evaluated the textbook way: sum_z a_z OV v_z / sum_z a_z."""
    keys = _stack(keys, "keys")
    values = _stack(values, "values")
    if len(keys) != len(values):
        raise ValueError(f"{len(keys)} keys but {len(values)} values")
    x_q = np.asarray(x_q, dtype=float)
    logits = np.array([x_q @ head.QK @ k for k in keys])
    a = np.exp(logits - logits.max())
    out = np.zeros(head.dim)
    for a_z, v in zip(a, values):
        out += a_z * (head.OV @ v)
    return out / a.sum()


def mha_forward(layer, x_q, keys, values, form="literal"):
    """Multi-head attention output for one query.

    ``literal`` sums head outputs.  ``svflow`` takes the expectation over
    heads under ``layer.head_weights`` and multiplies by H, the convention
    that makes the two forms identical under uniform head weights.
    """
    if form == "literal":
        return sum(head_literal(h, x_q, keys, values) for h in layer.heads)
    if form == "svflow":
        H = layer.num_heads
        fields = np.stack([head_field(h, x_q, keys, values) for h in layer.heads])
        return H * (layer.head_weights @ fields)
    raise ValueError(f"unknown form {form!r}")


# ---------------------------------------------------------------------------
# mixture of experts
# ---------------------------------------------------------------------------


@dataclass
class Expert:
    """x -> W2 tanh(W1 x + b1) + b2 with hidden width ``W1.shape[0]``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.W2 = np.asarray(self.W2, dtype=float)
        self.b2 = np.asarray(self.b2, dtype=float)
        width, d = self.W1.shape
        if self.b1.shape != (width,) or self.W2.shape != (d, width) or self.b2.shape != (d,):
            raise ValueError("inconsistent expert shapes")

    def __call__(self, x):
        return np.tanh(np.asarray(x, dtype=float) @ self.W1.T + self.b1) @ self.W2.T + self.b2

    @classmethod
    def random(cls, rng, d, width=None, scale=1.0):
        width = 2 * d if width is None else width
        return cls(scale * rng.standard_normal((width, d)) / np.sqrt(d), np.zeros(width),
                   scale * rng.standard_normal((d, width)) / np.sqrt(width), np.zeros(d))


@dataclass
class MoeLayer:
    experts: list
    gate_weight: np.ndarray
    gate_bias: np.ndarray
    ema_center: bool = False
    ema_decay: float = EMA_DECAY
    ema_means: np.ndarray = None

    def __post_init__(self):
        E = len(self.experts)
        if E == 0:
            raise ValueError("a mixture layer needs at least one expert")
        self.gate_weight = np.asarray(self.gate_weight, dtype=float)
        self.gate_bias = np.asarray(self.gate_bias, dtype=float)
        d = self.experts[0].b2.shape[0]
        if self.gate_weight.shape != (E, d) or self.gate_bias.shape != (E,):
            raise ValueError("gate shapes do not match the experts")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("EMA decay must lie in [0, 1)")
        if self.ema_means is None:
            self.ema_means = np.zeros((E, d))
        self.ema_means = np.asarray(self.ema_means, dtype=float)

    @property
    def num_experts(self):
        return len(self.experts)

    @property
    def dim(self):
        return self.gate_weight.shape[1]

    def routing(self, x):
        return dist.softmax(np.asarray(x, dtype=float) @ self.gate_weight.T + self.gate_bias)

    @classmethod
    def random(cls, rng, d, num_experts, width=None, gate_scale=None, ema_center=False):
        gate_scale = 1.0 / np.sqrt(d) if gate_scale is None else gate_scale
        experts = [Expert.random(rng, d, width) for _ in range(num_experts)]
        return cls(experts, gate_scale * rng.standard_normal((num_experts, d)), np.zeros(num_experts),
                   ema_center=ema_center)


def moe_forward(layer, x, update_ema=True):
    """(sum_i g_i(x) e_i(x), g(x)) for one input or a batch.

    With EMA centering each expert output has its running mean subtracted
    before weighting; the running means then absorb the batch mean of the raw
    outputs with decay ``ema_decay``.
    """
    x = np.asarray(x, dtype=float)
    g = layer.routing(x)
    outs = np.stack([e(x) for e in layer.experts], axis=-2)  # (..., E, d)
    if layer.ema_center:
        centered = outs - layer.ema_means
        if update_ema:
            batch_mean = outs.reshape(-1, *outs.shape[-2:]).mean(axis=0)
            layer.ema_means = layer.ema_decay * layer.ema_means + (1.0 - layer.ema_decay) * batch_mean
        outs = centered
    return np.einsum("...e,...ed->...d", g, outs), g


def load_balance_loss(routings):
    """sum_z f_z P_z: argmax fractions (ties -> lowest index) times mean routing."""
    R = np.asarray(routings, dtype=float)
    if R.ndim == 1:
        R = R[None, :]
    if R.shape[0] == 0:
        raise ValueError("empty routing batch")
    E = R.shape[-1]
    R = R.reshape(-1, E)
    f = np.bincount(np.argmax(R, axis=-1), minlength=E) / R.shape[0]
    return float(f @ R.mean(axis=0))


# ---------------------------------------------------------------------------
# residual + RMSNorm layer
# ---------------------------------------------------------------------------


def transformer_layer(x, layer, keys=None, values=None):
    """rms_normalize(x + f(x)) for an attention layer, mixture layer or callable."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    if isinstance(layer, MhaLayer):
        f = mha_forward(layer, x, keys, values)
    elif isinstance(layer, MoeLayer):
        f = moe_forward(layer, x, update_ema=False)[0]
    elif callable(layer):
        f = layer(x)
    else:
        raise TypeError(f"unsupported layer type {type(layer).__name__}")
    return rms_normalize(x + f, d)


# ---------------------------------------------------------------------------
# kernel-smoothing limit
# ---------------------------------------------------------------------------


class QuadratureError(RuntimeError):
    """Gauss-Hermite quadrature did not converge at the requested resolution."""


@dataclass(frozen=True)
class GaussianKeys:
    """Isotropic Gaussian key density N(mean, std^2 I)."""

    mean: tuple
    std: float = 1.0

    @property
    def dim(self):
        return len(self.mean)

    def sample(self, rng, n):
        return np.asarray(self.mean) + self.std * rng.standard_normal((n, self.dim))


def kernel_smoothed_expectation(head, x_q, f, keys, resolution=40, tol=1e-10):
    """E_{p_key}[f(k) psi(x_q, k)] / E_{p_key}[psi(x_q, k)] with psi = exp(x_q^T QK k).

    ``f`` maps an (n, d) array of keys to n values.
    Tensor-product Gauss-Hermite quadrature; the value at ``resolution`` is
    compared with ``resolution + 10`` nodes and QuadratureError is raised if
    they differ by more than ``tol`` (relative).
    """
    if keys.dim > 3:
        raise ValueError("quadrature is only supported for key dimension <= 3")

    def at(res):
        t, w = hermegauss(res)
        grids = np.meshgrid(*([t] * keys.dim), indexing="ij")
        pts = np.asarray(keys.mean) + keys.std * np.stack([g.ravel() for g in grids], axis=1)
        wts = np.ones(1)
        for _ in range(keys.dim):
            wts = np.outer(wts, w).ravel()
        logits = pts @ (head.QK.T @ np.asarray(x_q, dtype=float))
        psi = np.exp(logits - logits.max())
        fv = np.asarray(f(pts), dtype=float)
        return float(np.sum(wts * psi * fv) / np.sum(wts * psi))

    a, b = at(resolution), at(resolution + 10)
    if abs(a - b) > tol * max(1.0, abs(b)):
        raise QuadratureError(f"quadrature unconverged: {a!r} vs {b!r}")
    return b


def kernel_limit_errors(head, x_q, keys, f, n, seeds, resolution=40, target=None):
    """Per-seed |sum_z f(k_z) q(z | x_q) - kernel-smoothed expectation| for n keys."""
    if target is None:
        target = kernel_smoothed_expectation(head, x_q, f, keys, resolution)
    errs = []
    for s in seeds:
        k = keys.sample(np.random.default_rng(s), n)
        q = attention_posterior(head, x_q, k)
        errs.append(abs(float(q @ np.asarray(f(k), dtype=float)) - target))
    return np.array(errs)


def kernel_limit_error(head, x_q, keys, f, n, resolution=40, seeds=range(32)):
    """Seed-averaged finite-N error of attention against its kernel limit."""
    return float(np.mean(kernel_limit_errors(head, x_q, keys, f, n, seeds, resolution)))


# ---------------------------------------------------------------------------
# toy transformer
# ---------------------------------------------------------------------------


@dataclass
class ToyForward:
    """Per-layer record of a batched forward pass over sequences (S, N, d)."""

    states: list
    attention: dict = field(default_factory=dict)  # layer -> (H, S, N, W)
    attention_logits: dict = field(default_factory=dict)
    routing: dict = field(default_factory=dict)  # layer -> (S, N, E)
    logits: np.ndarray = None

    @property
    def probs(self):
        return dist.softmax(self.logits)


def window_keys(X, window):
    """(S, N, W, d) previous-``window`` states per position and (N, W) validity mask.

    Slot j of position n holds position n - window + j, so the last slot is the
    immediately preceding token.  Position 0 has no keys.
    """
    S, N, d = X.shape
    pad = np.concatenate([np.zeros((S, window, d)), X], axis=1)
    K = sliding_window_view(pad, window, axis=1)[:, :N]  # (S, N, d, W)
    K = np.moveaxis(K, -1, 2)
    pos = np.arange(N)[:, None] - window + np.arange(window)[None, :]
    return K, pos >= 0


def _masked_softmax(logits, mask):
    z = np.where(mask, logits, -np.inf)
    mx = np.max(z, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(z - mx), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def mha_sequence(layer, X, window):
    """Causal windowed attention for every position; keys and values are the states."""
    K, mask = window_keys(X, window)
    out = np.zeros_like(X)
    probs, logits = [], []
    for h in layer.heads:
        lg = np.einsum("snd,de,snwe->snw", X, h.QK, K)
        a = _masked_softmax(lg, mask)
        out += np.einsum("snw,snwd->snd", a, K @ h.OV.T)
        probs.append(a)
        logits.append(np.where(mask, lg, -np.inf))
    return out, np.stack(probs), np.stack(logits)


@dataclass
class ToyTransformer:
    """Stack of attention / mixture layers on the sqrt(d) sphere with a linear readout."""

    layers: list
    dim: int
    window: int
    head_weight: np.ndarray
    head_bias: np.ndarray

    def __post_init__(self):
        self.head_weight = np.asarray(self.head_weight, dtype=float)
        self.head_bias = np.asarray(self.head_bias, dtype=float)
        for i, layer in enumerate(self.layers):
            if layer.dim != self.dim:
                raise ValueError(f"layer {i} has dimension {layer.dim}, expected {self.dim}")
        if self.head_weight.shape[0] != self.dim:
            raise ValueError("readout does not match the model dimension")

    @property
    def num_layers(self):
        return len(self.layers)

    def embed(self, embeddings):
        """Unit token embeddings -> initial states on the sqrt(d) sphere."""
        return np.sqrt(self.dim) * np.asarray(embeddings, dtype=float)

    def forward(self, embeddings):
        X = self.embed(embeddings)
        if X.ndim == 2:
            X = X[None]
        rec = ToyForward(states=[X])
        for i, layer in enumerate(self.layers):
            if isinstance(layer, MhaLayer):
                f, a, lg = mha_sequence(layer, X, self.window)
                rec.attention[i] = a
                rec.attention_logits[i] = lg
            else:
                f, g = moe_forward(layer, X, update_ema=False)
                rec.routing[i] = g
            X = rms_normalize(X + f, self.dim)
            rec.states.append(X)
        rec.logits = X @ self.head_weight + self.head_bias
        return rec

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        layers = []
        for layer in self.layers:
            if isinstance(layer, MhaLayer):
                layers.append({"type": "mha", "head_weights": layer.head_weights.tolist(),
                               "heads": [{"QK": h.QK.tolist(), "OV": h.OV.tolist()} for h in layer.heads]})
            else:
                layers.append({"type": "moe", "gate_weight": layer.gate_weight.tolist(),
                               "gate_bias": layer.gate_bias.tolist(), "ema_center": layer.ema_center,
                               "ema_decay": layer.ema_decay, "ema_means": layer.ema_means.tolist(),
                               "experts": [{"W1": e.W1.tolist(), "b1": e.b1.tolist(),
                                            "W2": e.W2.tolist(), "b2": e.b2.tolist()}
                                           for e in layer.experts]})
        return {"dim": self.dim, "window": self.window, "layers": layers,
                "head": {"weight": self.head_weight.tolist(), "bias": self.head_bias.tolist()}}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj):
        layers = []
        for entry in obj["layers"]:
            if entry["type"] == "mha":
                layers.append(MhaLayer([AttentionHead(h["QK"], h["OV"]) for h in entry["heads"]],
                                       entry["head_weights"]))
            elif entry["type"] == "moe":
                layers.append(MoeLayer([Expert(**e) for e in entry["experts"]], entry["gate_weight"],
                                       entry["gate_bias"], entry["ema_center"], entry["ema_decay"],
                                       entry["ema_means"]))
            else:
                raise ValueError(f"unknown layer type {entry['type']!r}")
        return cls(layers, obj["dim"], obj["window"], obj["head"]["weight"], obj["head"]["bias"])

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def random(cls, rng, dim, vocab, window, kinds, num_heads=4, num_experts=8):
        """``kinds`` is a sequence of "mha" / "moe" tags, one per layer."""
        layers = []
        for kind in kinds:
            if kind == "mha":
                layers.append(MhaLayer([AttentionHead.random(rng, dim, 0.3 / np.sqrt(dim))
                                        for _ in range(num_heads)]))
            elif kind == "moe":
                layers.append(MoeLayer.random(rng, dim, num_experts))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(layers, dim, window, 0.1 * rng.standard_normal((dim, vocab)), np.zeros(vocab))


def head_vmf_terms(head, X, window):
    """Posterior and vMF component log-densities of one head at every position.

    The query is the unit direction x_n / |x_n| and component z has score
    kappa_z mu_z = |x_n| QK k_z, so the logit x_n^T QK k_z equals
    kappa_z mu_z^T x_hat; the log-density adds log C_d(kappa_z).  Returns
    (q, cond, mask) with shapes (S, N, W).
    """
    K, mask = window_keys(X, window)
    d = X.shape[-1]
    radius = np.linalg.norm(X, axis=-1)[..., None, None]
    w = radius * (K @ head.QK.T)  # (S, N, W, d)
    kappa = np.linalg.norm(w, axis=-1)
    logits = np.einsum("snd,snwd->snw", X / radius[..., 0], w)
    cond = dist.vmf_log_normalizer_array(d, kappa) + logits
    q = _masked_softmax(logits, mask)
    return q, cond, mask
