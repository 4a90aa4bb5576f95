"""Conditional likelihood families and categorical utilities.

The von Mises-Fisher log-normalizer is evaluated in the log domain: a power
series for I_nu below a switch point and the large-argument (Hankel)
expansion above it, so it stays finite for concentrations far past the
point where I_nu itself overflows a double.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

LOG_2PI = np.log(2.0 * np.pi)
KAPPA_SWITCH_FACTOR = 50.0


@dataclass(frozen=True)
class VmfParams:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if abs(np.linalg.norm(mu) - 1.0) > 1e-10:
            raise ValueError("vMF mean direction must be a unit vector")
        if self.kappa < 0:
            raise ValueError("vMF concentration must be nonnegative")
        object.__setattr__(self, "mu", mu)


@dataclass(frozen=True)
class DiagGaussianParams:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        log_std = np.asarray(self.log_std, dtype=float)
        if mean.shape != log_std.shape:
            raise ValueError("mean and log_std must have the same shape")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)


# ---------------------------------------------------------------------------
# Bessel functions and the vMF normalizer
# ---------------------------------------------------------------------------


def kappa_switch(nu):
    """Concentration above which the asymptotic expansion is used."""
    return KAPPA_SWITCH_FACTOR * max(float(nu), 1.0)


def _log_iv_series_scaled(nu, kappa):
    """log( I_nu(kappa) / (kappa/2)^nu ) by summing the power series."""
    # terms peak near m ~ kappa/2; the tail beyond kappa + 60 is negligible
    m = np.arange(int(kappa) + 60, dtype=float)
    # xlogy keeps the m = 0 term finite when kappa / 2 underflows to 0
    terms = 2.0 * xlogy(m, kappa / 2.0) - gammaln(m + 1.0) - gammaln(m + nu + 1.0)
    return float(logsumexp(terms))


def _log_iv_asymptotic(nu, kappa):
    """Hankel expansion log I_nu(k) ~ k - log(2 pi k)/2 + log(sum_k a_k)."""
    mu4 = 4.0 * nu * nu
    total = 1.0
    term = 1.0
    prev = np.inf
    for k in range(1, 60):
        term *= -(mu4 - (2 * k - 1) ** 2) / (k * 8.0 * kappa)
        if abs(term) > prev:  # asymptotic series started to diverge
            break
        total += term
        prev = abs(term)
        if prev < 1e-17 * abs(total):
            break
    return kappa - 0.5 * np.log(2.0 * np.pi * kappa) + np.log(total)


def log_bessel_iv(nu, kappa):
    """log I_nu(kappa) for nu >= 0, kappa >= 0 (scalar)."""
    kappa = float(kappa)
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    if kappa == 0.0:
        return 0.0 if nu == 0 else -np.inf
    if kappa > kappa_switch(nu):
        return _log_iv_asymptotic(nu, kappa)
    return nu * np.log(kappa / 2.0) + _log_iv_series_scaled(nu, kappa)


def vmf_log_normalizer(d, kappa):
    """log C_d(kappa) = (d/2-1) log k - (d/2) log 2pi - log I_{d/2-1}(k)."""
    if d < 2:
        raise ValueError("vMF needs dimension d >= 2")
    kappa = float(kappa)
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    nu = d / 2.0 - 1.0
    if kappa > kappa_switch(nu):
        return nu * np.log(kappa) - 0.5 * d * LOG_2PI - _log_iv_asymptotic(nu, kappa)
    # the (k/2)^nu factors cancel analytically, which keeps small k exact
    if kappa == 0.0:
        scaled = -gammaln(nu + 1.0)
    else:
        scaled = _log_iv_series_scaled(nu, kappa)
    return nu * np.log(2.0) - 0.5 * d * LOG_2PI - scaled


def vmf_log_normalizer_array(d, kappa, chunk=4096):
    """Vectorized :func:`vmf_log_normalizer` for an array of concentrations.

    Same two regimes; the series is summed over a common term range per chunk.
    """
    if d < 2:
        raise ValueError("vMF needs dimension d >= 2")
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0):
        raise ValueError("kappa must be nonnegative")
    nu = d / 2.0 - 1.0
    flat = kappa.ravel()
    out = np.empty_like(flat)
    big = flat > kappa_switch(nu)
    if big.any():
        out[big] = nu * np.log(flat[big]) - 0.5 * d * LOG_2PI - _log_iv_asymptotic_array(nu, flat[big])
    small = np.flatnonzero(~big)
    const = nu * np.log(2.0) - 0.5 * d * LOG_2PI
    for lo in range(0, len(small), chunk):
        idx = small[lo:lo + chunk]
        k = flat[idx]
        m = np.arange(int(k.max()) + 60, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_half = np.log(k / 2.0)[:, None]
            terms = np.where(m == 0, 0.0, 2.0 * m * log_half) - gammaln(m + 1.0) - gammaln(m + nu + 1.0)
        out[idx] = const - logsumexp(terms, axis=1)
    return out.reshape(kappa.shape)


def _log_iv_asymptotic_array(nu, kappa):
    mu4 = 4.0 * nu * nu
    total = np.ones_like(kappa)
    term = np.ones_like(kappa)
    prev = np.full_like(kappa, np.inf)
    live = np.ones(kappa.shape, dtype=bool)
    for k in range(1, 60):
        term = term * (-(mu4 - (2 * k - 1) ** 2) / (k * 8.0 * kappa))
        live &= np.abs(term) <= prev
        total = np.where(live, total + term, total)
        prev = np.where(live, np.abs(term), prev)
        live &= prev >= 1e-17 * np.abs(total)
        if not live.any():
            break
    return kappa - 0.5 * np.log(2.0 * np.pi * kappa) + np.log(total)


def bessel_ratio(nu, kappa):
    """A(kappa) = I_{nu+1}(kappa) / I_nu(kappa), so d/dk log C_d = -A."""
    kappa = float(kappa)
    if kappa == 0.0:
        return 0.0
    return float(np.exp(log_bessel_iv(nu + 1.0, kappa) - log_bessel_iv(nu, kappa)))


def vmf_log_normalizer_grad(d, kappa):
    """Derivative of log C_d with respect to kappa."""
    return -bessel_ratio(d / 2.0 - 1.0, kappa)


def vmf_log_density(x, p):
    x = np.asarray(x, dtype=float)
    if abs(np.linalg.norm(x) - 1.0) > 1e-10:
        raise ValueError("vMF density is defined on the unit sphere")
    return vmf_log_normalizer(len(x), p.kappa) + p.kappa * float(np.dot(p.mu, x))


def vmf_score(p):
    """Euclidean score of the vMF density: kappa * mu, independent of x."""
    return p.kappa * p.mu


# ---------------------------------------------------------------------------
# diagonal Gaussian
# ---------------------------------------------------------------------------


def gaussian_log_density(x, p):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.mean.shape[-1]:
        raise ValueError("dimension mismatch between x and Gaussian parameters")
    z = (x - p.mean) * np.exp(-p.log_std)
    return float(np.sum(-0.5 * z * z - p.log_std - 0.5 * LOG_2PI))


def gaussian_score(x, p):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.mean.shape[-1]:
        raise ValueError("dimension mismatch between x and Gaussian parameters")
    return -(x - p.mean) * np.exp(-2.0 * p.log_std)


# ---------------------------------------------------------------------------
# categorical utilities
# ---------------------------------------------------------------------------


def logsumexp(a, axis=-1, keepdims=False):
    """log sum exp along ``axis``; an all -inf slice gives -inf.

    A plain numpy version: scipy's has per-call overhead that dominates the
    small per-step arrays used throughout.
    """
    a = np.asarray(a, dtype=float)
    mx = np.max(a, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True)) + mx
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=float)
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def softmax(logits, axis=-1):
    """Max-subtracted softmax; the result sums to one along ``axis``."""
    logits = np.asarray(logits, dtype=float)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _xlogy(x, y):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x * np.log(y)
    return np.where(x == 0.0, 0.0, out)


def entropy(q, axis=-1):
    return -np.sum(_xlogy(q, q), axis=axis)


def categorical_kl(q, p, axis=-1):
    """KL(q || p) in nats.

    Returns ``inf`` where q puts mass on a zero-probability entry of p.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if q.shape != p.shape:
        raise ValueError(f"support mismatch: {q.shape} vs {p.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(q > 0.0, q * (np.log(q) - np.log(p)), 0.0)
    kl = np.sum(ratio, axis=axis)
    # floating-point cancellation can make a true zero slightly negative
    return np.maximum(kl, 0.0)


def categorical_kl_logits(log_q, log_p, axis=-1):
    """KL from normalized log-probabilities (no materialized ratios)."""
    q = np.exp(log_q)
    return np.maximum(np.sum(q * (log_q - log_p), axis=axis), 0.0)


def kl_to_uniform(q, axis=-1):
    """KL(q || U) = log|Z| - H(q)."""
    q = np.asarray(q, dtype=float)
    n = q.shape[axis]
    return np.maximum(np.log(n) - entropy(q, axis=axis), 0.0)
