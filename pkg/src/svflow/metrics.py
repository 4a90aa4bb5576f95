"""Per-token SVFlow diagnostics, calibration, shuffle-rate binning and
layer-depth aggregation.

Everything here is pure aggregation over arrays; all functions operate on
the last axis and broadcast over leading batch axes.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import distributions as dist
from .distributions import logsumexp
from .data import shuffled_count

SCHEMA_HEADER = "# svflow-lab schema v1"
IDENTITY_TOL = 1e-9
NUM_SHUFFLE_BINS = 4
METRIC_NAMES = ("neg_log_p", "kl_qp", "kl_qU", "kl_pU")


@dataclass
class TokenMetrics:
    """neg_log_p in nats per dimension; the KL terms in raw nats."""

    neg_log_p: object
    kl_qp: object
    kl_qU: object
    kl_pU: object
    saturated: int = 0

    def as_dict(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


class IdentityMismatch(AssertionError):
    """The two routes to -log p(x) disagree beyond tolerance."""


def svflow_metrics(q, cond_log_densities, d, check=True):
    """Diagnostics for one evaluation point (or a batch along leading axes).

    The marginal is computed by logsumexp and cross-checked against
    -ELBO - KL(q || p); both use the uniform prior over components.
    """
    q = np.asarray(q, dtype=float)
    cond = np.asarray(cond_log_densities, dtype=float)
    if q.shape != cond.shape:
        raise ValueError(f"posterior has shape {q.shape} but densities have {cond.shape}")
    k = q.shape[-1]
    log_prior = -np.log(k)
    log_p = dist.log_softmax(cond + log_prior)
    kl_qp = dist.categorical_kl(q, np.exp(log_p))
    log_marg = logsumexp(cond, axis=-1) + log_prior
    if check:
        with np.errstate(divide="ignore", invalid="ignore"):
            log_q = np.where(q > 0, np.log(q), 0.0)
        elbo = np.sum(np.where(q > 0, q * (cond + log_prior - log_q), 0.0), axis=-1)
        finite = np.isfinite(kl_qp)
        err = np.abs((elbo + kl_qp) - log_marg)
        scale = np.maximum(1.0, np.abs(log_marg))
        if np.any(err[finite] > IDENTITY_TOL * scale[finite]):
            raise IdentityMismatch(f"logsumexp and ELBO+KL routes differ by {np.max(err[finite])!r}")
    neg_log_p = -log_marg / d
    return TokenMetrics(
        neg_log_p=neg_log_p if neg_log_p.ndim else float(neg_log_p),
        kl_qp=kl_qp if np.ndim(kl_qp) else float(kl_qp),
        kl_qU=_scalar(dist.kl_to_uniform(q)),
        kl_pU=_scalar(dist.kl_to_uniform(np.exp(log_p))),
    )


def _scalar(a):
    return a if np.ndim(a) else float(a)


# ---------------------------------------------------------------------------
# calibration and perplexity
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    ece: float
    log_ppl: float
    bin_counts: np.ndarray


def calibration_bins(confidences, bins=15):
    """Equal-width bin index; a value on an edge goes to the lower bin, 0 to the first."""
    c = np.asarray(confidences, dtype=float)
    edges = np.arange(bins + 1) / bins
    return np.clip(np.searchsorted(edges, c, side="left") - 1, 0, bins - 1)


def ece(confidences, correct, bins=15):
    """Expected calibration error in percent."""
    c = np.asarray(confidences, dtype=float)
    ok = np.asarray(correct, dtype=float)
    if c.size == 0:
        raise ValueError("ece of an empty sample")
    if c.shape != ok.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if np.any((c < 0) | (c > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = calibration_bins(c, bins)
    n = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=c, minlength=bins)
    acc_sum = np.bincount(idx, weights=ok, minlength=bins)
    used = n > 0
    gap = np.abs(acc_sum[used] - conf_sum[used]) / n[used]
    return float(100.0 * np.sum(n[used] / c.size * gap))


def log_ppl(per_token_nll):
    nll = np.asarray(per_token_nll, dtype=float)
    if nll.size == 0:
        raise ValueError("log perplexity of an empty sample")
    return float(np.mean(nll))


def calibration_report(probs, targets, bins=15):
    """ECE and logPPL of a batch of predictive distributions."""
    probs = np.asarray(probs, dtype=float)
    targets = np.asarray(targets, dtype=np.int64)
    conf = probs.max(axis=-1)
    correct = probs.argmax(axis=-1) == targets
    p_true = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    nll = -np.log(np.maximum(p_true, np.finfo(float).tiny))
    return CalibrationReport(ece(conf, correct, bins), log_ppl(nll),
                             np.bincount(calibration_bins(conf, bins), minlength=bins))


# ---------------------------------------------------------------------------
# shuffle-rate binning
# ---------------------------------------------------------------------------


def shuffle_rate(p, length, position):
    """(r, excluded) for 1-indexed ``position`` after shuffling floor(p N) tokens.

    r = min(1, floor(pN) / n).  Positions inside the shuffled prefix are
    flagged as excluded.
    """
    if not 1 <= position <= length:
        raise ValueError(f"position {position} outside 1..{length}")
    k = shuffled_count(p, length)
    if k == 0:
        return 0.0, False
    return min(1.0, k / position), position <= k


def shuffle_bin(r):
    """Bin of a shuffle rate: (0,.25], (.25,.5], (.5,.75], (.75,1).  None for r = 0 or r >= 1."""
    if r <= 0.0 or r >= 1.0:
        return None
    return min(NUM_SHUFFLE_BINS - 1, math.ceil(r * NUM_SHUFFLE_BINS) - 1)


def position_bins(p, length):
    """Bin index per 1-indexed position (``-1`` for baseline or excluded)."""
    out = np.full(length, -1, dtype=np.int64)
    for n in range(1, length + 1):
        r, excluded = shuffle_rate(p, length, n)
        b = shuffle_bin(r)
        if not excluded and b is not None:
            out[n - 1] = b
    return out


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def mean_metrics(items):
    """Arithmetic mean of TokenMetrics; infinite KL values are skipped and tallied."""
    items = list(items)
    if not items:
        raise ValueError("nothing to aggregate")
    out = {}
    saturated = sum(m.saturated for m in items)
    for name in METRIC_NAMES:
        vals = np.concatenate([np.ravel(getattr(m, name)) for m in items]).astype(float)
        finite = np.isfinite(vals)
        if name != "neg_log_p":
            saturated += int(np.sum(~finite))
        out[name] = float(np.mean(vals[finite])) if finite.any() else float("inf")
    return TokenMetrics(saturated=saturated, **out)


def deep_layer_count(num_layers, fraction=1.0 / 3.0):
    return max(1, math.ceil(fraction * num_layers - 1e-9))


def aggregate_deep(layer_metrics, fraction=1.0 / 3.0):
    """Mean over the last ceil(fraction * L) layers."""
    layer_metrics = list(layer_metrics)
    if not layer_metrics:
        raise ValueError("need at least one layer")
    k = deep_layer_count(len(layer_metrics), fraction)
    return mean_metrics(layer_metrics[-k:])


def spearman(a, b):
    """Rank correlation with tied ranks averaged."""
    return float(stats.spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("model_id", "layer", "bin", "metric", "base", "delta")


def metrics_csv(rows):
    """Rows are dicts with METRIC_COLUMNS keys; floats are written with repr."""
    buf = io.StringIO()
    buf.write(SCHEMA_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


__all__ = [
    "TokenMetrics", "CalibrationReport", "IdentityMismatch", "svflow_metrics", "ece", "log_ppl",
    "calibration_report", "calibration_bins", "shuffle_rate", "shuffle_bin", "position_bins",
    "mean_metrics", "aggregate_deep", "deep_layer_count", "spearman", "metrics_csv",
]
