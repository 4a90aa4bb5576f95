"""Compiled gradient sweep for long training runs.

Same mathematics as :func:`svflow.train.gradients`, restructured per sample:
one forward pass storing the trajectory, then a single reverse sweep carrying
the combined adjoint a * delta + b * sum_k gamma_k. The numpy implementation
stays the reference; tests compare the two to rounding.
"""

import numpy as np
from numba import njit
from scipy.special import expit

from . import distributions as dist
from .flow import softplus, vmf_mean_kappa

GAUSSIAN, VMF = 0, 1


@njit(cache=True, fastmath=True, inline="always")
def _log_softmax(src, t, dst, prob, mx, inv):
    """Normalize ``src[t, :, n]`` over the middle axis for every sample n."""
    K, B = src.shape[1], src.shape[2]
    for n in range(B):
        mx[n] = src[t, 0, n]
        inv[n] = 0.0
    for k in range(1, K):
        for n in range(B):
            mx[n] = max(mx[n], src[t, k, n])
    for k in range(K):
        for n in range(B):
            prob[t, k, n] = np.exp(src[t, k, n] - mx[n])
            inv[n] += prob[t, k, n]
    for n in range(B):
        mx[n] += np.log(inv[n])
        inv[n] = 1.0 / inv[n]
    for k in range(K):
        for n in range(B):
            dst[t, k, n] = src[t, k, n] - mx[n]
            prob[t, k, n] *= inv[n]


@njit(cache=True, fastmath=True)
def _sweep(family, tied, spherical, h, a_coef, b_coef, step_w,
           mean, inv_var, log_std, mu, kappa, log_c, dlog_c, W, b,
           head_W, head_b, X0T, Y,
           g_mean, g_logstd, g_kappa, g_mu, g_W, g_b, g_headW, g_headb, kl_out,
           xs, cond, logits, lq, lp, qs, ps, scores):
    """Accumulate summed (not averaged) gradients; returns (sum J_align, sum J_var).

    The sample index is the innermost loop everywhere so the arithmetic
    vectorizes across the batch. ``X0T`` is the (d, B) transposed batch.
    The large per-step buffers are passed in so repeated calls reuse memory
    instead of faulting in fresh pages.
    """
    d, B = X0T.shape
    L, K = step_w.shape[0], mean.shape[1]
    C = head_b.shape[0]
    ynorm = np.empty((L, B))
    mx = np.empty(B)
    inv = np.empty(B)
    nrm = np.empty(B)
    G = np.zeros((d, B))
    ghat = np.empty((d, B))
    Gn = np.empty((d, B))
    adv = np.empty((K, B))
    mean_adv = np.empty(B)
    e = np.empty((K, B))
    f = np.empty((K, B))
    ck = np.empty(B)
    need_p = b_coef != 0.0 or tied
    if not need_p:
        lp[:] = 0.0
        ps[:] = 0.0
    gaussian = family == GAUSSIAN
    total_align = 0.0
    total_var = 0.0
    xs[0] = X0T
    # forward
    for t in range(L):
        for k in range(K):
            if gaussian:
                cst = -0.5 * d * 1.8378770664093453
                for i in range(d):
                    cst -= log_std[t, k, i]
                for n in range(B):
                    cond[t, k, n] = cst
                for i in range(d):
                    m_ = mean[t, k, i]
                    iv = inv_var[t, k, i]
                    for n in range(B):
                        diff = xs[t, i, n] - m_
                        cond[t, k, n] -= 0.5 * diff * diff * iv
                        scores[t, k, i, n] = -diff * iv
            else:
                for n in range(B):
                    cond[t, k, n] = 0.0
                for i in range(d):
                    mu_ = mu[t, k, i]
                    sc = kappa[t, k] * mu_
                    for n in range(B):
                        cond[t, k, n] += mu_ * xs[t, i, n]
                        scores[t, k, i, n] = sc
                for n in range(B):
                    cond[t, k, n] = log_c[t, k] + kappa[t, k] * cond[t, k, n]
            if tied:
                for n in range(B):
                    logits[t, k, n] = cond[t, k, n]
            else:
                for n in range(B):
                    logits[t, k, n] = b[t, k]
                for i in range(d):
                    w_ = W[t, k, i]
                    for n in range(B):
                        logits[t, k, n] += w_ * xs[t, i, n]
        _log_softmax(logits, t, lq, qs, mx, inv)
        if need_p:
            _log_softmax(cond, t, lp, ps, mx, inv)
        for n in range(B):
            nrm[n] = 0.0
        for i in range(d):
            for n in range(B):
                xs[t + 1, i, n] = xs[t, i, n]
            for k in range(K):
                for n in range(B):
                    xs[t + 1, i, n] += h * qs[t, k, n] * scores[t, k, i, n]
            for n in range(B):
                nrm[n] += xs[t + 1, i, n] * xs[t + 1, i, n]
        for n in range(B):
            ynorm[t, n] = np.sqrt(nrm[n])
        if spherical:
            for i in range(d):
                for n in range(B):
                    xs[t + 1, i, n] /= ynorm[t, n]
        if b_coef != 0.0:
            kl_t = 0.0
            for n in range(B):
                kl = 0.0
                for k in range(K):
                    kl += qs[t, k, n] * (lq[t, k, n] - lp[t, k, n])
                kl_t += max(kl, 0.0)
            kl_out[t] += kl_t
            total_var += step_w[t] * kl_t
    # head
    for n in range(B):
        omax = -np.inf
        for c in range(C):
            s = head_b[c]
            for i in range(d):
                s += head_W[i, c] * xs[L, i, n]
            omax = max(omax, s)
        ssum = 0.0
        for c in range(C):
            s = head_b[c]
            for i in range(d):
                s += head_W[i, c] * xs[L, i, n]
            ssum += np.exp(s - omax)
        lse = omax + np.log(ssum)
        for c in range(C):
            s = head_b[c]
            for i in range(d):
                s += head_W[i, c] * xs[L, i, n]
            if c == Y[n]:
                total_align -= s - lse
            if a_coef != 0.0:
                r = np.exp(s - lse) - (1.0 if c == Y[n] else 0.0)
                g_headb[c] += a_coef * r
                for i in range(d):
                    g_headW[i, c] += a_coef * xs[L, i, n] * r
                    G[i, n] += a_coef * head_W[i, c] * r
    # reverse: G carries a * delta + b * Gamma
    for t in range(L - 1, -1, -1):
        if spherical:
            for n in range(B):
                nrm[n] = 0.0
            for i in range(d):
                for n in range(B):
                    nrm[n] += xs[t + 1, i, n] * G[i, n]
            for i in range(d):
                for n in range(B):
                    ghat[i, n] = (G[i, n] - xs[t + 1, i, n] * nrm[n]) / ynorm[t, n]
        else:
            ghat[:, :] = G
        klw = b_coef * step_w[t]
        for n in range(B):
            mean_adv[n] = 0.0
        for k in range(K):
            for n in range(B):
                adv[k, n] = klw * (lq[t, k, n] - lp[t, k, n])
            for i in range(d):
                for n in range(B):
                    adv[k, n] += h * ghat[i, n] * scores[t, k, i, n]
            for n in range(B):
                mean_adv[n] += qs[t, k, n] * adv[k, n]
        for k in range(K):
            for n in range(B):
                e[k, n] = qs[t, k, n] * (adv[k, n] - mean_adv[n])
                f[k, n] = klw * (ps[t, k, n] - qs[t, k, n])
        Gn[:, :] = ghat
        for k in range(K):
            # log-density adjoint; tied logits are the log-densities themselves
            for n in range(B):
                ck[n] = f[k, n] + e[k, n] if tied else f[k, n]
            if tied:
                for i in range(d):
                    for n in range(B):
                        Gn[i, n] += ck[n] * scores[t, k, i, n]
            else:
                acc = 0.0
                for n in range(B):
                    acc += e[k, n]
                g_b[t, k] += acc
                for i in range(d):
                    w_ = W[t, k, i]
                    acc = 0.0
                    for n in range(B):
                        Gn[i, n] += e[k, n] * w_ + f[k, n] * scores[t, k, i, n]
                        acc += e[k, n] * xs[t, i, n]
                    g_W[t, k, i] += acc
            if gaussian:
                for i in range(d):
                    iv = inv_var[t, k, i]
                    am = 0.0
                    al = 0.0
                    for n in range(B):
                        u = h * qs[t, k, n] * ghat[i, n]
                        s = scores[t, k, i, n]
                        Gn[i, n] -= u * iv
                        am += u * iv - ck[n] * s
                        al += -2.0 * u * s + ck[n] * (s * s / iv - 1.0)
                    g_mean[t, k, i] += am
                    g_logstd[t, k, i] += al
            else:
                acc = 0.0
                for n in range(B):
                    acc += ck[n]
                dk = acc * dlog_c[t, k]
                for i in range(d):
                    acc = 0.0
                    for n in range(B):
                        acc += h * qs[t, k, n] * ghat[i, n] + ck[n] * xs[t, i, n]
                    dk += acc * mu[t, k, i]
                    g_mu[t, k, i] += kappa[t, k] * acc
                g_kappa[t, k] += dk
        G[:, :] = Gn
    return total_align, total_var


class GradientKernel:
    """Drop-in replacement for ``train.gradients`` on a fixed model layout."""

    def __init__(self, model, obj, chunk=64):
        self.obj = obj
        self.family = GAUSSIAN if model.family == "gaussian" else VMF
        self.tied = model.posterior_mode == "tied"
        self.spherical = obj.mode == "spherical"
        if obj.mode not in ("euclidean", "spherical"):
            raise ValueError(f"unsupported mode {obj.mode!r}")
        self.chunk = int(chunk)
        self._ws = {}

    def _workspace(self, L, K, d, B):
        key = (L, K, d, B)
        if key not in self._ws:
            self._ws[key] = (np.empty((L + 1, d, B)),) + tuple(np.empty((L, K, B)) for _ in range(6)) \
                + (np.empty((L, K, d, B)),)
        return self._ws[key]

    def gradients(self, m, head, x0, y):
        from .train import Gradients

        obj = self.obj
        L, K, d = m.num_steps, m.num_components, m.dim
        B = x0.shape[0]
        w = obj.step_weights(L)
        empty3 = np.zeros((L, K, d))
        empty2 = np.zeros((L, K))
        if self.family == GAUSSIAN:
            mean = m.theta["mean"]
            log_std = m.theta["log_std"]
            inv_var = np.exp(-2.0 * log_std)
            mu, kappa, log_c, dlog_c = empty3, empty2, empty2, empty2
        else:
            mean = log_std = inv_var = empty3
            mu = np.empty((L, K, d))
            kappa = np.empty((L, K))
            for step in range(L):
                mu[step], kappa[step] = vmf_mean_kappa(m, step)
            log_c = np.array([[dist.vmf_log_normalizer(d, k) for k in row] for row in kappa])
            dlog_c = np.array([[dist.vmf_log_normalizer_grad(d, k) for k in row] for row in kappa])
        W = m.phi.get("weight", empty3)
        bias = m.phi.get("bias", empty2)
        g_mean = np.zeros((L, K, d))
        g_logstd = np.zeros((L, K, d))
        g_kappa = np.zeros((L, K))
        g_mu = np.zeros((L, K, d))
        g_W = np.zeros((L, K, d))
        g_b = np.zeros((L, K))
        g_hW = np.zeros_like(head.weight)
        g_hb = np.zeros_like(head.bias)
        kl = np.zeros(L)
        a, bcoef = obj.align_coef, obj.var_coef
        xt = np.asarray(x0, dtype=float).T
        y = np.asarray(y, dtype=np.int64)
        ja = jv = 0.0
        for lo in range(0, B, self.chunk):
            hi = min(B, lo + self.chunk)
            ws = self._workspace(L, K, d, hi - lo)
            da, dv = _sweep(self.family, self.tied, self.spherical, m.step_size, a, bcoef, w,
                            mean, inv_var, log_std, mu, kappa, log_c, dlog_c, W, bias,
                            head.weight, head.bias, np.ascontiguousarray(xt[:, lo:hi]),
                            np.ascontiguousarray(y[lo:hi]),
                            g_mean, g_logstd, g_kappa, g_mu, g_W, g_b, g_hW, g_hb, kl, *ws)
            ja += da
            jv += dv
        if self.family == GAUSSIAN:
            theta = {"mean": g_mean / B, "log_std": g_logstd / B}
        else:
            raw = m.theta["direction"]
            norm = np.linalg.norm(raw, axis=-1, keepdims=True)
            d_mu = g_mu / B
            theta = {
                "direction": (d_mu - mu * np.sum(mu * d_mu, axis=-1, keepdims=True)) / norm,
                "kappa_raw": g_kappa / B * expit(m.theta["kappa_raw"]),
            }
        phi = {} if self.tied else {"weight": g_W / B, "bias": g_b / B}
        ja /= B
        jv /= B
        return Gradients(theta, phi, {"head.weight": g_hW / B, "head.bias": g_hb / B},
                         ja, jv, a * ja + bcoef * jv, extras={"kl": kl / B})


__all__ = ["GradientKernel", "softplus"]
