"""Primitives on the unit sphere S^{d-1}.

Tangent projection, the exponential map, the normalizing retraction, RMS
normalization onto the radius-sqrt(d) sphere, and the residual between the
"residual + RMSNorm" update and a proper retraction.
"""

import numpy as np

UNIT_TOL = 1e-12
TANGENT_TOL = 1e-10
ZERO_STEP = 1e-12
DEGENERATE_NORM = 1e-12


class DegenerateNormError(ValueError):
    """Raised when a vector that must be normalized has (near) zero length."""


def _check_unit(x, tol=None):
    tol = UNIT_TOL if tol is None else tol
    n = np.linalg.norm(x)
    if not abs(n - 1.0) <= max(tol, 1e-15 * len(x)):
        raise ValueError(f"point is not on the unit sphere (|x| = {n!r})")


def _check_tangent(x, v, tol=None):
    tol = TANGENT_TOL if tol is None else tol
    inner = float(np.dot(x, v))
    if abs(inner) > tol * max(1.0, np.linalg.norm(v)):
        raise ValueError(f"vector is not tangent at x (<x, v> = {inner!r})")


def tangent_project(x, v):
    """Project ``v`` onto the tangent space at unit ``x``: (I - x x^T) v."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_unit(x)
    return v - np.dot(x, v) * x


def exp_map(x, v):
    """Geodesic step from ``x`` along tangent vector ``v``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_unit(x)
    _check_tangent(x, v)
    nv = np.linalg.norm(v)
    if nv < ZERO_STEP:
        return x.copy()
    out = np.cos(nv) * x + np.sin(nv) * (v / nv)
    # cos/sin rounding can leave |out| off by a few ulps
    return out / np.linalg.norm(out)


def retract(x, v, check_tangent=True):
    """Normalizing retraction (x + v) / |x + v|."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_unit(x)
    if check_tangent:
        _check_tangent(x, v)
    y = x + v
    n = np.linalg.norm(y)
    if n < DEGENERATE_NORM:
        raise DegenerateNormError("x + v vanishes; retraction undefined")
    return y / n


def rms_normalize(x, d=None):
    """RMSNorm without gain: sqrt(d) * x / |x|.

    ``d`` defaults to the length of ``x``; passing it explicitly mirrors the
    layer definition where the radius is fixed by the model width.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1] if d is None else d
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n <= 0.0):
        raise DegenerateNormError("cannot RMS-normalize a zero vector")
    return np.sqrt(d) * x / n


def relaxed_retraction_residual(x, v):
    """| RMSNorm(x + v)/sqrt(d) - R_x((I - x x^T) v) | for unit ``x``.

    This is second order in |v|: the un-projected residual update followed by
    normalization agrees with the retraction of the projected step to first
    order.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    d = x.shape[-1]
    lhs = rms_normalize(x + v, d) / np.sqrt(d)
    rhs = retract(x, tangent_project(x, v), check_tangent=False)
    return float(np.linalg.norm(lhs - rhs))


def loglog_slope(scales, errors):
    """Least-squares slope of log(errors) against log(scales)."""
    a = np.log(np.asarray(scales, dtype=float))
    b = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(a, b, 1)[0])


def random_unit(rng, d):
    x = rng.standard_normal(d)
    return x / np.linalg.norm(x)
