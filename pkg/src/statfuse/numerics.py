"""Special functions and stable primitives.

``ln_gamma``, ``digamma`` and ``trigamma`` shift small arguments upward with
the recurrence relations and then evaluate the asymptotic (Stirling) series,
which is accurate to double precision once the argument exceeds ~12.
``inv_digamma`` uses Minka's initialisation followed by Newton steps.

Every function accepts scalars or arrays and returns the same kind.
"""

from __future__ import annotations

import math

import numpy as np

from statfuse.errors import DomainError

#: Floor applied to probabilities before taking logs.
PROB_FLOOR = 1e-10

EULER_GAMMA = 0.57721566490153286061

_LN_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SHIFT = 15  # series are evaluated at arguments >= this

# Stirling coefficients B_2n / (2n (2n-1)) for ln Gamma.
_LNGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)
# B_2n / (2n) for digamma, applied to x^-2n.
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
# B_2n for trigamma, applied to x^-(2n+1).
_TRIGAMMA_SERIES = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


def _positive_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(arr > 0):  # also rejects NaN
        bad = arr[~(arr > 0)].flat[0]
        raise DomainError(f"{name} requires x > 0, got {bad!r}")
    return arr


def _wrap(result, like):
    return float(result) if np.ndim(like) == 0 else result


def _poly(coeffs, t):
    # Horner in t for sum_i coeffs[i] * t**i
    acc = np.zeros_like(t)
    for c in reversed(coeffs):
        acc = acc * t + c
    return acc


def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _reciprocal_dd(x):
    # 1/x as an unevaluated sum r + e (Dekker)
    with np.errstate(over="ignore", invalid="ignore"):
        r = 1.0 / x
        p = r * x
        rh, rl = _split(r)
        xh, xl = _split(x)
        p_err = ((rh * xh - p) + rh * xl + rl * xh) + rl * xl
        e = ((1.0 - p) - p_err) / x
    return r, np.where(np.isfinite(e), e, 0.0)


def _two_sum_err(a, b, s):
    bb = s - a
    return (a - (s - bb)) + (b - bb)


def _shifted(arr):
    # arguments x + j for j < n, where n lifts x to at least _SHIFT
    n = np.clip(np.ceil(_SHIFT - arr), 0, _SHIFT)
    j = np.arange(_SHIFT, dtype=np.float64)
    terms = arr[..., None] + j
    mask = j < n[..., None]
    return arr + n, terms, mask, n


def ln_gamma(x):
    """Natural log of the gamma function for ``x > 0``."""
    arr = _positive_array(x, "ln_gamma")
    z, terms, mask, _ = _shifted(arr)
    prod = np.prod(np.where(mask, terms, 1.0), axis=-1)
    inv = 1.0 / z
    series = inv * _poly(_LNGAMMA_SERIES, inv * inv)
    out = (z - 0.5) * np.log(z) - z + _LN_SQRT_2PI + series - np.log(prod)
    out = np.where((arr == 1.0) | (arr == 2.0), 0.0, out)  # exact zeros
    return _wrap(out, x)


def digamma(x):
    """Digamma function psi(x) = d/dx ln Gamma(x) for ``x > 0``."""
    arr = _positive_array(x, "digamma")
    z, terms, mask, n = _shifted(arr)
    inv2 = 1.0 / (z * z)
    out = np.log(z) - 0.5 / z - inv2 * _poly(_DIGAMMA_SERIES, inv2)
    out = out - np.sum(np.where(mask[..., 1:], 1.0 / terms[..., 1:], 0.0), axis=-1)
    # 1/x dominates for tiny x; subtract it last in double-double
    recip, recip_err = _reciprocal_dd(arr)
    head = out - recip
    tail = _two_sum_err(out, -recip, head) - recip_err
    out = np.where(n > 0, head + tail, out)
    return _wrap(out, x)


def trigamma(x):
    """First derivative of the digamma function for ``x > 0``."""
    arr = _positive_array(x, "trigamma")
    z, terms, mask, _ = _shifted(arr)
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv * inv2 * _poly(_TRIGAMMA_SERIES, inv2)
    shift_sum = np.sum(np.where(mask, 1.0 / (terms * terms), 0.0), axis=-1)
    out = inv + 0.5 * inv2 + series + shift_sum
    return _wrap(out, x)


def inv_digamma(y, newton_steps: int = 5, max_steps: int = 20):
    """Solve ``digamma(x) = y`` for ``x > 0``.

    Starts from Minka's approximation (``exp(y) + 0.5`` above -2.22,
    ``-1 / (y + gamma)`` below) and takes at least ``newton_steps`` Newton
    steps, continuing (up to ``max_steps``) until the update is negligible.
    """
    arr = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("inv_digamma requires finite input")
    if newton_steps < 5:
        raise DomainError("inv_digamma needs at least 5 Newton steps")
    with np.errstate(over="ignore", divide="ignore"):
        x = np.where(arr >= -2.22, np.exp(np.minimum(arr, 700.0)) + 0.5, -1.0 / (arr + EULER_GAMMA))
    for i in range(max(newton_steps, max_steps)):
        step = (digamma(x) - arr) / trigamma(x)
        x_new = x - step
        # Newton on a concave function can only overshoot to the left
        x = np.where(x_new > 0, x_new, x / 10.0)
        if i + 1 >= newton_steps and np.all(np.abs(step) <= 1e-13 * x):
            break
    return _wrap(x, y)


def log_sum_exp(v, axis: int = -1):
    """``log(sum(exp(v)))`` along ``axis`` without overflow."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0 or arr.shape[axis] == 0:
        raise DomainError("log_sum_exp of an empty vector")
    top = np.max(arr, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    out = np.log(np.sum(np.exp(arr - top), axis=axis)) + np.squeeze(top, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def clip_probs(y, axis: int = -1):
    """Clip scores to ``[PROB_FLOOR, 1]`` and renormalise along ``axis``."""
    arr = np.clip(np.asarray(y, dtype=np.float64), PROB_FLOOR, 1.0)
    return arr / arr.sum(axis=axis, keepdims=True)


def log_probs(y, axis: int = -1):
    """Logs of clipped, renormalised probability vectors."""
    return np.log(clip_probs(y, axis=axis))
