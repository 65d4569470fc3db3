"""Deterministic surrogates for chance constraints ``P[y <= 0] >= alpha``.

The chance constraint is replaced by ``mean(y) + z(alpha) * std(y) <= 0``
where the coefficient depends on what is assumed about the distribution of
``y``:

* ``"chebyshev"``: any distribution with finite variance,
* ``"symmetric"``: symmetric distributions,
* ``"gaussian"``: normal distributions (the standard normal quantile).
"""
from __future__ import annotations

import math
from decimal import Decimal, localcontext

import numpy as np

from .errors import ApproximationInvalidError, ParameterError

CHEBYSHEV = "chebyshev"
SYMMETRIC = "symmetric"
GAUSSIAN = "gaussian"
APPROXIMATIONS = (CHEBYSHEV, SYMMETRIC, GAUSSIAN)

# Acklam's rational approximation of the standard normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse of the standard normal CDF.

    Rational initial guess refined by one Halley step against the erfc-based
    CDF; relative accuracy is close to machine precision on (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise ParameterError(f"probability must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    # Halley refinement; the tail branch uses the upper tail to avoid cancellation
    if p > 0.5:
        e = 0.5 * math.erfc(x / math.sqrt(2.0)) - (1.0 - p)
        e = -e
    else:
        e = normal_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def z_coeff(approx: str, alpha: float) -> float:
    """Tightening coefficient ``z(alpha)`` for the given distribution assumption."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if approx in (CHEBYSHEV, SYMMETRIC):
        # evaluated on the shortest decimal form of alpha so that 0.9 gives exactly 3
        with localcontext() as ctx:
            ctx.prec = 40
            a = Decimal(repr(float(alpha)))
            r = a / (1 - a) if approx == CHEBYSHEV else 1 / (2 * (1 - a))
            return float(r.sqrt())
    if approx == GAUSSIAN:
        return normal_quantile(alpha)
    raise ParameterError(f"unknown constraint approximation {approx!r}")


def tighten(mean, var, z):
    """``mean + z * sqrt(max(var, 0))``; feasible when the result is <= 0."""
    return mean + z * np.sqrt(np.maximum(var, 0.0))


def mc_confidence(n_samples: int, alpha: float, check: bool = True,
                  min_count: float = 5.0) -> float:
    """Confidence that ``alpha`` is met when all ``n_samples`` samples satisfy the constraint.

    Uses the normal approximation of the sample proportion, accepted when
    ``n alpha`` and ``n (1 - alpha)`` both reach ``min_count``.  The default 5
    is the common rule of thumb; 10 is the stricter variant.  Pass
    ``check=False`` to evaluate the formula outside that range.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    lo = min(n_samples * alpha, n_samples * (1.0 - alpha))
    if check and lo < min_count - 1e-9:
        raise ApproximationInvalidError(
            f"normal approximation invalid for Ns={n_samples}, alpha={alpha}: "
            f"need Ns*alpha and Ns*(1-alpha) >= {min_count:g}")
    return normal_cdf(math.sqrt(n_samples * (1.0 - alpha) / alpha))
