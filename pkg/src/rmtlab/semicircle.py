r"""Deterministic semicircle-law analytics.

Everything in this module is a pure function of its arguments: the Stieltjes
transform ``m(z)`` of the semicircle density, its derivatives and divided
differences, weighted integrals against the semicircle with resolvent-type
factors, and quantiles of the (time-rescaled) semicircle.

Conventions
-----------
The semicircle density is ``rho_sc(x) = sqrt(4 - x^2) / (2 pi)`` on the
support ``[-2, 2]``.  Its Stieltjes transform is the root of

    m^2 + z m + 1 = 0

with ``Im m(z) * Im z > 0``; for real ``z`` outside the support the root
with ``|m| < 1`` is taken.  The time-rescaled density used by the flow
modules is ``rho_t(x) = rho_sc(x / sqrt(1+t)) / sqrt(1+t)``, i.e. the
semicircle with entry variance ``(1+t)/N``, supported on
``[-2 sqrt(1+t), 2 sqrt(1+t)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from .errors import NumericalError

SUPPORT = (-2.0, 2.0)

__all__ = [
    "SUPPORT",
    "SpectralPoint",
    "stieltjes",
    "stieltjes_derivative",
    "density",
    "rho_and_distance",
    "distance_to_support",
    "divided_difference",
    "divided_difference_quadrature",
    "weighted_integral",
    "semicircle_cdf",
    "quantile",
    "quantiles",
]


def _check_off_support(z: complex) -> complex:
    z = complex(z)
    if z.imag == 0.0 and abs(z.real) <= 2.0:
        raise ValueError(f"z = {z} lies on the support [-2, 2]; m(z) is undefined there")
    return z


def stieltjes(z: complex) -> complex:
    r"""Stieltjes transform ``m(z)`` of the semicircle law.

    Returns the root of ``m^2 + z m + 1 = 0`` with ``Im m * Im z > 0``
    (equivalently ``|m| < 1`` for real ``z`` off the support).  The branch
    is realized as ``m = -2 / (z + sqrt(z-2) sqrt(z+2))`` with principal
    square roots, which places the cut exactly on ``[-2, 2]`` and avoids
    the large-``|z|`` cancellation of the textbook ``(sqrt(z^2-4) - z)/2``.

    Raises
    ------
    ValueError
        If ``z`` lies on the real interval ``[-2, 2]``.
    """
    z = _check_off_support(z)
    s = np.sqrt(complex(z - 2.0)) * np.sqrt(complex(z + 2.0))
    return complex(-2.0 / (z + s))


def density(x):
    """Semicircle density ``sqrt(4 - x^2) / (2 pi)``, zero off the support."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(np.clip(4.0 - x * x, 0.0, None)) / (2.0 * np.pi)


def distance_to_support(z: complex) -> float:
    """Euclidean distance from ``z`` to the segment ``[-2, 2]``."""
    z = complex(z)
    dx = max(abs(z.real) - 2.0, 0.0)
    return math.hypot(dx, z.imag)


def rho_and_distance(z: complex) -> tuple[float, float]:
    """Return ``(|Im m(z)|, dist(z, [-2, 2]))``."""
    return abs(stieltjes(z).imag), distance_to_support(z)


@dataclass(frozen=True)
class SpectralPoint:
    """A spectral parameter with its derived local-law quantities.

    Attributes
    ----------
    z : complex
        The spectral parameter.
    eta : float
        ``|Im z|``.
    rho : float
        ``|Im m(z)|``, the semicircle density at scale eta.
    d : float
        Distance from ``z`` to the support ``[-2, 2]``.
    """

    z: complex
    eta: float
    rho: float
    d: float

    @classmethod
    def from_z(cls, z: complex) -> "SpectralPoint":
        z = complex(z)
        rho, d = rho_and_distance(z)
        return cls(z=z, eta=abs(z.imag), rho=rho, d=d)


# Derivatives of m from differentiating the fixed point -1/m = m + z:
#   m'   = m^2 / (1 - m^2)
#   m''  = 2 m^3 / (1 - m^2)^3
#   m''' = 6 m^4 (1 + m^2) / (1 - m^2)^5
#   m'''' = 24 m^5 (1 + 3 m^2 + m^4) / (1 - m^2)^7
_MAX_DERIVATIVE = 4


def stieltjes_derivative(z: complex, order: int = 1) -> complex:
    """``order``-th derivative of ``m`` at ``z`` (closed form, order <= 4)."""
    if not 0 <= order <= _MAX_DERIVATIVE:
        raise ValueError(f"derivative order must be in [0, {_MAX_DERIVATIVE}], got {order}")
    m = stieltjes(z)
    if order == 0:
        return m
    u = 1.0 - m * m
    if order == 1:
        return m * m / u
    if order == 2:
        return 2.0 * m**3 / u**3
    if order == 3:
        return 6.0 * m**4 * (1.0 + m * m) / u**5
    return 24.0 * m**5 * (1.0 + 3.0 * m * m + m**4) / u**7


def _sort_with_ties(zs):
    # Divided differences are symmetric; sort so confluent nodes are adjacent.
    return sorted((complex(z) for z in zs), key=lambda w: (w.real, w.imag))


def divided_difference(zs, rtol: float = 1e-8, cross_check: bool = False) -> complex:
    """Divided difference ``m[z_1, ..., z_l]`` of the Stieltjes transform.

    Repeated nodes are allowed (confluent case) and handled through the
    closed-form derivatives of ``m`` up to order 4; deeper confluency falls
    back to the quadrature route.  With ``cross_check=True`` the Newton-table
    value is verified against :func:`divided_difference_quadrature` to
    relative tolerance ``rtol``.

    Raises
    ------
    ValueError
        On an empty node list or a node on the support.
    NumericalError
        If the cross-check disagrees beyond ``rtol``.
    """
    zs = list(zs)
    if not zs:
        raise ValueError("divided difference of an empty node list")
    nodes = _sort_with_ties(zs)
    for z in nodes:
        _check_off_support(z)

    max_confluency = 1
    run = 1
    for a, b in zip(nodes, nodes[1:]):
        run = run + 1 if a == b else 1
        max_confluency = max(max_confluency, run)
    if max_confluency - 1 > _MAX_DERIVATIVE:
        return divided_difference_quadrature(zs, rtol=rtol)

    n = len(nodes)
    # table[i][j] = m[nodes[i], ..., nodes[j]]
    table = [[0j] * n for _ in range(n)]
    for i in range(n):
        table[i][i] = stieltjes(nodes[i])
    for width in range(1, n):
        for i in range(n - width):
            j = i + width
            if nodes[i] == nodes[j]:
                table[i][j] = stieltjes_derivative(nodes[i], width) / math.factorial(width)
            else:
                table[i][j] = (table[i + 1][j] - table[i][j - 1]) / (nodes[j] - nodes[i])
    value = table[0][n - 1]

    if cross_check:
        ref = divided_difference_quadrature(zs, rtol=rtol)
        scale = max(abs(value), abs(ref), 1e-300)
        if abs(value - ref) / scale > 10.0 * rtol:
            raise NumericalError(
                f"divided difference cross-check failed: table={value}, quadrature={ref}",
                achieved=abs(value - ref) / scale,
            )
    return value


def divided_difference_quadrature(zs, rtol: float = 1e-8) -> complex:
    """Divided difference via the integral representation.

    ``m[z_1, ..., z_l] = int rho_sc(x) prod_i (x - z_i)^{-1} dx``; repeated
    nodes simply repeat the factor, so the confluent case needs no special
    treatment here.
    """
    zs = list(zs)
    if not zs:
        raise ValueError("divided difference of an empty node list")
    return weighted_integral([(z, "plain") for z in zs], rtol=rtol)


_KINDS = ("plain", "abs", "im")


def weighted_integral(factors, rtol: float = 1e-8) -> complex:
    r"""Integrate the semicircle density against resolvent-type factors.

    Computes ``int_{-2}^{2} rho_sc(x) prod_i g_i(x) dx`` where each factor
    ``(z, kind)`` selects

    - ``plain``: ``g(x) = 1 / (x - z)``
    - ``abs``:   ``g(x) = 1 / |x - z|``
    - ``im``:    ``g(x) = Im 1 / (x - z)``

    The endpoint square-root singularity of the density is removed by the
    substitution ``x = 2 sin(theta)``; the integral is then evaluated by
    adaptive Gauss-Kronrod quadrature with break points at the projections
    of the spectral parameters onto the support.

    Raises
    ------
    NumericalError
        If the quadrature error estimate exceeds the target; the achieved
        relative error is reported on the exception.
    """
    factors = [(complex(z), str(kind)) for z, kind in factors]
    if not factors:
        raise ValueError("weighted integral of an empty factor list")
    for z, kind in factors:
        if kind not in _KINDS:
            raise ValueError(f"unknown factor kind {kind!r}; expected one of {_KINDS}")
        _check_off_support(z)

    def integrand(theta):
        x = 2.0 * math.sin(theta)
        c = math.cos(theta)
        val = (2.0 / math.pi) * c * c
        out = complex(val, 0.0)
        for z, kind in factors:
            w = x - z
            if kind == "plain":
                out *= 1.0 / w
            elif kind == "abs":
                out *= 1.0 / abs(w)
            else:
                out *= (1.0 / w).imag
        return out

    # break points where a factor passes closest to the support
    points = sorted(
        {math.asin(z.real / 2.0) for z, _ in factors if abs(z.real) < 2.0}
    )
    half = math.pi / 2.0
    re, re_err = quad(
        lambda t: integrand(t).real, -half, half,
        points=points or None, limit=400, epsabs=0.0, epsrel=rtol,
    )
    im, im_err = quad(
        lambda t: integrand(t).imag, -half, half,
        points=points or None, limit=400, epsabs=0.0, epsrel=rtol,
    )
    value = complex(re, im)
    err = math.hypot(re_err, im_err)
    scale = max(abs(value), 1e-300)
    if err / scale > 100.0 * rtol:
        raise NumericalError(
            f"weighted semicircle integral did not converge to rtol={rtol}",
            achieved=err / scale,
        )
    return value


def semicircle_cdf(x, t: float = 0.0):
    """CDF of the semicircle law at flow time ``t`` (variance ``1 + t``).

    The closed form at ``t = 0`` is
    ``F(x) = 1/2 + x sqrt(4 - x^2) / (4 pi) + arcsin(x/2) / pi``; at other
    times the argument is rescaled by ``sqrt(1 + t)``.
    """
    scale = math.sqrt(1.0 + t)
    y = np.clip(np.asarray(x, dtype=float) / scale, -2.0, 2.0)
    return 0.5 + y * np.sqrt(4.0 - y * y) / (4.0 * np.pi) + np.arcsin(y / 2.0) / np.pi


@lru_cache(maxsize=64)
def _base_quantiles(n: int) -> np.ndarray:
    # gamma_i solving F(gamma) = i/N at t = 0, by vectorized bisection.
    targets = np.arange(1, n + 1) / n
    lo = np.full(n, -2.0)
    hi = np.full(n, 2.0)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = semicircle_cdf(mid) < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    out.setflags(write=False)
    return out


def quantile(i: int, n: int, t: float = 0.0) -> float:
    """Quantile ``gamma_i(t)`` with ``int_{-inf}^{gamma} rho_t = i/N``.

    Solved by bisection on the closed-form CDF to absolute tolerance 1e-10.
    Under the variance-consistent rescaling ``gamma_i(t) =
    sqrt(1+t) gamma_i(0)`` exactly.
    """
    if not 1 <= i <= n:
        raise ValueError(f"quantile index i={i} outside [1, {n}]")
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    return float(_base_quantiles(n)[i - 1]) * math.sqrt(1.0 + t)


def quantiles(n: int, t: float = 0.0) -> np.ndarray:
    """All quantiles ``gamma_1(t), ..., gamma_N(t)`` as an array."""
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    return _base_quantiles(n) * math.sqrt(1.0 + t)
