"""Wigner ensembles and matrix-level stochastic flows.

Real symmetric (beta = 1) and complex Hermitian (beta = 2) Wigner matrices
with selectable entry distributions, plus the additive Brownian flow, the
Ornstein-Uhlenbeck flow and the Gaussian interpolation used by comparison
experiments.

Entry normalization: off-diagonal entries have variance ``1/N`` at time 0
and ``(1 + t)/N`` after flow time ``t``; diagonal variance is twice that in
the real class (``E chi_d^2 = 2``) and equal to it in the complex class.
Every returned matrix is exactly self-adjoint: the strict upper triangle is
drawn and mirrored, so ``W[a, b] == conj(W[b, a])`` bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

__all__ = [
    "EnsembleSpec",
    "WignerSample",
    "sample_wigner",
    "brownian_increment",
    "ou_step",
    "ou_variance_constant",
    "gaussian_interpolate",
    "stream_rng",
    "symmetric_brownian",
]

_SQRT3 = math.sqrt(3.0)

#: named scalar distributions for the entry variables, all mean 0 variance 1
_NAMED_DISTS = ("gaussian", "rademacher", "uniform")


def stream_rng(seed, *stream) -> np.random.Generator:
    """Independent generator for worker/cell ``stream`` derived from ``seed``.

    Uses numpy's splittable ``SeedSequence`` so that streams indexed by
    different keys are statistically independent and reproducible regardless
    of scheduling.
    """
    key = tuple(int(s) for s in stream)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _draw(dist, rng, size, scale=1.0):
    """Draw mean-0 samples with variance ``scale`` from a named distribution
    or a ``(values, probs)`` table."""
    if isinstance(dist, str):
        if dist == "gaussian":
            out = rng.standard_normal(size)
        elif dist == "rademacher":
            out = rng.integers(0, 2, size) * 2.0 - 1.0
        elif dist == "uniform":
            out = rng.uniform(-_SQRT3, _SQRT3, size)
        else:
            raise ConfigError(
                f"unknown distribution {dist!r}; expected one of {_NAMED_DISTS} or a (values, probs) table"
            )
    else:
        values, probs = dist
        out = rng.choice(np.asarray(values, dtype=float), size=size, p=np.asarray(probs, dtype=float))
    if scale != 1.0:
        out = out * math.sqrt(scale)
    return out


def _validate_dist(dist, what):
    if isinstance(dist, str):
        if dist not in _NAMED_DISTS:
            raise ConfigError(f"unknown {what} distribution {dist!r}")
        return dist
    try:
        values, probs = dist
        values = np.asarray(values, dtype=float)
        probs = np.asarray(probs, dtype=float)
    except Exception as exc:
        raise ConfigError(f"{what} distribution must be a name or (values, probs) table") from exc
    if values.shape != probs.shape or values.ndim != 1:
        raise ConfigError(f"{what} table values/probs must be 1-d and matching")
    if abs(probs.sum() - 1.0) > 1e-12 or np.any(probs < 0):
        raise ConfigError(f"{what} table probabilities must be nonnegative and sum to 1")
    mean = float(values @ probs)
    var = float((values - mean) ** 2 @ probs)
    if abs(mean) > 1e-12 or abs(var - 1.0) > 1e-10:
        raise ConfigError(f"{what} table must have mean 0 and variance 1 (got {mean}, {var})")
    return (tuple(values.tolist()), tuple(probs.tolist()))


@dataclass(frozen=True)
class EnsembleSpec:
    """Parameters of a Wigner ensemble under the standard moment assumptions.

    ``offdiag`` names the distribution of the off-diagonal variable (mean 0,
    variance 1); ``diag`` the diagonal one, drawn with the class-appropriate
    variance (2 for beta = 1, 1 for beta = 2).  For beta = 2 the off-diagonal
    entries get independent real and imaginary parts of variance 1/2 each,
    which enforces ``E chi_od^2 = 0`` by construction.
    """

    n: int
    beta: int = 1
    offdiag: object = "gaussian"
    diag: object = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"matrix dimension must be >= 2, got {self.n}")
        if self.beta not in (1, 2):
            raise ConfigError(f"beta must be 1 or 2, got {self.beta}")
        object.__setattr__(self, "offdiag", _validate_dist(self.offdiag, "offdiag"))
        object.__setattr__(self, "diag", _validate_dist(self.diag, "diag"))

    @property
    def is_gaussian(self) -> bool:
        return self.offdiag == "gaussian" and self.diag == "gaussian"


@dataclass
class WignerSample:
    """One drawn matrix with its ensemble metadata and accumulated flow time."""

    spec: EnsembleSpec
    matrix: np.ndarray
    time: float = 0.0

    @property
    def n(self) -> int:
        return self.spec.n


def _assemble(upper, diag_vals, n, complex_entries):
    dtype = complex if complex_entries else float
    w = np.zeros((n, n), dtype=dtype)
    iu = np.triu_indices(n, k=1)
    w[iu] = upper
    w = w + w.conj().T
    w[np.diag_indices(n)] = diag_vals
    return w


def sample_wigner(spec: EnsembleSpec, rng=None) -> WignerSample:
    """Draw one Wigner matrix: upper triangle iid ``chi_od / sqrt(N)``,
    diagonal ``chi_d / sqrt(N)``, mirrored; flow time tag 0."""
    if rng is None:
        rng = stream_rng(spec.seed)
    n = spec.n
    m = n * (n - 1) // 2
    root_n = math.sqrt(n)
    if spec.beta == 1:
        upper = _draw(spec.offdiag, rng, m) / root_n
        diag = _draw(spec.diag, rng, n, scale=2.0) / root_n
        w = _assemble(upper, diag, n, complex_entries=False)
    else:
        re = _draw(spec.offdiag, rng, m, scale=0.5)
        im = _draw(spec.offdiag, rng, m, scale=0.5)
        upper = (re + 1j * im) / root_n
        diag = _draw(spec.diag, rng, n) / root_n
        w = _assemble(upper, diag, n, complex_entries=True)
    return WignerSample(spec=spec, matrix=w, time=0.0)


def symmetric_brownian(n, dt, rng, beta=1):
    """Matrix Brownian increment over time ``dt``.

    Real class: independent Gaussians, off-diagonal variance ``dt``,
    diagonal variance ``2 dt``.  Complex class: off-diagonal complex with
    total variance ``dt``, diagonal real with variance ``dt``.
    """
    m = n * (n - 1) // 2
    if beta == 1:
        upper = rng.standard_normal(m) * math.sqrt(dt)
        diag = rng.standard_normal(n) * math.sqrt(2.0 * dt)
        return _assemble(upper, diag, n, complex_entries=False)
    upper = (rng.standard_normal(m) + 1j * rng.standard_normal(m)) * math.sqrt(dt / 2.0)
    diag = rng.standard_normal(n) * math.sqrt(dt)
    return _assemble(upper, diag, n, complex_entries=True)


def brownian_increment(sample: WignerSample, dt: float, rng) -> WignerSample:
    """One additive step ``W -> W + dB / sqrt(N)`` of the matrix flow."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if dt == 0:
        return replace(sample, matrix=sample.matrix.copy())
    n = sample.n
    db = symmetric_brownian(n, dt, rng, beta=sample.spec.beta)
    return WignerSample(
        spec=sample.spec,
        matrix=sample.matrix + db / math.sqrt(n),
        time=sample.time + dt,
    )


def ou_step(sample: WignerSample, dt: float, rng) -> WignerSample:
    """Euler-Maruyama step of the Ornstein-Uhlenbeck flow
    ``dW = -(1/2) W dt + dB / sqrt(N)``; entry moments preserved to O(dt^2)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = sample.n
    db = symmetric_brownian(n, dt, rng, beta=sample.spec.beta)
    w = sample.matrix * (1.0 - dt / 2.0) + db / math.sqrt(n)
    # OU is stationary at unit entry variance: the time tag stays put
    return WignerSample(spec=sample.spec, matrix=w, time=sample.time)


def ou_variance_constant(t: float) -> float:
    """The variance-matching constant ``c(T) = (1 - exp(-T)) / T``: the OU
    flow at time T equals ``sqrt(1-cT) W + sqrt(cT) U`` in law at the
    Gaussian level, with U an independent GOE/GUE matrix."""
    if t <= 0:
        raise ValueError("T must be positive")
    return -math.expm1(-t) / t


def gaussian_interpolate(w_tilde: WignerSample, u_goe: WignerSample, t: float) -> WignerSample:
    """``sqrt(1 - cT) W~ + sqrt(cT) U`` with the OU variance-matching c(T).

    Entry variance is exactly ``1/N`` in expectation for any ``T in (0, 1)``.
    """
    if not 0 < t < 1:
        raise ValueError(f"interpolation time must be in (0, 1), got {t}")
    if w_tilde.n != u_goe.n or w_tilde.spec.beta != u_goe.spec.beta:
        raise ValueError("interpolation requires matching dimension and symmetry class")
    if not u_goe.spec.is_gaussian:
        raise ValueError("second argument must come from the Gaussian ensemble")
    ct = ou_variance_constant(t) * t
    w = math.sqrt(1.0 - ct) * w_tilde.matrix + math.sqrt(ct) * u_goe.matrix
    return WignerSample(spec=w_tilde.spec, matrix=w, time=0.0)
