"""Eigenvector overlap statistics: thermalization bound, QUE normality, and
two-ensemble comparison.

The central object is the overlap array ``p_ij = <u_i, A u_j>`` of a
sample's eigenvectors against a deterministic observable.  Bulk diagonal
overlaps, normalized by ``sqrt(beta N / (2 <A0^2>))``, are tested for
Gaussianity; the off-diagonal array feeds the thermalization statistic
``sqrt(N) |p_ij - delta_ij <A>| / <A0 A0*>^(1/2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import ensembles as ens
from .observables import Observable
from .resolvents import EigenSystem, eigendecompose

__all__ = [
    "OverlapSet",
    "CltReport",
    "QueSamples",
    "bulk_range",
    "overlap_matrix",
    "eth_statistic",
    "effective_rank_ok",
    "que_samples",
    "normality_tests",
    "two_ensemble_comparison",
]

DOUBLE_FACTORIALS = {0: 1.0, 2: 1.0, 4: 3.0, 6: 15.0, 8: 105.0}


def bulk_range(n: int, delta: float) -> tuple[int, int]:
    """Index window ``[delta N, (1 - delta) N)`` as 0-based half-open bounds."""
    if not 0.0 < delta < 0.5:
        raise ValueError(f"delta must be in (0, 1/2), got {delta}")
    lo = int(math.ceil(delta * n))
    hi = int(math.floor((1.0 - delta) * n))
    if hi <= lo:
        raise ValueError(f"bulk window empty for N={n}, delta={delta}")
    return lo, hi


@dataclass
class OverlapSet:
    """Overlap array ``p = U* A U`` with its bulk window and observable."""

    p: np.ndarray
    bulk_window: tuple[int, int]
    observable: Observable

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def bulk_block(self) -> np.ndarray:
        lo, hi = self.bulk_window
        return self.p[lo:hi, lo:hi]


def overlap_matrix(
    eig: EigenSystem, observable: Observable, delta: float | None = 0.1
) -> OverlapSet:
    """All pairwise overlaps ``p_ij = <u_i, A u_j>`` of one eigensystem.

    ``delta=None`` keeps the full index range as the window.
    """
    a = observable.matrix
    if a.shape[0] != eig.n:
        raise ValueError("observable dimension does not match the eigensystem")
    p = eig.rotate(a)
    window = (0, eig.n) if delta is None else bulk_range(eig.n, delta)
    return OverlapSet(p=p, bulk_window=window, observable=observable)


def eth_statistic(ov: OverlapSet, delta: float | None = None) -> float:
    """``max_{i,j bulk} sqrt(N) |p_ij - delta_ij <A>| / <A0 A0*>^(1/2)``.

    Degree-0 homogeneous in the observable; zero for ``A = I``.
    """
    if ov.observable.hs2 == 0.0:
        return 0.0
    n = ov.n
    window = ov.bulk_window if delta is None else bulk_range(n, delta)
    lo, hi = window
    block = ov.p[lo:hi, lo:hi].copy()
    idx = np.arange(hi - lo)
    block[idx, idx] -= ov.observable.trace_avg
    return float(math.sqrt(n) * np.max(np.abs(block)) / math.sqrt(ov.observable.hs2))


def effective_rank_ok(observable: Observable, exponent: float = 0.99) -> bool:
    """The theorem's effective-rank condition ``<A0^2> N^exponent >= |A0|^2``."""
    n = observable.n
    return observable.hs2 * n**exponent >= observable.opnorm**2


def _well_separated_indices(lo, hi, count, rng):
    """Deterministically spread ``count`` indices over ``[lo, hi)``."""
    count = min(count, hi - lo)
    base = np.linspace(lo, hi - 1, count)
    return np.unique(np.round(base).astype(int))


@dataclass
class QueSamples:
    """Pooled normalized diagonal overlaps with pooling metadata."""

    values: np.ndarray
    effective_rank_ok: bool
    pooling: dict = field(default_factory=dict)
    matrix_ids: np.ndarray | None = None


def que_samples(
    spec: ens.EnsembleSpec,
    observable: Observable,
    n_samples: int,
    delta: float = 0.1,
    per_matrix: int = 8,
    seed: int = 0,
    rank_exponent: float = 0.99,
) -> QueSamples:
    """Draw samples of ``sqrt(beta N / (2 <A0^2>)) (<u_i, A u_i> - <A>)``.

    Pools up to ``per_matrix`` well-separated bulk indices from each of
    ``ceil(n_samples / per_matrix)`` independent matrices.  The effective
    rank condition ``<A0^2> >= N^(-rank_exponent) |A0|^2`` is checked and
    recorded; a degenerate observable (``<A0^2> = 0``) is rejected.
    """
    if observable.hs2 == 0.0:
        raise ValueError("observable has vanishing traceless part")
    n = spec.n
    lo, hi = bulk_range(n, delta)
    per_matrix = max(1, min(per_matrix, hi - lo))
    n_matrices = math.ceil(n_samples / per_matrix)
    norm = math.sqrt(spec.beta * n / (2.0 * observable.hs2))
    a0 = observable.traceless_part
    out = np.empty(n_matrices * per_matrix)
    mat_id = np.empty(n_matrices * per_matrix, dtype=int)
    for k in range(n_matrices):
        rng = ens.stream_rng(seed, k)
        sample = ens.sample_wigner(spec, rng=rng)
        eig = eigendecompose(sample)
        idx = _well_separated_indices(lo, hi, per_matrix, rng)
        u = eig.vectors[:, idx]
        diag = np.einsum("ij,ij->j", u.conj(), a0 @ u)
        out[k * per_matrix : (k + 1) * per_matrix] = norm * diag.real
        mat_id[k * per_matrix : (k + 1) * per_matrix] = k
    return QueSamples(
        values=out,
        effective_rank_ok=effective_rank_ok(observable, rank_exponent),
        pooling={"per_matrix": per_matrix, "n_matrices": n_matrices, "delta": delta},
        matrix_ids=mat_id,
    )


@dataclass
class CltReport:
    """Moments, KS distance and variance calibration of a pooled sample."""

    count: int
    moments: dict
    ks: float
    variance_ratio: float
    variance_target: float

    def moment_table(self):
        rows = []
        for order in sorted(self.moments):
            value, err = self.moments[order]
            target = DOUBLE_FACTORIALS.get(order, 0.0) if order % 2 == 0 else 0.0
            rows.append({"order": order, "value": value, "mc_err": err, "target": target})
        return rows


def normality_tests(samples, variance_target: float = 1.0) -> CltReport:
    """KS distance to the standard normal plus the first eight moments.

    MC error bars are one standard error of each moment estimate.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 500:
        raise ValueError(f"need at least 500 samples, got {x.size}")
    moments = {}
    for order in range(1, 9):
        xn = x**order
        moments[order] = (float(xn.mean()), float(xn.std(ddof=1) / math.sqrt(x.size)))
    ks = float(stats.kstest(x, "norm").statistic)
    m2 = moments[2][0]
    return CltReport(
        count=int(x.size),
        moments=moments,
        ks=ks,
        variance_ratio=m2 / variance_target,
        variance_target=variance_target,
    )


def _cluster_se(values, cluster_ids):
    """Standard error of the mean with matrix-level clustering."""
    means = np.array(
        [values[cluster_ids == c].mean() for c in np.unique(cluster_ids)]
    )
    if means.size < 2:
        return float("nan")
    return float(means.std(ddof=1) / math.sqrt(means.size))


def two_ensemble_comparison(
    spec_a: ens.EnsembleSpec,
    spec_b: ens.EnsembleSpec,
    observable: Observable,
    theta_moments=(2, 4),
    delta: float = 0.1,
    n_samples: int = 2000,
    per_matrix: int = 8,
    seed: int = 0,
):
    """Moment-wise comparison of normalized overlaps between two ensembles.

    Returns one row per requested moment with both values, the difference,
    and a pooled matrix-clustered standard error.  Under the comparison
    principle the differences vanish as N grows.
    """
    if spec_a.n != spec_b.n or spec_a.beta != spec_b.beta:
        raise ValueError("ensembles must share dimension and symmetry class")
    qa = que_samples(spec_a, observable, n_samples, delta, per_matrix, seed=seed)
    qb = que_samples(spec_b, observable, n_samples, delta, per_matrix, seed=seed + 1)
    rows = []
    for order in theta_moments:
        xa, xb = qa.values**order, qb.values**order
        va, vb = float(xa.mean()), float(xb.mean())
        se = math.hypot(
            _cluster_se(xa, qa.matrix_ids), _cluster_se(xb, qb.matrix_ids)
        )
        rows.append(
            {
                "moment": int(order),
                "value_a": va,
                "value_b": vb,
                "diff": va - vb,
                "mc_err": se,
            }
        )
    return rows
