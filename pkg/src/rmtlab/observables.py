"""Deterministic test matrices and their bookkeeping.

An :class:`Observable` wraps a self-adjoint matrix ``A`` together with its
normalized trace ``<A>``, the traceless part ``A - <A> I``, the
Hilbert-Schmidt datum ``<|A - <A>|^2>`` and the operator norm of the
traceless part.  The structured families used by the experiments are the
Haar-rotated mesoscopic family (``N^alpha`` equal-magnitude singular
values), coordinate projectors, and the centred rank-one matrices that turn
averaged chains into isotropic ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Observable",
    "traceless",
    "alpha_mesoscopic",
    "coordinate_projector",
    "rank_one_iso",
    "haar_orthogonal",
]


@dataclass
class Observable:
    """A deterministic self-adjoint test matrix with cached norms.

    Attributes
    ----------
    matrix : ndarray
        The matrix ``A`` itself.
    trace_avg : float or complex
        ``<A> = Tr A / N``.
    hs2 : float
        ``<|A0|^2>`` with ``A0 = A - <A> I`` the traceless part.
    opnorm : float
        Largest singular value of the traceless part.
    alpha : float or None
        Mesoscopic exponent tag; when set, ``opnorm^2 == N^(1-alpha) hs2``
        holds to 1e-10 relative accuracy.
    """

    matrix: np.ndarray
    trace_avg: complex
    hs2: float
    opnorm: float
    alpha: float | None = None
    _traceless: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def traceless_part(self) -> np.ndarray:
        return self._traceless

    @property
    def is_traceless(self) -> bool:
        return abs(self.trace_avg) <= 1e-13 * max(1.0, self.opnorm)


def traceless(a: np.ndarray, alpha: float | None = None) -> Observable:
    """Wrap a self-adjoint matrix, computing its traceless projection and norms.

    Raises
    ------
    ValueError
        If the input deviates from self-adjointness beyond 1e-12
        (relative to its largest entry).
    """
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"observable must be a square matrix, got shape {a.shape}")
    scale = max(float(np.max(np.abs(a))), 1.0)
    defect = float(np.max(np.abs(a - a.conj().T)))
    if defect > 1e-12 * scale:
        raise ValueError(f"matrix is not self-adjoint (defect {defect:.3e})")
    n = a.shape[0]
    tr = complex(np.trace(a)) / n
    if abs(tr.imag) < 1e-14 * max(1.0, abs(tr)):
        tr = tr.real
    a0 = a - tr * np.eye(n, dtype=a.dtype)
    hs2 = float(np.sum(np.abs(a0) ** 2)) / n
    opnorm = float(np.max(np.abs(np.linalg.eigvalsh(a0)))) if hs2 > 0 else 0.0
    return Observable(
        matrix=a, trace_avg=tr, hs2=hs2, opnorm=opnorm, alpha=alpha, _traceless=a0
    )


def haar_orthogonal(n: int, rng) -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-fixed QR."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def alpha_mesoscopic(n: int, alpha: float, seed=0) -> Observable:
    """Traceless matrix with ``round(N^alpha)`` equal-magnitude singular values.

    Realized as a Haar-rotated two-block spectrum: half the nonzero
    eigenvalues at ``+c`` and half at ``-c`` (the count is rounded to the
    nearest even integer, at least 2, so that the trace vanishes exactly),
    normalized so that ``<|A|^2> = 1``.  The stored ``alpha`` tag is the
    effective exponent ``log_N r`` of the realized rank ``r``, for which
    ``|A|^2 = N^(1-alpha) <|A|^2>`` holds exactly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if n < 2:
        raise ValueError("need n >= 2")
    r = int(round(n**alpha))
    r = max(2, min(n, r + (r % 2)))
    c = math.sqrt(n / r)
    vals = np.zeros(n)
    vals[: r // 2] = c
    vals[r // 2 : r] = -c
    q = haar_orthogonal(n, np.random.default_rng(seed))
    a = (q * vals) @ q.T
    a = (a + a.T) / 2.0
    a -= (np.trace(a) / n) * np.eye(n)
    obs = traceless(a, alpha=math.log(r) / math.log(n))
    return obs


def coordinate_projector(n: int, s) -> Observable:
    """Diagonal 0/1 projector onto the coordinate set ``s``.

    The traceless part is ``P_S - (|S|/N) I`` with Hilbert-Schmidt datum
    ``|S|/N - (|S|/N)^2``.

    Raises
    ------
    ValueError
        If ``s`` is empty or all of ``[N]`` (the traceless part vanishes).
    """
    s = sorted(set(int(i) for i in s))
    if not s:
        raise ValueError("coordinate set is empty")
    if any(i < 0 or i >= n for i in s):
        raise ValueError(f"coordinate set not contained in range(0, {n})")
    if len(s) == n:
        raise ValueError("coordinate set is all of [N]; traceless part is degenerate")
    diag = np.zeros(n)
    diag[s] = 1.0
    return traceless(np.diag(diag))


def rank_one_iso(x, y, hermitize: bool = False):
    """The centred rank-one matrix ``N y x* - <x, y> I``.

    Appending this matrix to an averaged chain recovers the isotropic form:
    ``<B (N y x* - <x,y>)> = <x, B y> - <x, y> <B>`` for any ``B``.  The
    matrix is traceless but generally not self-adjoint; with
    ``hermitize=True`` the Hermitian part ``(M + M*)/2`` is wrapped as an
    :class:`Observable` for use in self-adjoint statistics.
    """
    x = np.asarray(x, dtype=complex).ravel()
    y = np.asarray(y, dtype=complex).ravel()
    if x.size != y.size:
        raise ValueError("vectors must have equal length")
    if np.linalg.norm(x) == 0.0 or np.linalg.norm(y) == 0.0:
        raise ValueError("vectors must be nonzero")
    n = x.size
    m = n * np.outer(y, x.conj()) - np.vdot(x, y) * np.eye(n)
    if np.max(np.abs(m.imag)) == 0.0:
        m = m.real
    if hermitize:
        return traceless((m + m.conj().T) / 2.0)
    return m
