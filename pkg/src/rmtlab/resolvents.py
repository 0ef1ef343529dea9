r"""Eigendecomposition-backed resolvent chains and error statistics.

One spectral decomposition of a sample serves every spectral parameter and
every chain built on it: an ``(z, kind)`` link becomes the diagonal kernel

- ``plain``: ``1 / (lambda - z)``
- ``abs``:   ``1 / |lambda - z|``
- ``im``:    ``Im 1 / (lambda - z)``

in the eigenbasis, and chains ``<G_1 A_1 ... G_k A_k>`` reduce to traces of
products of rotated observables against those kernels.  Dense inversion
exists only as a test oracle.

The module also provides the deterministic chain predictions (products of
weighted semicircle integrals), the normalized error statistics used by the
local-law experiments, and the two exact matrix identities that anchor the
whole engine: the Ward identity ``G G* = Im G / Im z`` and the
second-moment-renormalized self-consistent identity for the real symmetric
class, which holds exactly once the ``m G^2 / N`` correction is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import semicircle as sc
from .ensembles import WignerSample
from .errors import NumericalError
from .observables import Observable

__all__ = [
    "EigenSystem",
    "ChainLink",
    "ChainDescriptor",
    "eigendecompose",
    "chain_average",
    "chain_isotropic",
    "deterministic_chain_value",
    "psi_statistic",
    "underline_wg",
    "underline_identity_residual",
    "ward_residual",
]


@dataclass
class EigenSystem:
    """Sorted eigenvalues and orthonormal eigenvectors of one sample."""

    lambdas: np.ndarray
    vectors: np.ndarray
    source: WignerSample | None = None

    @property
    def n(self) -> int:
        return self.lambdas.size

    def rotate(self, a: np.ndarray) -> np.ndarray:
        """Conjugate a matrix into the eigenbasis: ``U* A U``."""
        u = self.vectors
        return u.conj().T @ np.asarray(a) @ u

    def rotate_vector(self, x) -> np.ndarray:
        """Coefficients ``U* x`` of a vector in the eigenbasis."""
        return self.vectors.conj().T @ np.asarray(x, dtype=self.vectors.dtype).ravel()


def eigendecompose(sample) -> EigenSystem:
    """Full spectral decomposition of a sample (or raw self-adjoint matrix).

    Raises
    ------
    NumericalError
        If the solver fails to converge or the decomposition does not
        reconstruct the matrix to ``1e-9 |W|``.
    """
    if isinstance(sample, WignerSample):
        w, src = sample.matrix, sample
    else:
        w, src = np.asarray(sample), None
    try:
        lambdas, vectors = np.linalg.eigh(w)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    scale = max(float(np.max(np.abs(w))), 1e-300)
    resid = float(np.max(np.abs(w - (vectors * lambdas) @ vectors.conj().T)))
    if resid > 1e-9 * scale:
        raise NumericalError("eigendecomposition residual above 1e-9 |W|", achieved=resid)
    return EigenSystem(lambdas=lambdas, vectors=vectors, source=src)


_KERNELS = ("plain", "abs", "im")


@dataclass(frozen=True)
class ChainLink:
    """One resolvent factor of a chain: spectral parameter plus kind."""

    z: complex
    kind: str = "plain"

    def __post_init__(self):
        if self.kind not in _KERNELS:
            raise ValueError(f"unknown link kind {self.kind!r}; expected one of {_KERNELS}")
        if self.kind in ("plain", "im") and complex(self.z).imag == 0.0:
            raise ValueError(f"{self.kind} link requires Im z != 0, got z = {self.z}")

    def kernel(self, lambdas: np.ndarray) -> np.ndarray:
        w = 1.0 / (lambdas - complex(self.z))
        if self.kind == "plain":
            return w
        if self.kind == "abs":
            return np.abs(w)
        return np.imag(w)


def _as_matrix(a):
    if isinstance(a, Observable):
        return a.matrix
    return np.asarray(a)


@dataclass
class ChainDescriptor:
    """An alternating word of resolvent links and deterministic observables.

    ``links`` is the ordered list of :class:`ChainLink`; ``observables``
    holds one entry per slot after each link.  A ``None`` slot means two
    adjacent resolvents with no matrix between them (a multi-resolvent
    group).  Averaged chains have ``len(observables) == len(links)``
    (the last observable closes the trace), isotropic chains have
    ``len(observables) == len(links) - 1``.
    """

    links: list
    observables: list = field(default_factory=list)

    def __post_init__(self):
        self.links = [
            l if isinstance(l, ChainLink) else ChainLink(*l) if isinstance(l, tuple) else ChainLink(l)
            for l in self.links
        ]
        if not self.links:
            raise ValueError("chain needs at least one link")
        k, no = len(self.links), len(self.observables)
        if no not in (k, k - 1):
            raise ValueError(
                f"{no} observables do not fit {k} links (averaged needs {k}, isotropic {k - 1})"
            )

    @property
    def mode(self) -> str:
        return "averaged" if len(self.observables) == len(self.links) else "isotropic"

    def groups(self):
        """Split into maximal runs of links separated by non-None observables.

        Returns a list of ``(links_of_group, observable_or_None)``; the final
        observable is ``None`` exactly in isotropic mode.
        """
        out = []
        run = []
        obs = list(self.observables)
        if self.mode == "isotropic":
            obs = obs + [StopIteration]  # sentinel: no closing observable
        for link, a in zip(self.links, obs):
            run.append(link)
            if a is StopIteration:
                out.append((run, None))
                run = []
            elif a is not None:
                out.append((run, a))
                run = []
        if run:
            raise ValueError("chain may not end with a None observable slot")
        return out

    def eta_rho(self):
        """``eta = min |Im z|`` and ``rho = max |Im m(z)|`` over the links."""
        eta = min(abs(complex(l.z).imag) for l in self.links)
        rho = max(abs(sc.stieltjes(l.z).imag) for l in self.links)
        return eta, rho


def chain_average(eig: EigenSystem, chain: ChainDescriptor) -> complex:
    """Normalized trace ``<G_1 A_1 ... G_k A_k>`` in the eigenbasis."""
    if chain.mode != "averaged":
        raise ValueError("chain_average needs an averaged-mode chain")
    lam = eig.lambdas
    kernels = [l.kernel(lam) for l in chain.links]
    mats = [None if a is None else eig.rotate(_as_matrix(a)) for a in chain.observables]
    if len(chain.links) == 1 and mats[0] is not None:
        return complex(np.sum(kernels[0] * np.diagonal(mats[0]))) / eig.n

    prod = None
    for w, a in zip(kernels, mats):
        factor_diag = w
        if prod is None:
            prod = np.diag(factor_diag) if a is None else (factor_diag[:, None] * a)
        else:
            prod = prod * factor_diag[None, :]
            if a is not None:
                prod = prod @ a
    return complex(np.trace(prod)) / eig.n


def chain_isotropic(eig: EigenSystem, chain: ChainDescriptor, x, y) -> complex:
    """Quadratic form ``<x, G_1 A_1 ... A_k G_{k+1} y>`` in the eigenbasis."""
    if chain.mode != "isotropic":
        raise ValueError("chain_isotropic needs an isotropic-mode chain")
    xr = eig.rotate_vector(x)
    yr = eig.rotate_vector(y)
    if np.linalg.norm(xr) == 0.0 or np.linalg.norm(yr) == 0.0:
        raise ValueError("vectors must be nonzero")
    lam = eig.lambdas
    vec = chain.links[-1].kernel(lam) * yr
    for link, a in zip(reversed(chain.links[:-1]), reversed(chain.observables)):
        if a is not None:
            vec = eig.rotate(_as_matrix(a)) @ vec
        vec = link.kernel(lam) * vec
    return complex(xr.conj() @ vec)


def deterministic_chain_value(chain: ChainDescriptor, x=None, y=None, rtol=1e-8) -> complex:
    """The deterministic prediction for a chain.

    Each group of links sharing no intervening observable contributes a
    weighted semicircle integral ``m^(j)`` (a divided difference when all
    kinds are plain); the observables contribute ``<A_1 ... A_k>`` in
    averaged mode or the matrix element ``(A_1 ... A_k)_{xy}`` (or
    ``<x, y>`` for the bare chain) in isotropic mode.
    """
    value = 1.0 + 0j
    obs_prod = None
    for links, a in chain.groups():
        value *= sc.weighted_integral([(l.z, l.kind) for l in links], rtol=rtol)
        if a is not None:
            m = _as_matrix(a)
            obs_prod = m if obs_prod is None else obs_prod @ m
    if chain.mode == "averaged":
        n = obs_prod.shape[0]
        return value * complex(np.trace(obs_prod)) / n
    x = np.asarray(x, dtype=complex).ravel()
    y = np.asarray(y, dtype=complex).ravel()
    if obs_prod is None:
        return value * complex(np.vdot(x, y))
    return value * complex(x.conj() @ obs_prod @ y)


def _strict_psi_chain(chain: ChainDescriptor):
    if any(l.kind != "plain" for l in chain.links):
        raise ValueError("psi statistics are defined for all-plain chains")
    if any(a is None for a in chain.observables):
        raise ValueError("psi statistics need one observable in every slot")
    hs = []
    for a in chain.observables:
        if not isinstance(a, Observable):
            raise ValueError("psi statistics need Observable instances with cached norms")
        if not a.is_traceless:
            raise ValueError("psi statistics are defined for traceless observables")
        hs.append(a.hs2)
    return hs


def psi_statistic(eig: EigenSystem, chain: ChainDescriptor, mode=None, x=None, y=None) -> float:
    r"""Normalized local-law error statistic of a chain on one sample.

    With ``eta = min |Im z_i|`` and ``rho = max |Im m(z_i)|``:

    - averaged, K = 0 (single link, observable I is implicit):
      ``N eta |<G - m>|``
    - averaged, K >= 1:
      ``N^{(3-K)/2} eta^{1/2} rho^{-1/2} (prod <|A_i|^2>^{1/2})^{-1}
      |<G_1 A_1 ... G_K A_K> - m_1 ... m_K <A_1 ... A_K>|``
    - isotropic (K observables, K+1 links):
      ``N^{(1-K)/2} eta^{1/2} rho^{-1/2} (|x| |y| prod <|A_i|^2>^{1/2})^{-1}
      |<x, (chain - m_1 .. m_{K+1} A_1 .. A_K) y>|``
    """
    if mode is None:
        mode = "iso" if chain.mode == "isotropic" else "av"
    n = eig.n
    eta, rho = chain.eta_rho()
    if mode == "av" and chain.mode == "averaged" and len(chain.links) == 1 and (
        _is_identity(chain.observables[0])
    ):
        z = chain.links[0].z
        g_avg = complex(np.mean(chain.links[0].kernel(eig.lambdas)))
        return n * eta * abs(g_avg - sc.stieltjes(z))

    if mode == "av":
        hs = _strict_psi_chain(chain)
        k = len(chain.observables)
        err = abs(chain_average(eig, chain) - deterministic_chain_value(chain))
        norm = math.prod(math.sqrt(h) for h in hs)
        return n ** ((3.0 - k) / 2.0) * math.sqrt(eta / rho) * err / norm
    if mode == "iso":
        if chain.mode != "isotropic":
            raise ValueError("iso mode needs an isotropic chain (one fewer observable)")
        hs = _strict_psi_chain(chain)
        k = len(chain.observables)
        err = abs(
            chain_isotropic(eig, chain, x, y)
            - deterministic_chain_value(chain, x=x, y=y)
        )
        norm = (
            float(np.linalg.norm(np.asarray(x).ravel()))
            * float(np.linalg.norm(np.asarray(y).ravel()))
            * math.prod(math.sqrt(h) for h in hs)
        )
        return n ** ((1.0 - k) / 2.0) * math.sqrt(eta / rho) * err / norm
    raise ValueError(f"unknown psi mode {mode!r}")


def _is_identity(a):
    m = _as_matrix(a)
    return m.shape[0] == m.shape[1] and np.array_equal(m, np.eye(m.shape[0], dtype=m.dtype))


def _resolvent(sample: WignerSample, z: complex) -> np.ndarray:
    n = sample.n
    return np.linalg.solve(sample.matrix - complex(z) * np.eye(n), np.eye(n))


def underline_wg(sample: WignerSample, z: complex) -> np.ndarray:
    """The second-moment renormalization of ``W G`` in the real symmetric
    class, evaluated in closed form: ``WG + <G> G + G^t G / N``.

    (The GOE-direction derivative of ``G`` averages to ``-<G> G - G^t G/N``,
    which is what the renormalization subtracts from ``W G``.)
    """
    if sample.spec.beta != 1:
        raise ValueError("underline renormalization implemented for the real class only")
    if complex(z).imag == 0.0:
        raise ValueError("need Im z != 0")
    g = _resolvent(sample, z)
    return sample.matrix @ g + (np.trace(g) / sample.n) * g + g.T @ g / sample.n


def underline_identity_residual(
    sample: WignerSample, z: complex, include_g2_correction: bool = True
) -> float:
    """Max-entry norm of ``G - m + m WG_ + m <G - m> G - m G^2 / N`` with
    ``WG_`` the renormalized product; exactly zero in exact arithmetic.

    With ``include_g2_correction=False`` the ``m G^2 / N`` term is dropped
    and the residual equals ``|m| |G^2| / N`` up to rounding, exposing the
    size of the correction.
    """
    g = _resolvent(sample, z)
    m = sc.stieltjes(z)
    n = sample.n
    r = g - m * np.eye(n) + m * underline_wg(sample, z) - m * (np.trace(g) / n - m) * g
    if include_g2_correction:
        r = r - m * (g @ g) / n
    return float(np.max(np.abs(r)))


def ward_residual(eig: EigenSystem, z: complex) -> float:
    """Max-entry norm of ``G G* - Im G / Im z``; an exact identity for any
    self-adjoint matrix, so the result is pure floating-point noise."""
    z = complex(z)
    if z.imag == 0.0:
        raise ValueError("need Im z != 0")
    u = eig.vectors
    w = 1.0 / (eig.lambdas - z)
    g = (u * w) @ u.conj().T
    lhs = g @ g.conj().T
    rhs = (u * (w.imag / z.imag)) @ u.conj().T
    return float(np.max(np.abs(lhs - rhs)))
