r"""Dyson Brownian motion at matrix and spectral level.

Two integrators produce eigenvalue/eigenvector trajectories of the additive
flow ``dW = dB / sqrt(N)``:

``matrix-diagonalize``
    Adds an exact matrix Brownian increment per grid step and
    re-diagonalizes; exact in distribution at the grid times, immune to
    stiffness.  Frames are matched for continuity (positive overlap with
    the previous slice); a best-overlap assignment that deviates from the
    sorted order is counted as a non-crossing violation.

``sde-integrate``
    Euler-Maruyama on the eigenvalue SDE

        d lambda_i = dB_ii / sqrt(N) + (1/N) sum_j 1/(lambda_i - lambda_j) dt

    coupled with the eigenvector flow.  The vector flow is integrated by a
    Cayley rotation: the noise matrix ``K_{ji} = dB_ij / (sqrt(N)
    (lambda_i - lambda_j))`` is antisymmetric and its Ito correction is
    exactly the ``-dt/(2N) sum_j (lambda_i - lambda_j)^{-2}`` drift, so the
    orthogonal update ``U <- U cay(K)`` reproduces the flow weakly to first
    order while keeping the frame orthonormal to machine precision.

The spectral route is what makes conditioning on the eigenvalue path
possible: :func:`conditional_vector_ensemble` re-runs only the eigenvector
flow with fresh off-diagonal noise along a frozen path, which samples the
conditional law of the frames given the eigenvalues.

Step control: substeps obey ``dt <= c0 N g^2`` where ``g`` is the minimal
eigenvalue gap, optionally restricted to pairs near a set of tracked sites
(remote near-degenerate pairs only spin internally, which bulk observables
at the tracked sites cannot see; resolving them globally would force
O(N^{-3/2})-sized steps).  A step that would cross eigenvalues is retried
with half the step, and failure is reported with diagnostics.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import semicircle as sc
from .ensembles import WignerSample, stream_rng, symmetric_brownian
from .errors import NumericalError
from .resolvents import eigendecompose

__all__ = [
    "DbmTrajectory",
    "simulate_trajectory",
    "rigidity_check",
    "conditional_vector_ensemble",
    "conditional_overlap_paths",
    "save_trajectory",
    "load_trajectory",
]

_METHODS = ("matrix-diagonalize", "sde-integrate")


@dataclass
class DbmTrajectory:
    """Eigenvalue (and optionally frame) paths on an increasing time grid.

    ``times`` are relative to the start of the run; ``time0`` carries the
    accumulated flow time of the initial sample so that quantiles at grid
    time ``t`` use the variance ``1 + time0 + t``.
    """

    times: np.ndarray
    lambdas: np.ndarray
    vectors: np.ndarray | None
    noise_seed: int
    method: str
    time0: float = 0.0
    crossings: int = 0

    @property
    def n(self) -> int:
        return self.lambdas.shape[1]

    @property
    def steps(self) -> int:
        return self.times.size - 1


def _sign_match(u_prev, u_new):
    """Sign-fix ``u_new`` columns for positive overlap with ``u_prev``;
    report how many columns best-match a different index (crossings)."""
    overlap = u_prev.T @ u_new
    best = np.argmax(np.abs(overlap), axis=0)
    crossings = int(np.sum(best != np.arange(u_new.shape[1])))
    d = np.diagonal(overlap)
    signs = np.where(d >= 0.0, 1.0, -1.0)
    return u_new * signs, crossings


def _repulsion_drift(lam):
    diff = lam[:, None] - lam[None, :]
    np.fill_diagonal(diff, np.inf)
    return np.sum(1.0 / diff, axis=1) / lam.size


def _min_gap(lam, sites=None, margin=16):
    gaps = np.diff(lam)
    if sites is None:
        return float(gaps.min())
    n = lam.size
    mask = np.zeros(n - 1, dtype=bool)
    for s in np.atleast_1d(sites):
        lo = max(0, int(s) - margin)
        hi = min(n - 1, int(s) + margin)
        mask[lo:hi] = True
    return float(gaps[mask].min()) if mask.any() else float(gaps.min())


def _cayley_rotate(u, k):
    """Exactly orthogonal update ``u @ cay(k)`` for antisymmetric ``k``
    (batched over leading axes)."""
    n = k.shape[-1]
    eye = np.eye(n)
    q = np.linalg.solve(eye - 0.5 * k, eye + 0.5 * k)
    return u @ q


def _vector_noise_k(lam, db_over, sqrt_n):
    """Antisymmetric rotation generator from a symmetric off-diagonal noise
    array: ``K[j, i] = dB_ij / (sqrt(N) (lambda_i - lambda_j))``."""
    delta = lam[None, :] - lam[:, None]  # delta[j, i] = lam_i - lam_j
    np.fill_diagonal(delta, np.inf)
    return db_over / (sqrt_n * delta)


def simulate_trajectory(
    w0: WignerSample,
    t_final: float,
    steps: int,
    method: str = "matrix-diagonalize",
    seed: int = 0,
    keep_vectors: bool = True,
    check_weyl: bool = True,
    c0: float = 0.1,
    max_halvings: int = 40,
) -> DbmTrajectory:
    """Evolve a sample under the additive matrix flow and record its spectrum.

    Parameters
    ----------
    steps : number of grid intervals over ``[0, t_final]``; the trajectory
        records ``steps + 1`` slices.
    method : ``matrix-diagonalize`` or ``sde-integrate``.
    check_weyl : matrix method only; verify per-step eigenvalue movement
        against the increment's operator norm (Weyl's inequality).
    c0 : SDE step-size constant in ``dt <= c0 N min_gap^2``.
    """
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {_METHODS}")
    if steps < 1:
        raise ValueError("need at least one step")
    if w0.spec.beta != 1:
        raise ValueError("trajectories are implemented for the real symmetric class")
    n = w0.n
    times = np.linspace(0.0, t_final, steps + 1)
    lambdas = np.empty((steps + 1, n))
    frames = np.empty((steps + 1, n, n)) if keep_vectors else None

    eig = eigendecompose(w0)
    lambdas[0] = eig.lambdas
    if keep_vectors:
        frames[0] = eig.vectors
    if t_final == 0.0:
        return DbmTrajectory(times[:1], lambdas[:1], frames[:1] if keep_vectors else None,
                             seed, method, time0=w0.time)

    rng = stream_rng(seed, 0)
    crossings = 0
    if method == "matrix-diagonalize":
        w = w0.matrix.copy()
        u_prev = eig.vectors
        lam_prev = eig.lambdas
        dt = t_final / steps
        sqrt_n = math.sqrt(n)
        for k in range(1, steps + 1):
            db = symmetric_brownian(n, dt, rng, beta=1)
            w = w + db / sqrt_n
            lam, u = np.linalg.eigh(w)
            if check_weyl:
                inc_norm = float(np.max(np.abs(np.linalg.eigvalsh(db)))) / sqrt_n
                worst = float(np.max(np.abs(lam - lam_prev)))
                if worst > inc_norm * (1.0 + 1e-10) + 1e-12:
                    raise NumericalError(
                        f"Weyl bound violated at step {k}: |dlambda| = {worst} > |dW| = {inc_norm}"
                    )
            u, cr = _sign_match(u_prev, u)
            crossings += cr
            lambdas[k] = lam
            if keep_vectors:
                frames[k] = u
            u_prev, lam_prev = u, lam
        return DbmTrajectory(times, lambdas, frames, seed, method,
                             time0=w0.time, crossings=crossings)

    # sde-integrate
    lam = eig.lambdas.copy()
    u = eig.vectors.copy()
    sqrt_n = math.sqrt(n)
    for k in range(1, steps + 1):
        t_target = times[k] - times[k - 1]
        elapsed = 0.0
        while elapsed < t_target - 1e-15:
            dt = min(c0 * n * _min_gap(lam) ** 2, t_target - elapsed)
            for attempt in range(max_halvings + 1):
                db = symmetric_brownian(n, dt, rng, beta=1)
                lam_new = lam + np.diagonal(db) / sqrt_n + _repulsion_drift(lam) * dt
                if np.all(np.diff(lam_new) > 0.0):
                    break
                dt *= 0.5
            else:
                raise NumericalError(
                    f"eigenvalue ordering could not be preserved at t = "
                    f"{times[k-1] + elapsed:.3e} even at dt = {dt:.3e} "
                    f"(min gap {_min_gap(lam):.3e})"
                )
            kmat = _vector_noise_k(lam, db, sqrt_n)
            np.fill_diagonal(kmat, 0.0)
            u = _cayley_rotate(u, kmat)
            lam = lam_new
            elapsed += dt
        lambdas[k] = lam
        if keep_vectors:
            frames[k] = u
    return DbmTrajectory(times, lambdas, frames, seed, method,
                         time0=w0.time, crossings=crossings)


def rigidity_check(traj: DbmTrajectory, xi: float) -> tuple[bool, float]:
    """Compare ``sup_t max_i N^(2/3) min(i, N+1-i)^(1/3) |lambda_i(t) -
    gamma_i(t)|`` against ``N^xi``; returns ``(pass, worst)``."""
    n = traj.n
    idx = np.arange(1, n + 1)
    weight = n ** (2.0 / 3.0) * np.minimum(idx, n + 1 - idx) ** (1.0 / 3.0)
    base = sc.quantiles(n)
    worst = 0.0
    for t, lam in zip(traj.times, traj.lambdas):
        gamma = base * math.sqrt(1.0 + traj.time0 + t)
        worst = max(worst, float(np.max(weight * np.abs(lam - gamma))))
    return worst <= n**xi, worst


def _interp_lambda(times, lambdas, t):
    k = np.searchsorted(times, t, side="right") - 1
    k = min(max(k, 0), times.size - 2)
    w = (t - times[k]) / (times[k + 1] - times[k])
    return (1.0 - w) * lambdas[k] + w * lambdas[k + 1]


def _conditional_engine(
    traj: DbmTrajectory,
    u0: np.ndarray,
    replicas: int,
    seed: int,
    c0: float,
    tracked_sites,
    gap_margin: int,
    max_halvings: int,
    slice_callback,
):
    """Drive ``replicas`` independent eigenvector flows along the frozen
    eigenvalue path, calling ``slice_callback(k, u_batch)`` at grid times."""
    if replicas < 1:
        raise ValueError("need at least one replica")
    times, lambdas = traj.times, traj.lambdas
    n = traj.n
    sqrt_n = math.sqrt(n)
    u = np.broadcast_to(u0, (replicas, n, n)).copy()
    rngs = [stream_rng(seed, r) for r in range(replicas)]
    slice_callback(0, u)
    for k in range(1, times.size):
        t0, t1 = times[k - 1], times[k]
        t = t0
        while t < t1 - 1e-15:
            lam = _interp_lambda(times, lambdas, t)
            gap = _min_gap(lam, sites=tracked_sites, margin=gap_margin)
            dt = min(c0 * n * gap * gap, t1 - t)
            if dt <= 0.0:
                raise NumericalError(f"degenerate gap {gap} at t = {t}")
            kstack = np.empty((replicas, n, n))
            scale = math.sqrt(dt / 2.0)
            delta = lam[None, :] - lam[:, None]
            np.fill_diagonal(delta, np.inf)
            inv = 1.0 / (sqrt_n * delta)
            for r in range(replicas):
                g = rngs[r].standard_normal((n, n))
                db = (g + g.T) * scale
                kstack[r] = db * inv
            u = _cayley_rotate(u, kstack)
            t += dt
        slice_callback(k, u)
    return u


def conditional_vector_ensemble(
    traj: DbmTrajectory,
    u0: np.ndarray,
    replicas: int,
    seed: int = 0,
    c0: float = 0.1,
    tracked_sites=None,
    gap_margin: int = 16,
) -> list[np.ndarray]:
    """Frame trajectories sampled from the conditional law given the
    eigenvalue path.

    Each replica integrates the eigenvector flow with the path ``traj``
    held fixed and fresh independent off-diagonal Brownian increments; the
    flow depends on the eigenvalues and the off-diagonal noise only, so the
    replicas are draws from the conditional distribution of the frames.
    Returns one ``(len(times), N, N)`` array per replica.
    """
    m = traj.times.size
    n = traj.n
    out = np.empty((replicas, m, n, n))

    def record(k, u):
        out[:, k] = u

    _conditional_engine(traj, u0, replicas, seed, c0, tracked_sites, gap_margin, 40, record)
    return [out[r] for r in range(replicas)]


def conditional_overlap_paths(
    traj: DbmTrajectory,
    u0: np.ndarray,
    observable,
    sites,
    replicas: int,
    seed: int = 0,
    c0: float = 0.1,
    gap_margin: int = 16,
    step_sites="tracked",
) -> np.ndarray:
    """Overlap blocks ``p[sites, sites]`` along the conditional flow.

    Returns an array of shape ``(replicas, len(times), s, s)`` where
    ``s = len(sites)``; memory stays modest even for large replica counts
    because only the tracked block is recorded.  ``step_sites`` selects
    which gaps drive the step-size rule: ``"tracked"`` keys it to gaps
    within ``gap_margin`` of the recorded sites (default), ``None`` applies
    the strict global rule, or an explicit index array may be given.
    """
    a = observable.matrix if hasattr(observable, "matrix") else np.asarray(observable)
    sites = np.asarray(sites, dtype=int)
    track = sites if isinstance(step_sites, str) and step_sites == "tracked" else step_sites
    m = traj.times.size
    s = sites.size
    out = np.empty((replicas, m, s, s))

    def record(k, u):
        cols = u[:, :, sites]
        acols = a @ cols
        out[:, k] = np.swapaxes(cols, 1, 2) @ acols

    _conditional_engine(traj, u0, replicas, seed, c0, track, gap_margin, 40, record)
    return out


_MAGIC = b"RMTDBM01"
_METHOD_CODE = {"matrix-diagonalize": 0, "sde-integrate": 1}
_CODE_METHOD = {v: k for k, v in _METHOD_CODE.items()}


def save_trajectory(traj: DbmTrajectory, path) -> None:
    """Chunked binary layout (all little-endian):

    magic ``RMTDBM01`` (8 bytes), uint32 N, uint32 M (grid intervals),
    uint8 method code (0 = matrix-diagonalize, 1 = sde-integrate),
    uint8 has_vectors, uint64 noise seed, float64 time0, then ``M+1``
    float64 times, then ``(M+1) x N`` float64 eigenvalues row-major, then,
    if has_vectors, ``(M+1) x N x N`` float64 frames row-major.
    """
    has_vec = traj.vectors is not None
    m = traj.times.size - 1
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIBBQd", traj.n, m, _METHOD_CODE[traj.method],
                             int(has_vec), traj.noise_seed, traj.time0))
        fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.lambdas, dtype="<f8").tobytes())
        if has_vec:
            fh.write(np.ascontiguousarray(traj.vectors, dtype="<f8").tobytes())


def load_trajectory(path) -> DbmTrajectory:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a trajectory file")
        n, m, code, has_vec, seed, time0 = struct.unpack("<IIBBQd", fh.read(26))
        times = np.frombuffer(fh.read(8 * (m + 1)), dtype="<f8")
        lambdas = np.frombuffer(fh.read(8 * (m + 1) * n), dtype="<f8").reshape(m + 1, n)
        vectors = None
        if has_vec:
            vectors = np.frombuffer(fh.read(8 * (m + 1) * n * n), dtype="<f8").reshape(m + 1, n, n)
    return DbmTrajectory(times=times, lambdas=lambdas, vectors=vectors,
                         noise_seed=seed, method=_CODE_METHOD[code], time0=time0)
