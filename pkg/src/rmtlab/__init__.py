"""rmtlab: a random-matrix verification laboratory.

Deterministic semicircle analytics, Wigner ensemble sampling and flows,
multi-resolvent chain evaluation with local-law error statistics,
eigenvector-overlap statistics (ETH / QUE), Dyson Brownian motion, the
perfect-matching observable calculus, and a seeded experiment harness.
"""

from . import (
    dbm,
    eigenvectors,
    ensembles,
    errors,
    harness,
    locallaw,
    matching,
    observables,
    resolvents,
    semicircle,
)

__version__ = "0.1.0"

__all__ = [
    "dbm",
    "eigenvectors",
    "ensembles",
    "errors",
    "harness",
    "locallaw",
    "matching",
    "observables",
    "resolvents",
    "semicircle",
    "__version__",
]
