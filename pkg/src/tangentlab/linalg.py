"""Dense symmetric-matrix kernels: eigendecomposition, scalar matrix
functions, and jittered positive-semidefinite solves.

Every closed-form dynamics formula in this package reduces to evaluating a
scalar function on the spectrum of a symmetric kernel matrix (decay factors
``exp(-eta*lam*t)``, inverse-with-limit maps, discrete powers).  Matrix
functions are always evaluated in the eigenbasis, never through an explicit
inverse, so singular kernels stay well-defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import InvalidMatrix, NotPSD, SpectrumDomainError

#: Default Cholesky jitter, relative to the mean diagonal of the matrix.
DEFAULT_JITTER = 1e-12

#: Failed factorizations escalate the jitter tenfold this many times.
JITTER_ESCALATIONS = 3


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return ``(A + A.T) / 2`` as a fresh float64 array.

    Kernel assembly accumulates round-off asymmetry; all symmetric-matrix
    entry points pass through here first.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidMatrix(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class EigenDecomposition:
    """Spectral factorization ``S = V diag(lam) V.T`` of a symmetric matrix.

    ``eigenvalues`` are ascending; ``eigenvectors`` holds the orthonormal
    basis in its columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def sym_eig(s: np.ndarray) -> EigenDecomposition:
    """Eigendecompose a symmetric matrix after symmetrizing it.

    Raises
    ------
    InvalidMatrix
        If the input contains non-finite entries.
    """
    s = symmetrize(s)
    if not np.all(np.isfinite(s)):
        raise InvalidMatrix("matrix contains non-finite entries")
    lam, v = np.linalg.eigh(s)
    return EigenDecomposition(eigenvalues=lam, eigenvectors=v)


def apply_scalar_fn(
    s: np.ndarray | EigenDecomposition,
    f: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Evaluate ``f`` on the spectrum of a symmetric matrix: ``V f(lam) V.T``.

    ``f`` receives the full eigenvalue vector and must broadcast over it.
    Passing a precomputed :class:`EigenDecomposition` avoids repeating the
    factorization when many functions of one matrix are needed.

    Raises
    ------
    SpectrumDomainError
        If ``f`` returns a non-finite value on some eigenvalue.
    """
    eig = s if isinstance(s, EigenDecomposition) else sym_eig(s)
    flam = np.asarray(f(eig.eigenvalues), dtype=np.float64)
    if flam.shape != eig.eigenvalues.shape:
        raise SpectrumDomainError(
            f"scalar map returned shape {flam.shape}, expected {eig.eigenvalues.shape}"
        )
    if not np.all(np.isfinite(flam)):
        bad = eig.eigenvalues[~np.isfinite(flam)]
        raise SpectrumDomainError(f"scalar map non-finite at eigenvalues {bad}")
    v = eig.eigenvectors
    return symmetrize((v * flam) @ v.T)


def psd_solve(
    k: np.ndarray,
    b: np.ndarray,
    jitter: float = DEFAULT_JITTER,
) -> np.ndarray:
    """Solve ``(K + jitter*mean_diag*I) X = B`` by Cholesky factorization.

    ``jitter`` is relative to the mean diagonal ``tr(K)/dim`` so the
    regularization is scale-free.  On factorization failure the jitter is
    escalated tenfold up to three times before giving up.

    Raises
    ------
    NotPSD
        If every escalation level fails to factorize.
    """
    k = symmetrize(k)
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(k)):
        raise InvalidMatrix("matrix contains non-finite entries")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    dim = k.shape[0]
    scale = np.trace(k) / dim
    if scale <= 0:
        scale = 1.0

    level = jitter
    for attempt in range(JITTER_ESCALATIONS + 1):
        shifted = k if level == 0 else k + (level * scale) * np.eye(dim)
        try:
            factor = cho_factor(shifted, lower=True, check_finite=False)
            return cho_solve(factor, b, check_finite=False)
        except LinAlgError:
            level = DEFAULT_JITTER if level == 0 else level * 10.0
    raise NotPSD(
        f"Cholesky failed up to jitter {level / 10.0:.1e} (relative to mean diagonal)"
    )
