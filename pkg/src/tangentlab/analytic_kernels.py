"""Infinite-width kernels of fully-connected networks.

Both the Gaussian-process kernel of the network outputs at initialization
(``nngp_kernel``) and the deterministic wide-network tangent kernel
(``ntk_kernel``) are built by one layer-to-layer recursion whose transfer
functions are the bivariate Gaussian expectations

    T(Sigma)    = E[phi(u) phi(v)]
    Tdot(Sigma) = E[phi'(u) phi'(v)],   (u, v) ~ N(0, Sigma).

ReLU and erf use closed forms (arc-cosine and arcsine kernels); tanh falls
back to two-dimensional Gauss-Hermite quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidMoment, ShapeError
from .linalg import symmetrize

#: Gauss-Hermite order for quadrature transfer functions.  Chosen so the
#: unit-variance stencil changes by < 1e-10 when the order is doubled.
GH_ORDER = 128

#: Floor on diagonal products before forming correlation ratios.
_DIAG_FLOOR = 1e-30


# ---------------------------------------------------------------------------
# Kernel containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelMatrix:
    """A pairwise kernel block with logical output multiplicity.

    The full kernel over ``k``-dimensional outputs is ``base kron I_k``;
    ``base`` stores one scalar per input pair.  Empirical kernels with
    explicit cross-output blocks use ``output_multiplicity == 1`` and carry
    the full matrix in ``base``.
    """

    base: np.ndarray
    output_multiplicity: int = 1

    def __post_init__(self):
        base = np.atleast_2d(np.asarray(self.base, dtype=np.float64))
        object.__setattr__(self, "base", base)
        if self.output_multiplicity < 1:
            raise ShapeError("output_multiplicity must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.base.shape

    @property
    def is_square(self) -> bool:
        return self.base.shape[0] == self.base.shape[1]

    def full(self) -> np.ndarray:
        """Materialize ``base kron I_k``."""
        if self.output_multiplicity == 1:
            return self.base
        return np.kron(self.base, np.eye(self.output_multiplicity))

    def sym(self) -> "KernelMatrix":
        return KernelMatrix(symmetrize(self.base), self.output_multiplicity)


@dataclass(frozen=True)
class BivariateGaussianMoment:
    """Second moments (k_xx, k_xy, k_yy) of a centered bivariate Gaussian."""

    k_xx: float
    k_xy: float
    k_yy: float

    def __post_init__(self):
        if self.k_xx < 0 or self.k_yy < 0:
            raise InvalidMoment(
                f"negative diagonal moment: ({self.k_xx}, {self.k_yy})"
            )
        bound = np.sqrt(self.k_xx * self.k_yy) + 1e-12
        if abs(self.k_xy) > bound:
            raise InvalidMoment(
                f"off-diagonal {self.k_xy} exceeds Cauchy-Schwarz bound {bound}"
            )


# ---------------------------------------------------------------------------
# Transfer functions, vectorized over arrays of moments
# ---------------------------------------------------------------------------

def _relu_angle(k_xx, k_xy, k_yy):
    denom = np.sqrt(np.maximum(k_xx * k_yy, _DIAG_FLOOR))
    cos = np.clip(k_xy / denom, -1.0, 1.0)
    return np.arccos(cos)


def t_relu(k_xx, k_xy, k_yy):
    """Arc-cosine transfer of degree 1: E[relu(u) relu(v)]."""
    theta = _relu_angle(k_xx, k_xy, k_yy)
    norms = np.sqrt(np.maximum(k_xx * k_yy, 0.0))
    return norms / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * np.cos(theta))


def tdot_relu(k_xx, k_xy, k_yy):
    """Arc-cosine transfer of degree 0: E[step(u) step(v)]."""
    theta = _relu_angle(k_xx, k_xy, k_yy)
    return (np.pi - theta) / (2.0 * np.pi)


def t_erf(k_xx, k_xy, k_yy):
    """Arcsine transfer: E[erf(u) erf(v)]."""
    arg = 2.0 * k_xy / np.sqrt((1.0 + 2.0 * k_xx) * (1.0 + 2.0 * k_yy))
    return (2.0 / np.pi) * np.arcsin(np.clip(arg, -1.0, 1.0))


def tdot_erf(k_xx, k_xy, k_yy):
    """E[erf'(u) erf'(v)] = (4/pi) det(I + 2 Sigma)^{-1/2}."""
    det = (1.0 + 2.0 * k_xx) * (1.0 + 2.0 * k_yy) - 4.0 * k_xy ** 2
    return (4.0 / np.pi) / np.sqrt(np.maximum(det, _DIAG_FLOOR))


def _gauss_hermite_nodes(order: int = GH_ORDER):
    x, w = np.polynomial.hermite.hermgauss(order)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


_GH_X, _GH_W = _gauss_hermite_nodes()


def _t_quadrature(phi, k_xx, k_xy, k_yy, chunk: int = 4096):
    """E[phi(u) phi(v)] by tensorized Gauss-Hermite over arrays of moments.

    The (u, v) roles are ordered canonically so swapping the two marginals
    returns bitwise-identical values.
    """
    k_xx, k_xy, k_yy = np.broadcast_arrays(
        np.asarray(k_xx, dtype=np.float64),
        np.asarray(k_xy, dtype=np.float64),
        np.asarray(k_yy, dtype=np.float64),
    )
    shape = k_xx.shape
    lo_diag = np.minimum(k_xx, k_yy)
    hi_diag = np.maximum(k_xx, k_yy)
    k_xx, k_yy = lo_diag, hi_diag
    a = np.sqrt(np.maximum(k_xx, 0.0)).ravel()
    b = np.sqrt(np.maximum(k_yy, 0.0)).ravel()
    denom = np.maximum(a * b, np.sqrt(_DIAG_FLOOR))
    rho = np.clip(k_xy.ravel() / denom, -1.0, 1.0)
    tail = np.sqrt(1.0 - rho ** 2)

    out = np.empty(a.shape[0])
    x, w = _GH_X, _GH_W
    for lo in range(0, a.shape[0], chunk):
        hi = min(lo + chunk, a.shape[0])
        u = a[lo:hi, None] * x[None, :]                      # (c, q)
        phi_u = phi(u)
        acc = np.zeros(hi - lo)
        for i in range(x.shape[0]):
            v = b[lo:hi, None] * (
                rho[lo:hi, None] * x[i] + tail[lo:hi, None] * x[None, :]
            )
            # row-wise pairwise sum: result independent of batch shape
            acc += w[i] * phi_u[:, i] * (phi(v) * w).sum(axis=1)
        out[lo:hi] = acc
    return out.reshape(shape) if shape else float(out[0])


def t_tanh(k_xx, k_xy, k_yy):
    return _t_quadrature(np.tanh, k_xx, k_xy, k_yy)


def tdot_tanh(k_xx, k_xy, k_yy):
    return _t_quadrature(lambda u: 1.0 - np.tanh(u) ** 2, k_xx, k_xy, k_yy)


_T_MAPS = {"relu": t_relu, "erf": t_erf, "tanh": t_tanh}
_TDOT_MAPS = {"relu": tdot_relu, "erf": tdot_erf, "tanh": tdot_tanh}


def t_map(moment: BivariateGaussianMoment, activation: str) -> float:
    """E[phi(u) phi(v)] for the named activation at one moment triple."""
    return float(_T_MAPS[activation](moment.k_xx, moment.k_xy, moment.k_yy))


def tdot_map(moment: BivariateGaussianMoment, activation: str) -> float:
    """E[phi'(u) phi'(v)] for the named activation at one moment triple."""
    return float(_TDOT_MAPS[activation](moment.k_xx, moment.k_xy, moment.k_yy))


# ---------------------------------------------------------------------------
# Layer recursions
# ---------------------------------------------------------------------------

def _recursion(arch, x1: np.ndarray, x2: np.ndarray | None, with_ntk: bool):
    """Run the layer recursion, tracking per-set diagonals alongside the
    cross block so every off-diagonal moment is available at each layer."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    same = x2 is None
    x2m = x1 if same else np.atleast_2d(np.asarray(x2, dtype=np.float64))
    if x1.shape[1] != arch.n_in or x2m.shape[1] != arch.n_in:
        raise ShapeError(
            f"inputs must have {arch.n_in} columns, got {x1.shape[1]} and {x2m.shape[1]}"
        )
    sw2, sb2 = arch.sigma_w2, arch.sigma_b2
    t_fn = _T_MAPS[arch.activation]
    tdot_fn = _TDOT_MAPS[arch.activation]

    cross = sw2 * (x1 @ x2m.T) / arch.n_in + sb2
    d1 = sw2 * np.einsum("ij,ij->i", x1, x1) / arch.n_in + sb2
    d2 = d1 if same else sw2 * np.einsum("ij,ij->i", x2m, x2m) / arch.n_in + sb2
    theta = cross.copy() if with_ntk else None

    for _ in arch.hidden_widths:
        kxx = d1[:, None]
        kyy = d2[None, :]
        new_cross = sw2 * t_fn(kxx, cross, kyy) + sb2
        if with_ntk:
            theta = new_cross + sw2 * theta * tdot_fn(kxx, cross, kyy)
        new_d1 = sw2 * t_fn(d1, d1, d1) + sb2
        new_d2 = new_d1 if same else sw2 * t_fn(d2, d2, d2) + sb2
        cross, d1, d2 = new_cross, new_d1, new_d2

    if same:
        cross = symmetrize(cross)
        if with_ntk:
            theta = symmetrize(theta)
    return cross, theta


def nngp_kernel(arch, x1: np.ndarray, x2: np.ndarray | None = None) -> KernelMatrix:
    """Infinite-width output covariance of a randomly initialized network.

    ``x2 = None`` computes the self-kernel of ``x1`` (symmetrized); otherwise
    the rectangular cross block, with each set's own diagonals feeding the
    recursion.
    """
    cross, _ = _recursion(arch, x1, x2, with_ntk=False)
    return KernelMatrix(cross, output_multiplicity=arch.n_out)


def ntk_kernel(
    arch, x1: np.ndarray, x2: np.ndarray | None = None
) -> tuple[KernelMatrix, KernelMatrix]:
    """Wide-network tangent kernel and output covariance from one recursion.

    Returns ``(theta, nngp)``; the two share every transfer-function
    evaluation.  With no hidden layers the tangent kernel equals the output
    covariance exactly.
    """
    cross, theta = _recursion(arch, x1, x2, with_ntk=True)
    k = arch.n_out
    return KernelMatrix(theta, k), KernelMatrix(cross, k)
