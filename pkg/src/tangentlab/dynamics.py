"""Closed-form training dynamics of linearized networks under squared loss,
and the Gaussian output distributions they induce over random initialization.

All formulas are scalar functions of the training-kernel spectrum evaluated
in its eigenbasis.  The recurring map

    phi_t(lam) = (1 - decay_t(lam)) / lam

(with ``decay_t = exp(-eta*lam*t)`` in continuous time and
``(1 - eta*lam)**i`` after ``i`` discrete steps) has a removable singularity
at ``lam = 0`` (value ``eta*t`` resp. ``eta*i``), so singular kernels need no
special-casing and no matrix is ever inverted explicitly.  ``t = inf``
evaluates the exact limit with a pseudo-inverse cutoff instead of a huge
finite time.

Channel convention: a kernel with ``output_multiplicity == k`` acts per
output channel, so labels and outputs travel as (examples, k) matrices; an
``output_multiplicity == 1`` kernel (e.g. an empirical tangent kernel with
cross-output blocks) acts on the flattened example-major vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analytic_kernels import KernelMatrix
from .errors import DegenerateKernel, MissingInitialState, ShapeError
from .linalg import EigenDecomposition, psd_solve, sym_eig, symmetrize

#: Relative eigenvalue cutoff of the pseudo-inverse used at t = inf.
PINV_CUTOFF = 1e-12

CONTINUOUS = "continuous"
DISCRETE = "discrete"


# ---------------------------------------------------------------------------
# Spectral maps
# ---------------------------------------------------------------------------

def decay_factors(lam: np.ndarray, eta: float, t: float, mode: str) -> np.ndarray:
    """``exp(-eta*lam*t)`` or ``(1 - eta*lam)**i`` on an eigenvalue vector."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.isinf(t):
        cutoff = PINV_CUTOFF * max(np.abs(lam).max(initial=0.0), 1.0)
        return np.where(lam > cutoff, 0.0, 1.0)
    if mode == CONTINUOUS:
        return np.exp(-eta * t * lam)
    _check_step(t)
    return np.power(1.0 - eta * lam, int(t))


def phi_factors(lam: np.ndarray, eta: float, t: float, mode: str) -> np.ndarray:
    """``(1 - decay_t(lam)) / lam`` with its removable singularity filled in."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.isinf(t):
        cutoff = PINV_CUTOFF * max(np.abs(lam).max(initial=0.0), 1.0)
        with np.errstate(divide="ignore"):
            inv = np.where(np.abs(lam) > cutoff, 1.0 / np.where(lam == 0, 1.0, lam), 0.0)
        return inv
    if mode == CONTINUOUS:
        s = eta * t * lam
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(np.abs(s) < 1e-12, 1.0, -np.expm1(-s) / np.where(s == 0, 1.0, s))
        return eta * t * g
    _check_step(t)
    i = int(t)
    x = eta * lam
    one_minus_pow = np.where(
        x < 0.5,
        -np.expm1(i * np.log1p(-np.clip(x, None, 0.5 - 1e-16))),
        1.0 - np.power(1.0 - x, i),
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(
            np.abs(x) * max(i, 1) < 1e-12,
            eta * i,
            one_minus_pow / np.where(lam == 0, 1.0, lam),
        )
    return out


def _check_step(t: float) -> None:
    if t < 0 or float(t) != float(int(t)):
        raise ShapeError(f"discrete mode needs nonnegative integer steps, got {t}")


# ---------------------------------------------------------------------------
# Problem container
# ---------------------------------------------------------------------------

def _kernel_base(k) -> tuple[np.ndarray, int]:
    if isinstance(k, KernelMatrix):
        return k.base, k.output_multiplicity
    return np.atleast_2d(np.asarray(k, dtype=np.float64)), 1


def _as_channels(values: np.ndarray | None, base_dim: int, mult: int, name: str):
    """Reshape labels/outputs to the kernel's (base_dim, channels) layout."""
    if values is None:
        return None
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if mult == 1:
        v = v.reshape(-1, 1)  # example-major flatten, outputs contiguous
    if v.shape[0] != base_dim:
        raise ShapeError(f"{name}: expected leading dimension {base_dim}, got {v.shape}")
    return v


def _from_channels(v: np.ndarray, mult: int, n_out: int) -> np.ndarray:
    """Back to (examples, n_out) regardless of kernel layout."""
    if mult == 1:
        return v.reshape(-1, n_out)
    return v


@dataclass
class DynamicsProblem:
    """Kernels, labels, and optional initial outputs for one training setup.

    ``theta_*`` drive the gradient-descent dynamics; ``k_*`` are the
    output-covariance blocks needed only for distribution moments.  The
    cross blocks map train points to test points: rows index test inputs.
    """

    theta_train: KernelMatrix
    y: np.ndarray
    eta: float
    theta_cross: KernelMatrix | None = None
    k_train: KernelMatrix | None = None
    k_cross: KernelMatrix | None = None
    k_test: KernelMatrix | None = None
    f0_train: np.ndarray | None = None
    f0_test: np.ndarray | None = None
    time_mode: str = CONTINUOUS

    _eig: EigenDecomposition | None = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ShapeError("learning rate must be positive")
        if self.time_mode not in (CONTINUOUS, DISCRETE):
            raise ShapeError(f"unknown time_mode {self.time_mode!r}")
        base, mult = _kernel_base(self.theta_train)
        if base.shape[0] != base.shape[1]:
            raise ShapeError("theta_train must be square")

    @property
    def n_out(self) -> int:
        y = np.asarray(self.y)
        return 1 if y.ndim == 1 else y.shape[1]

    def eig(self) -> EigenDecomposition:
        """Eigendecomposition of the training kernel, computed once."""
        if self._eig is None:
            base, _ = _kernel_base(self.theta_train)
            self._eig = sym_eig(base)
        return self._eig


# ---------------------------------------------------------------------------
# Stability threshold
# ---------------------------------------------------------------------------

def eta_critical(theta) -> float:
    """Largest-stable-learning-rate scale ``2 / (lam_min + lam_max)``.

    The multiplicity-expanded kernel has the same extreme eigenvalues as
    its base block, so the base spectrum suffices.
    """
    base, _ = _kernel_base(theta)
    lam = sym_eig(base).eigenvalues
    s = lam[0] + lam[-1]
    if s <= 0:
        raise DegenerateKernel(f"lam_min + lam_max = {s:.3e} <= 0")
    return 2.0 / s


# ---------------------------------------------------------------------------
# Linearized squared-loss dynamics (per realization)
# ---------------------------------------------------------------------------

@dataclass
class LinearizedTrajectory:
    """Per-time outputs of the linearized model, plus optional weight motion."""

    times: np.ndarray
    f_train: np.ndarray            # (T, train examples, n_out)
    f_test: np.ndarray | None      # (T, test examples, n_out)
    omega: np.ndarray | None = None  # (T, num_params) when a Jacobian is given


def lin_mse_dynamics(
    problem: DynamicsProblem,
    times,
    jacobian=None,
) -> LinearizedTrajectory:
    """Closed-form evolution of one linearized realization under squared loss.

    Train outputs relax toward the labels through the decay factors of the
    training kernel; test outputs follow through the cross kernel.  With a
    Jacobian the parameter displacement is returned as well.
    """
    if problem.f0_train is None:
        raise MissingInitialState("lin_mse_dynamics needs f0_train")
    base, mult = _kernel_base(problem.theta_train)
    m = base.shape[0]
    y = _as_channels(problem.y, m, mult, "y")
    f0 = _as_channels(problem.f0_train, m, mult, "f0_train")
    residual0 = f0 - y

    cross_base = None
    f0_test = None
    if problem.theta_cross is not None:
        cross_base, cross_mult = _kernel_base(problem.theta_cross)
        if cross_mult != mult or cross_base.shape[1] != m:
            raise ShapeError("theta_cross incompatible with theta_train")
        if problem.f0_test is None:
            raise MissingInitialState("theta_cross given but f0_test missing")
        f0_test = _as_channels(
            problem.f0_test, cross_base.shape[0], mult, "f0_test"
        )

    eig = problem.eig()
    v = eig.eigenvectors
    vt_res = v.T @ residual0
    n_out = problem.n_out

    times = np.asarray(times, dtype=np.float64)
    f_train, f_test, omegas = [], [], []
    jmat = jacobian.matrix if jacobian is not None else None
    for t in times:
        dec = decay_factors(eig.eigenvalues, problem.eta, t, problem.time_mode)
        f_train.append(_from_channels(y + v @ (dec[:, None] * vt_res), mult, n_out))
        if cross_base is not None or jmat is not None:
            phi = phi_factors(eig.eigenvalues, problem.eta, t, problem.time_mode)
            phi_res = v @ (phi[:, None] * vt_res)
            if cross_base is not None:
                f_test.append(
                    _from_channels(f0_test - cross_base @ phi_res, mult, n_out)
                )
            if jmat is not None:
                if mult > 1:
                    flat = phi_res.reshape(-1)  # example-major, outputs contiguous
                else:
                    flat = phi_res[:, 0]
                omegas.append(-(jmat.T @ flat))
    return LinearizedTrajectory(
        times=times,
        f_train=np.asarray(f_train),
        f_test=np.asarray(f_test) if f_test else None,
        omega=np.asarray(omegas) if omegas else None,
    )


# ---------------------------------------------------------------------------
# Output-distribution moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GPMoments:
    """Gaussian predictive moments at one time.

    ``covariance`` is the per-channel block over test examples; channels are
    exchangeable so one block serves all ``n_out`` outputs.
    """

    mean: np.ndarray        # (test examples, n_out)
    covariance: np.ndarray  # (test examples, test examples)
    time: float


def ntk_gp_moments(problem: DynamicsProblem, times) -> list[GPMoments]:
    """Moments of the linearized-network output distribution during training.

    Requires the analytic tangent and covariance kernels.  Means pull the
    labels through the cross tangent kernel; covariances are those of the
    affine image of the initial Gaussian outputs.  ``t = inf`` gives the
    steady-state law exactly.
    """
    for name in ("theta_cross", "k_train", "k_cross", "k_test"):
        if getattr(problem, name) is None:
            raise ShapeError(f"ntk_gp_moments needs {name}")
    th_base, mult = _kernel_base(problem.theta_train)
    m = th_base.shape[0]
    thc, mult_c = _kernel_base(problem.theta_cross)
    kt, _ = _kernel_base(problem.k_train)
    kc, _ = _kernel_base(problem.k_cross)
    kss, _ = _kernel_base(problem.k_test)
    if mult_c != mult:
        raise ShapeError("theta_cross multiplicity differs from theta_train")
    if thc.shape[1] != m or kt.shape != (m, m) or kc.shape != thc.shape:
        raise ShapeError("kernel blocks have inconsistent shapes")
    if kss.shape[0] != thc.shape[0]:
        raise ShapeError("k_test dimension does not match theta_cross rows")

    y = _as_channels(problem.y, m, mult, "y")
    eig = problem.eig()
    v = eig.eigenvectors
    out = []
    for t in np.asarray(times, dtype=np.float64):
        phi = phi_factors(eig.eigenvalues, problem.eta, t, problem.time_mode)
        a = thc @ (v * phi) @ v.T
        mean = a @ y
        cov = kss + a @ kt @ a.T - a @ kc.T - kc @ a.T
        out.append(
            GPMoments(
                mean=_from_channels(mean, mult, problem.n_out),
                covariance=symmetrize(cov),
                time=float(t),
            )
        )
    return out


def nngp_posterior(
    k_train, k_cross, k_test, y, jitter: float = 1e-12
) -> GPMoments:
    """Exact Gaussian-process regression moments from the output covariance."""
    kt, mult = _kernel_base(k_train)
    kc, _ = _kernel_base(k_cross)
    kss, _ = _kernel_base(k_test)
    y_arr = np.asarray(y)
    n_out = 1 if y_arr.ndim == 1 else y_arr.shape[1]
    yv = _as_channels(y_arr, kt.shape[0], mult, "y")
    mean = kc @ psd_solve(kt, yv, jitter=jitter)
    cov = kss - kc @ psd_solve(kt, kc.T, jitter=jitter)
    return GPMoments(
        mean=_from_channels(mean, mult, n_out),
        covariance=symmetrize(cov),
        time=np.inf,
    )


def readout_gp_moments(k, k_cross, k_test, y, eta: float, times) -> list[GPMoments]:
    """Moments when only the readout layer trains, over the init ensemble.

    Interpolates between the prior at ``t = 0`` and the exact posterior at
    ``t = inf``; the variance decays with doubled rate because signal and
    noise shrink together.
    """
    kt, mult = _kernel_base(k)
    kc, _ = _kernel_base(k_cross)
    kss, _ = _kernel_base(k_test)
    y_arr = np.asarray(y)
    n_out = 1 if y_arr.ndim == 1 else y_arr.shape[1]
    yv = _as_channels(y_arr, kt.shape[0], mult, "y")
    eig = sym_eig(kt)
    v = eig.eigenvectors
    out = []
    for t in np.asarray(times, dtype=np.float64):
        phi1 = phi_factors(eig.eigenvalues, eta, t, CONTINUOUS)
        phi2 = phi_factors(eig.eigenvalues, 2.0 * eta, t, CONTINUOUS)
        mean = kc @ (v * phi1) @ v.T @ yv
        cov = kss - kc @ (v * phi2) @ v.T @ kc.T
        out.append(
            GPMoments(
                mean=_from_channels(mean, mult, n_out),
                covariance=symmetrize(cov),
                time=float(t),
            )
        )
    return out


def readout_realization(
    k, k_cross, y, f0_train, f0_test, eta: float, times
) -> LinearizedTrajectory:
    """One readout-only training run in closed form, given initial outputs."""
    kt, mult = _kernel_base(k)
    problem = DynamicsProblem(
        theta_train=KernelMatrix(kt, mult),
        theta_cross=KernelMatrix(_kernel_base(k_cross)[0], mult),
        y=y,
        eta=eta,
        f0_train=f0_train,
        f0_test=f0_test,
        time_mode=CONTINUOUS,
    )
    return lin_mse_dynamics(problem, times)
