"""Adaptive Runge-Kutta integration and the linearized dynamics that have no
closed form: softmax cross-entropy training and heavy-ball momentum.

The integrator is the embedded Dormand-Prince 5(4) pair with PI step-size
control and the first-same-as-last stage reuse.  Requested grid times are
hit exactly by clamping the step, never by dense-output interpolation, so
reported states carry full integration accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import _as_channels, _from_channels, _kernel_base
from .errors import ShapeError, StiffnessError

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between 5th- and embedded 4th-order weights
_ERR = _B5 - np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_STEP_UNDERFLOW = 1e-14


@dataclass
class OdeSystem:
    """A first-order system ``dy/dt = rhs(t, y)`` of fixed dimension."""

    dim: int
    rhs: Callable[[float, np.ndarray], np.ndarray]
    description: str = ""


def _error_norm(delta, y_old, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((delta / scale) ** 2)))


def rk45_integrate(
    system: OdeSystem,
    y0: np.ndarray,
    t_grid,
    rtol: float = 1e-6,
    atol: float = 1e-9,
) -> np.ndarray:
    """Integrate to every grid time and return the states there.

    ``t_grid`` must be strictly increasing; the first entry is the initial
    time and its row is ``y0`` itself.  Step size follows a PI controller on
    the embedded error estimate.

    Raises
    ------
    StiffnessError
        If the accepted step would underflow below 1e-14 of the grid span.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size < 2 or np.any(np.diff(t_grid) <= 0):
        raise ShapeError("t_grid must be strictly increasing with >= 2 points")
    y = np.asarray(y0, dtype=np.float64).copy()
    if y.shape != (system.dim,):
        raise ShapeError(f"y0 must have shape ({system.dim},), got {y.shape}")

    span = t_grid[-1] - t_grid[0]
    h_min = _STEP_UNDERFLOW * span
    out = np.empty((t_grid.size, system.dim))
    out[0] = y

    t = t_grid[0]
    f = np.asarray(system.rhs(t, y), dtype=np.float64)
    if f.shape != y.shape or not np.all(np.isfinite(f)):
        raise ShapeError("rhs must return a finite vector of matching dimension")
    # conservative first step from the rhs magnitude at t0
    scale = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((f / scale) ** 2))
    h = min(span, 0.01 * d0 / d1 if d1 > 1e-12 else 0.01 * span)
    h = max(h, h_min)

    k = np.empty((7, system.dim))
    err_prev = 1.0
    for idx in range(1, t_grid.size):
        t_target = t_grid[idx]
        while t < t_target:
            h = min(h, t_target - t)
            if h < h_min:
                raise StiffnessError(
                    f"step {h:.3e} underflowed at t={t:.6g} ({system.description})"
                )
            k[0] = f
            for s in range(1, 7):
                ys = y + h * (k[:s].T @ _A[s])
                k[s] = system.rhs(t + _C[s] * h, ys)
            y_new = y + h * (k.T @ _B5)
            delta = h * (k.T @ _ERR)
            err = _error_norm(delta, y, y_new, rtol, atol)
            if err <= 1.0:
                t = t + h
                y = y_new
                f = k[6]  # first-same-as-last: stage 7 sits at (t+h, y_new)
                factor = _SAFETY * err ** -0.14 * err_prev ** 0.08 if err > 0 else _MAX_FACTOR
                err_prev = max(err, 1e-10)
                h = h * min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            else:
                h = h * max(0.1, _SAFETY * err ** -0.2)
        out[idx] = y
    return out


# ---------------------------------------------------------------------------
# Linearized cross-entropy dynamics
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class OdeTrajectory:
    """Grid times with train and test logits from an integrated run."""

    times: np.ndarray
    f_train: np.ndarray          # (T, train examples, n_out)
    f_test: np.ndarray | None


def xent_lin_dynamics(
    theta_train,
    theta_cross,
    y_onehot: np.ndarray,
    f0_train: np.ndarray,
    f0_test: np.ndarray | None,
    eta: float,
    t_grid,
    rtol: float = 1e-6,
    atol: float = 1e-9,
    t_max: float | None = None,
) -> OdeTrajectory:
    """Integrate linearized softmax cross-entropy training.

    Train logits obey ``df/dt = -eta * Theta (softmax(f) - Y)``; test logits
    are slaved to the same train residual through the cross kernel, so both
    ride in one augmented state and accumulate with identical stage weights.

    Late-time logits grow without bound under cross-entropy, so the grid is
    truncated at ``t_max`` (default ``1e3 / eta``); the returned ``times``
    reflect any truncation.
    """
    y_onehot = np.atleast_2d(np.asarray(y_onehot, dtype=np.float64))
    m, n_out = y_onehot.shape
    if n_out < 2:
        raise ShapeError("cross-entropy needs n_out >= 2")
    rows = np.sort(y_onehot, axis=1)
    if not (np.all(rows[:, :-1] == 0.0) and np.all(rows[:, -1] == 1.0)):
        raise ShapeError("labels must be one-hot rows")

    th, mult = _kernel_base(theta_train)
    f0_train = _as_channels(np.asarray(f0_train), th.shape[0], mult, "f0_train")
    thc = None
    if theta_cross is None:
        f0_test = None
    else:
        thc, mult_c = _kernel_base(theta_cross)
        if mult_c != mult or thc.shape[1] != th.shape[0]:
            raise ShapeError("theta_cross incompatible with theta_train")
        f0_test = _as_channels(
            np.asarray(f0_test), thc.shape[0], mult, "f0_test"
        )

    n_train = f0_train.size
    n_test = 0 if f0_test is None else f0_test.size
    chan = f0_train.shape[1]

    if t_max is None:
        t_max = 1e3 / eta
    t_grid = np.asarray(t_grid, dtype=np.float64)
    t_grid = t_grid[t_grid <= t_max]
    if t_grid.size < 2:
        raise ShapeError("t_grid has fewer than 2 points below the horizon")
    if t_grid[0] != 0.0:
        raise ShapeError("t_grid must start at 0 (where f0 is given)")

    def rhs(t, state):
        ftr = state[:n_train].reshape(-1, chan)
        logits = _from_channels(ftr, mult, n_out)
        res = softmax(logits) - y_onehot
        res = _as_channels(res, th.shape[0], mult, "residual")
        dtr = -eta * (th @ res)
        if thc is None:
            return dtr.ravel()
        dte = -eta * (thc @ res)
        return np.concatenate([dtr.ravel(), dte.ravel()])

    y0 = f0_train.ravel() if f0_test is None else np.concatenate(
        [f0_train.ravel(), f0_test.ravel()]
    )
    system = OdeSystem(dim=n_train + n_test, rhs=rhs, description="xent linearized")
    states = rk45_integrate(system, y0, t_grid, rtol=rtol, atol=atol)

    f_train = np.stack(
        [
            _from_channels(s[:n_train].reshape(-1, chan), mult, n_out)
            for s in states
        ]
    )
    f_test = None
    if f0_test is not None:
        f_test = np.stack(
            [
                _from_channels(s[n_train:].reshape(-1, chan), mult, n_out)
                for s in states
            ]
        )
    return OdeTrajectory(times=t_grid, f_train=f_train, f_test=f_test)


def xent_loss(logits: np.ndarray, y_onehot: np.ndarray) -> float:
    """Mean softmax cross-entropy of a batch of logits."""
    logz = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logz).sum(axis=-1))
    return float(np.mean(lse - (logz * y_onehot).sum(axis=-1)))


# ---------------------------------------------------------------------------
# Momentum dynamics (heavy-ball continuous limit)
# ---------------------------------------------------------------------------

def momentum_lin_dynamics(
    theta_train,
    theta_cross,
    y: np.ndarray,
    f0_train: np.ndarray,
    f0_test: np.ndarray | None,
    eta: float,
    beta: float,
    steps,
    rtol: float = 1e-8,
    atol: float = 1e-11,
) -> OdeTrajectory:
    """Second-order linearized squared-loss dynamics of momentum descent.

    Integrates ``f'' = beta_tilde f' - Theta (f(train) - Y)`` as a first-order
    system in the doubled state ``(f, f')`` with ``f'(0) = 0``, where
    ``beta_tilde = (beta - 1)/sqrt(eta)``.  States are reported at
    ``t = i*sqrt(eta)`` for the requested step indices ``i``, the times where
    the discrete iteration with parameters (eta, beta) lands.
    """
    if not 0.0 <= beta < 1.0:
        raise ShapeError("beta must lie in [0, 1)")
    th, mult = _kernel_base(theta_train)
    f0_train = _as_channels(np.asarray(f0_train), th.shape[0], mult, "f0_train")
    yv = _as_channels(np.asarray(y), th.shape[0], mult, "y")
    y_arr = np.asarray(y)
    n_out = 1 if y_arr.ndim == 1 else y_arr.shape[1]
    thc = None
    if theta_cross is None:
        f0_test = None
    else:
        thc, mult_c = _kernel_base(theta_cross)
        if mult_c != mult or thc.shape[1] != th.shape[0]:
            raise ShapeError("theta_cross incompatible with theta_train")
        f0_test = _as_channels(np.asarray(f0_test), thc.shape[0], mult, "f0_test")

    steps = np.asarray(steps, dtype=np.int64)
    if steps[0] != 0:
        raise ShapeError("step grid must start at 0")
    times = steps * np.sqrt(eta)
    beta_tilde = (beta - 1.0) / np.sqrt(eta)

    n_train = f0_train.size
    n_test = 0 if f0_test is None else f0_test.size
    chan = f0_train.shape[1]
    n_pos = n_train + n_test

    def rhs(t, state):
        pos, vel = state[:n_pos], state[n_pos:]
        ftr = pos[:n_train].reshape(-1, chan)
        res = ftr - yv
        acc_tr = beta_tilde * vel[:n_train] - (th @ res).ravel()
        if thc is None:
            return np.concatenate([vel, acc_tr])
        acc_te = beta_tilde * vel[n_train:] - (thc @ res).ravel()
        return np.concatenate([vel, acc_tr, acc_te])

    pos0 = f0_train.ravel() if f0_test is None else np.concatenate(
        [f0_train.ravel(), f0_test.ravel()]
    )
    y0 = np.concatenate([pos0, np.zeros(n_pos)])
    system = OdeSystem(dim=2 * n_pos, rhs=rhs, description="momentum linearized")
    states = rk45_integrate(system, y0, times, rtol=rtol, atol=atol)

    f_train = np.stack(
        [_from_channels(s[:n_train].reshape(-1, chan), mult, n_out) for s in states]
    )
    f_test = None
    if f0_test is not None:
        f_test = np.stack(
            [
                _from_channels(s[n_train:n_pos].reshape(-1, chan), mult, n_out)
                for s in states
            ]
        )
    return OdeTrajectory(times=times, f_train=f_train, f_test=f_test)
