"""Actual optimization loops for the finite-width network and for the
directly-optimized linearized model, plus the drift observables that
quantify how far a finite network strays from its linearization.

Updates use the summed gradient over the batch times the learning rate;
reported losses are averages over the evaluated set.  Mini-batches come
from a seeded reshuffle each epoch; a batch covering the whole set consumes
the same shuffle but visits examples in index order, so full-batch runs are
bit-identical regardless of how they are requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .errors import DivergenceError, GridError, ShapeError
from .integrators import softmax
from .network import (
    ACTIVATIONS,
    Architecture,
    JacobianMatrix,
    ParameterSet,
    empirical_ntk_direct,
    forward,
    jacobian,
    unflatten,
)

#: Average batch loss above this aborts the run.
DIVERGENCE_GUARD = 1e12


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    """Optimization hyperparameters for one training run.

    ``batch_size=None`` means full batch.  ``lr_weights``/``lr_biases``
    override the global rate per layer (ntk parameterization only); they
    exist to realize the exact standard/ntk equivalence mapping.
    """

    kind: str = "gd"              # gd | momentum
    eta: float = 0.1
    beta: float = 0.0
    batch_size: int | None = None
    steps: int = 100
    loss: str = "mse"             # mse | xent
    record_every: int = 1
    seed: int = 0
    lr_weights: tuple[float, ...] | None = None
    lr_biases: tuple[float, ...] | None = None
    snapshot_params: bool = False

    def __post_init__(self):
        if self.kind not in ("gd", "momentum"):
            raise ShapeError(f"unknown optimizer kind {self.kind!r}")
        if self.loss not in ("mse", "xent"):
            raise ShapeError(f"unknown loss {self.loss!r}")
        if self.eta <= 0:
            raise ShapeError("eta must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ShapeError("beta must lie in [0, 1)")
        if self.steps < 0 or self.record_every < 1:
            raise ShapeError("steps must be >= 0 and record_every >= 1")


@dataclass
class Trajectory:
    """Recorded observables of one training run."""

    steps: np.ndarray                   # recorded step indices
    train_outputs: np.ndarray           # (T, train examples, n_out)
    test_outputs: np.ndarray | None     # (T, test examples, n_out)
    train_loss: np.ndarray
    test_loss: np.ndarray | None
    train_accuracy: np.ndarray
    test_accuracy: np.ndarray | None
    snapshots: dict[int, ParameterSet] = field(default_factory=dict)


@dataclass
class DriftReport:
    """How far parameters and empirical kernels moved from initialization.

    ``weight_rel[t, j]`` is the relative Frobenius change of layer j's
    weight matrix; ``param_scaled`` is the full parameter displacement over
    sqrt(max hidden width); kernel drifts compare the empirical tangent
    kernel and the outer-product output kernel against their step-0 values.
    """

    steps: np.ndarray
    weight_rel: np.ndarray      # (T, num layers)
    param_scaled: np.ndarray    # (T,)
    ntk_abs: np.ndarray
    ntk_rel: np.ndarray
    nngp_rel: np.ndarray


@dataclass
class TrajectoryComparison:
    """Output discrepancy between two runs on a shared record grid."""

    steps: np.ndarray
    sup_train: float
    sup_test: float | None
    rmse_train: np.ndarray
    rmse_test: np.ndarray | None

    @property
    def sup(self) -> float:
        if self.sup_test is None:
            return self.sup_train
        return max(self.sup_train, self.sup_test)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _loss_and_grad(outputs: np.ndarray, labels: np.ndarray, loss: str):
    """Average loss and the summed-gradient seed d(total loss)/d(outputs)."""
    if loss == "mse":
        res = outputs - labels
        return 0.5 * float(np.mean(np.sum(res ** 2, axis=1))), res
    probs = softmax(outputs)
    z = outputs - outputs.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    avg = float(np.mean(lse - (z * labels).sum(axis=1)))
    return avg, probs - labels


def _accuracy(outputs: np.ndarray, labels: np.ndarray) -> float:
    if labels.shape[1] == 1:
        return float(np.mean(np.sign(outputs[:, 0]) == np.sign(labels[:, 0])))
    return float(np.mean(outputs.argmax(axis=1) == labels.argmax(axis=1)))


def _record_grid(steps: int, record_every: int) -> np.ndarray:
    grid = np.arange(0, steps + 1, record_every)
    if grid[-1] != steps:
        grid = np.append(grid, steps)
    return grid


def snapshot_steps(steps: int) -> list[int]:
    """Geometric step grid {0, 1, 2, 4, ...} plus the final step."""
    out = [0]
    p = 1
    while p < steps:
        out.append(p)
        p *= 2
    if steps > 0:
        out.append(steps)
    return sorted(set(out))


class _BatchSampler:
    """Seeded epoch reshuffle; a full-size batch keeps index order."""

    def __init__(self, count: int, batch_size: int | None, seed: int):
        self.count = count
        self.batch_size = count if batch_size is None else int(batch_size)
        if not 1 <= self.batch_size <= count:
            raise ShapeError(
                f"batch_size must lie in [1, {count}], got {self.batch_size}"
            )
        self._rng = np.random.Generator(np.random.Philox(key=[int(seed), 0xBA7C4]))
        self._queue: list[np.ndarray] = []

    def next(self) -> np.ndarray:
        if not self._queue:
            perm = self._rng.permutation(self.count)
            if self.batch_size == self.count:
                self._queue = [np.arange(self.count)]
            else:
                self._queue = [
                    perm[i : i + self.batch_size]
                    for i in range(0, self.count, self.batch_size)
                ]
        return self._queue.pop(0)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _backprop_raw(
    arch: Architecture,
    params: ParameterSet,
    fc,
    grad_outputs: np.ndarray,
):
    """Backpropagate d(total loss)/d(outputs) to per-tensor Gram gradients.

    Returned gradients are taken w.r.t. the effective (forward) tensors;
    the parameterization scales are folded into the update rates instead,
    which avoids copying wide weight matrices every step.
    """
    _, dphi = ACTIVATIONS[arch.activation]
    ntk_mode = params.mode == "ntk"
    scales = arch.weight_scales() if ntk_mode else None
    acts, pres = fc.activations, fc.preactivations
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = grad_outputs
    for j in range(n_layers - 1, -1, -1):
        gw[j] = acts[j].T @ delta
        gb[j] = delta.sum(axis=0)
        if j > 0:
            delta = delta @ params.weights[j].T
            if ntk_mode:
                delta *= scales[j]
            delta *= dphi(pres[j - 1])
    return gw, gb


def _update_rates(arch: Architecture, params: ParameterSet, lw, lb):
    """Per-layer step sizes on the raw tensors for unit Gram gradient.

    In ntk mode a unit gradient of the effective weights moves the raw
    tensor by the layer scale, so the chain rule contributes one factor of
    scale (weights) or sigma_b (biases) to each rate.
    """
    if params.mode == "ntk":
        scales = arch.weight_scales()
        sb = np.sqrt(arch.sigma_b2)
        return [r * s for r, s in zip(lw, scales)], [r * sb for r in lb]
    return list(lw), list(lb)


def _resolve_rates(arch: Architecture, opt: OptimizerConfig):
    n_layers = arch.depth + 1
    if opt.lr_weights is None and opt.lr_biases is None:
        return [opt.eta] * n_layers, [opt.eta] * n_layers
    if arch.param_mode != "ntk":
        raise ShapeError("per-layer learning rates require ntk parameterization")
    lw = list(opt.lr_weights) if opt.lr_weights is not None else [opt.eta] * n_layers
    lb = list(opt.lr_biases) if opt.lr_biases is not None else [opt.eta] * n_layers
    if len(lw) != n_layers or len(lb) != n_layers:
        raise ShapeError(f"per-layer rates must have {n_layers} entries")
    return lw, lb


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _validate_task(data: Dataset, opt: OptimizerConfig) -> None:
    if opt.loss == "xent":
        if data.n_out < 2:
            raise ShapeError("cross-entropy needs n_out >= 2")
        rows = np.sort(data.labels, axis=1)
        if not (np.all(rows[:, :-1] == 0.0) and np.all(rows[:, -1] == 1.0)):
            raise ShapeError("cross-entropy needs one-hot label rows")


def train_network(
    arch: Architecture,
    params0: ParameterSet,
    data: Dataset,
    test: Dataset | None,
    opt: OptimizerConfig,
) -> Trajectory:
    """Gradient-descent (or momentum) training of the actual network.

    Gradients are recomputed exactly every step; nothing is frozen.  Raises
    :class:`DivergenceError` when the average batch loss passes 1e12.
    """
    _validate_task(data, opt)
    if data.n_in != arch.n_in or data.n_out != arch.n_out:
        raise ShapeError("dataset shape does not match architecture")
    params = params0.copy()
    velocity_w = [np.zeros_like(w) for w in params.weights]
    velocity_b = [np.zeros_like(b) for b in params.biases]
    lw, lb = _resolve_rates(arch, opt)
    w_rate, b_rate = _update_rates(arch, params, lw, lb)
    sampler = _BatchSampler(data.count, opt.batch_size, opt.seed)
    grid = _record_grid(opt.steps, opt.record_every)
    snaps = set(snapshot_steps(opt.steps)) if opt.snapshot_params else set()

    rec = _Recorder(arch, data, test, opt.loss)
    result_snaps: dict[int, ParameterSet] = {}
    for step in range(opt.steps + 1):
        if step in snaps:
            result_snaps[step] = params.copy()
        if step in grid:
            rec.record(step, lambda x: forward(arch, params, x))
        if step == opt.steps:
            break
        batch = sampler.next()
        xb, yb = data.inputs[batch], data.labels[batch]
        fc = forward(arch, params, xb, cache=True)
        avg_loss, grad_f = _loss_and_grad(fc.outputs, yb, opt.loss)
        if not np.isfinite(avg_loss) or avg_loss > DIVERGENCE_GUARD:
            raise DivergenceError(step, avg_loss)
        gw, gb = _backprop_raw(arch, params, fc, grad_f)
        for j in range(len(params.weights)):
            gw[j] *= w_rate[j]  # fresh temporaries owned here; scale in place
            gb[j] *= b_rate[j]
            if opt.kind == "gd":
                params.weights[j] -= gw[j]
                params.biases[j] -= gb[j]
            else:
                velocity_w[j] *= opt.beta
                velocity_w[j] -= gw[j]
                velocity_b[j] *= opt.beta
                velocity_b[j] -= gb[j]
                params.weights[j] += velocity_w[j]
                params.biases[j] += velocity_b[j]
    return rec.finish(grid, result_snaps)


def train_linearized(
    arch: Architecture,
    params0: ParameterSet,
    data: Dataset,
    test: Dataset | None,
    opt: OptimizerConfig,
) -> Trajectory:
    """Directly optimize the first-order model around ``params0``.

    The Jacobian is computed once at initialization and frozen; the model is
    ``f0 + J0 @ omega`` and training moves only ``omega``.  Supports the
    same losses, batching, and momentum as :func:`train_network`.
    """
    _validate_task(data, opt)
    if opt.lr_weights is not None or opt.lr_biases is not None:
        raise ShapeError("per-layer rates are not supported for the linearized model")
    j_train = jacobian(arch, params0, data.inputs)
    f0_train = forward(arch, params0, data.inputs)
    j_test = None
    f0_test = None
    if test is not None:
        j_test = jacobian(arch, params0, test.inputs)
        f0_test = forward(arch, params0, test.inputs)
    k = arch.n_out
    m = data.count

    omega = np.zeros(j_train.num_params)
    velocity = np.zeros_like(omega)
    sampler = _BatchSampler(m, opt.batch_size, opt.seed)
    grid = _record_grid(opt.steps, opt.record_every)
    snaps = set(snapshot_steps(opt.steps)) if opt.snapshot_params else set()
    theta0_flat = params0.flatten()

    def model(jm: JacobianMatrix, f0: np.ndarray) -> np.ndarray:
        return f0 + (jm.matrix @ omega).reshape(-1, k)

    rec = _Recorder(arch, data, test, opt.loss)
    result_snaps: dict[int, ParameterSet] = {}
    for step in range(opt.steps + 1):
        if step in snaps:
            result_snaps[step] = unflatten(arch, theta0_flat + omega, params0.mode)
        if step in grid:
            rec.record_values(
                step,
                model(j_train, f0_train),
                None if test is None else model(j_test, f0_test),
            )
        if step == opt.steps:
            break
        batch = sampler.next()
        rows = (batch[:, None] * k + np.arange(k)[None, :]).ravel()
        outputs = f0_train[batch] + (j_train.matrix[rows] @ omega).reshape(-1, k)
        avg_loss, grad_f = _loss_and_grad(outputs, data.labels[batch], opt.loss)
        if not np.isfinite(avg_loss) or avg_loss > DIVERGENCE_GUARD:
            raise DivergenceError(step, avg_loss)
        g = j_train.matrix[rows].T @ grad_f.ravel()
        if opt.kind == "gd":
            omega -= opt.eta * g
        else:
            velocity = opt.beta * velocity - opt.eta * g
            omega = omega + velocity
    return rec.finish(grid, result_snaps)


class _Recorder:
    def __init__(self, arch, data, test, loss):
        self.data = data
        self.test = test
        self.loss = loss
        self.rows = []

    def record(self, step, fwd):
        self.record_values(
            step,
            fwd(self.data.inputs),
            None if self.test is None else fwd(self.test.inputs),
        )

    def record_values(self, step, train_out, test_out):
        tr_loss, _ = _loss_and_grad(train_out, self.data.labels, self.loss)
        row = {
            "step": step,
            "train_out": train_out,
            "train_loss": tr_loss,
            "train_acc": _accuracy(train_out, self.data.labels),
        }
        if test_out is not None:
            te_loss, _ = _loss_and_grad(test_out, self.test.labels, self.loss)
            row.update(
                test_out=test_out,
                test_loss=te_loss,
                test_acc=_accuracy(test_out, self.test.labels),
            )
        self.rows.append(row)

    def finish(self, grid, snapshots) -> Trajectory:
        has_test = self.test is not None
        return Trajectory(
            steps=np.asarray([r["step"] for r in self.rows]),
            train_outputs=np.stack([r["train_out"] for r in self.rows]),
            test_outputs=np.stack([r["test_out"] for r in self.rows]) if has_test else None,
            train_loss=np.asarray([r["train_loss"] for r in self.rows]),
            test_loss=np.asarray([r["test_loss"] for r in self.rows]) if has_test else None,
            train_accuracy=np.asarray([r["train_acc"] for r in self.rows]),
            test_accuracy=np.asarray([r["test_acc"] for r in self.rows]) if has_test else None,
            snapshots=snapshots,
        )


# ---------------------------------------------------------------------------
# Drift observables and trajectory comparison
# ---------------------------------------------------------------------------

def drift_metrics(
    arch: Architecture, trajectory: Trajectory, data: Dataset
) -> DriftReport:
    """Recompute drift observables from the stored parameter snapshots.

    The output kernel uses the single-draw outer-product surrogate
    ``f_t(X) f_t(X)^T``; the tangent kernel is reassembled exactly at every
    snapshot.
    """
    if not trajectory.snapshots:
        raise ShapeError("trajectory has no parameter snapshots")
    steps = np.asarray(sorted(trajectory.snapshots), dtype=np.int64)
    if steps[0] != 0:
        raise ShapeError("snapshots must include step 0")
    p0 = trajectory.snapshots[0]
    theta0_flat = p0.flatten()
    ntk0 = empirical_ntk_direct(arch, p0, data.inputs).base
    f0 = forward(arch, p0, data.inputs).reshape(-1, 1)
    nngp0 = f0 @ f0.T
    ntk0_norm = np.linalg.norm(ntk0)
    nngp0_norm = np.linalg.norm(nngp0)
    w0_norms = [np.linalg.norm(w) for w in p0.weights]
    n_scale = np.sqrt(max(arch.hidden_widths, default=arch.n_in))

    weight_rel, param_scaled, ntk_abs, ntk_rel, nngp_rel = [], [], [], [], []
    for step in steps:
        pt = trajectory.snapshots[int(step)]
        weight_rel.append(
            [
                np.linalg.norm(wt - w0) / n0
                for wt, w0, n0 in zip(pt.weights, p0.weights, w0_norms)
            ]
        )
        param_scaled.append(
            np.linalg.norm(pt.flatten() - theta0_flat) / n_scale
        )
        ntk_t = empirical_ntk_direct(arch, pt, data.inputs).base
        diff = np.linalg.norm(ntk_t - ntk0)
        ntk_abs.append(diff)
        ntk_rel.append(diff / ntk0_norm)
        ft = forward(arch, pt, data.inputs).reshape(-1, 1)
        nngp_rel.append(np.linalg.norm(ft @ ft.T - nngp0) / nngp0_norm)
    return DriftReport(
        steps=steps,
        weight_rel=np.asarray(weight_rel),
        param_scaled=np.asarray(param_scaled),
        ntk_abs=np.asarray(ntk_abs),
        ntk_rel=np.asarray(ntk_rel),
        nngp_rel=np.asarray(nngp_rel),
    )


def compare_trajectories(a: Trajectory, b: Trajectory) -> TrajectoryComparison:
    """Sup-norm and per-step RMSE of output differences on a shared grid."""
    if not np.array_equal(a.steps, b.steps):
        raise GridError("record grids differ")
    diff_train = a.train_outputs - b.train_outputs
    rmse_train = np.sqrt(np.mean(diff_train ** 2, axis=(1, 2)))
    sup_train = float(np.max(np.abs(diff_train)))
    rmse_test = None
    sup_test = None
    if a.test_outputs is not None and b.test_outputs is not None:
        diff_test = a.test_outputs - b.test_outputs
        rmse_test = np.sqrt(np.mean(diff_test ** 2, axis=(1, 2)))
        sup_test = float(np.max(np.abs(diff_test)))
    return TrajectoryComparison(
        steps=a.steps.copy(),
        sup_train=sup_train,
        sup_test=sup_test,
        rmse_train=rmse_train,
        rmse_test=rmse_test,
    )
