"""Fast backend for the full-batch squared-loss training hot loop.

Ensemble experiments train hundreds of finite-width networks for thousands
of steps; the arithmetic is six large matrix products per member-step plus
in-place weight updates.  When torch is installed its fused ``addmm_``
kernels roughly double throughput over the numpy reference on the same
BLAS, so the backend is picked at import: ``torch`` when importable,
otherwise the pure-numpy fallback.  Both run the identical algorithm; a
small-scale equality test and ``benchmarks/bench_fastpath.py`` compare
them.

Only plain gradient descent with squared loss and full batches lives here;
everything else goes through :mod:`tangentlab.trainer`.
"""

from __future__ import annotations

import importlib.util
from dataclasses import dataclass

import numpy as np

from .dataio import Dataset
from .errors import DivergenceError, ShapeError
from .network import (
    ACTIVATIONS,
    Architecture,
    _effective_tensors,
    init_params,
)

_HAVE_TORCH = importlib.util.find_spec("torch") is not None

#: Backend chosen at import time; "torch" when available.
DEFAULT_BACKEND = "torch" if _HAVE_TORCH else "numpy"


@dataclass
class EnsembleResult:
    """Recorded outputs of an ensemble of identically-trained networks."""

    record_steps: np.ndarray
    train_outputs: np.ndarray  # (members, records, train examples, n_out)
    test_outputs: np.ndarray | None


def _layer_rates(arch: Architecture, eta: float) -> tuple[np.ndarray, float]:
    """Effective-weight learning rates equivalent to raw-tensor descent.

    Descending on the raw unit-normal tensors with rate eta moves the
    effective weights by eta * scale^2 per unit of effective-weight
    gradient, so the loop can run entirely on effective tensors.
    """
    if arch.param_mode == "ntk":
        fan = np.asarray(arch.layer_dims[:-1], dtype=np.float64)
        return eta * arch.sigma_w2 / fan, eta * arch.sigma_b2
    n_layers = arch.depth + 1
    return np.full(n_layers, eta), eta


def train_member_numpy(arch, weights, biases, x, y, x_test, eta, record_steps):
    """Reference loop: full-batch squared-loss descent on effective tensors."""
    phi, dphi = ACTIVATIONS[arch.activation]
    lr_w, lr_b = _layer_rates(arch, eta)
    rec_train, rec_test = [], []
    rec_set = set(int(s) for s in record_steps)
    n_layers = len(weights)

    def fwd(inp):
        a = inp
        for j in range(n_layers - 1):
            a = phi(a @ weights[j] + biases[j])
        return a @ weights[-1] + biases[-1]

    for step in range(int(record_steps[-1]) + 1):
        acts = [x]
        pres = []
        a = x
        for j in range(n_layers - 1):
            h = a @ weights[j] + biases[j]
            pres.append(h)
            a = phi(h)
            acts.append(a)
        out = a @ weights[-1] + biases[-1]
        if step in rec_set:
            if not np.all(np.isfinite(out)):
                raise DivergenceError(step, float("inf"))
            rec_train.append(out.copy())
            rec_test.append(None if x_test is None else fwd(x_test))
        if step == record_steps[-1]:
            break
        delta = out - y
        for j in range(n_layers - 1, -1, -1):
            # propagate before touching this layer's weights
            delta_prev = (
                (delta @ weights[j].T) * dphi(pres[j - 1]) if j > 0 else None
            )
            weights[j] -= lr_w[j] * (acts[j].T @ delta)
            biases[j] -= lr_b * delta.sum(axis=0)
            delta = delta_prev
    return rec_train, rec_test


def _train_member_torch(arch, weights, biases, x, y, x_test, eta, record_steps, dtype):
    import torch

    tdt = torch.float32 if dtype == np.float32 else torch.float64
    phi_name = arch.activation
    phi = {"relu": torch.relu, "erf": torch.erf, "tanh": torch.tanh}[phi_name]
    lr_w, lr_b = _layer_rates(arch, eta)
    ws = [torch.from_numpy(np.ascontiguousarray(w, dtype=dtype)).to(tdt) for w in weights]
    bs = [torch.from_numpy(np.ascontiguousarray(b, dtype=dtype)).to(tdt) for b in biases]
    xt = torch.from_numpy(x.astype(dtype))
    yt = torch.from_numpy(y.astype(dtype))
    xte = None if x_test is None else torch.from_numpy(x_test.astype(dtype))
    rec_train, rec_test = [], []
    rec_set = set(int(s) for s in record_steps)
    n_layers = len(ws)

    def dphi(h, a):
        if phi_name == "relu":
            return (h > 0).to(tdt)
        if phi_name == "tanh":
            return 1.0 - a * a
        return (2.0 / np.sqrt(np.pi)) * torch.exp(-h * h)

    def fwd(inp):
        a = inp
        for j in range(n_layers - 1):
            a = phi(a @ ws[j] + bs[j])
        return a @ ws[-1] + bs[-1]

    with torch.no_grad():
        for step in range(int(record_steps[-1]) + 1):
            acts = [xt]
            pres = []
            a = xt
            for j in range(n_layers - 1):
                h = a @ ws[j] + bs[j]
                pres.append(h)
                a = phi(h)
                acts.append(a)
            out = a @ ws[-1] + bs[-1]
            if step in rec_set:
                if not bool(torch.all(torch.isfinite(out))):
                    raise DivergenceError(step, float("inf"))
                rec_train.append(out.double().numpy().copy())
                rec_test.append(None if xte is None else fwd(xte).double().numpy())
            if step == record_steps[-1]:
                break
            delta = out - yt
            for j in range(n_layers - 1, -1, -1):
                if j > 0:
                    delta_prev = (delta @ ws[j].T) * dphi(pres[j - 1], acts[j])
                ws[j].addmm_(acts[j].T, delta, alpha=-float(lr_w[j]))
                bs[j].add_(delta.sum(dim=0), alpha=-float(lr_b))
                if j > 0:
                    delta = delta_prev
    return rec_train, rec_test


def train_ensemble_gd(
    arch: Architecture,
    seeds,
    data: Dataset,
    test_inputs: np.ndarray | None,
    eta: float,
    steps: int,
    record_steps,
    dtype=np.float64,
    backend: str = "auto",
) -> EnsembleResult:
    """Train one network per seed with full-batch squared-loss descent.

    Members run sequentially (cache-friendly) on the selected backend and
    record train/test outputs at ``record_steps``.  Outputs are returned in
    float64 regardless of the training dtype.
    """
    record_steps = np.asarray(sorted(set(int(s) for s in record_steps)), dtype=np.int64)
    if record_steps[0] != 0 or record_steps[-1] != steps:
        raise ShapeError("record_steps must start at 0 and end at `steps`")
    if backend == "auto":
        backend = DEFAULT_BACKEND
    if backend == "torch" and not _HAVE_TORCH:
        raise ShapeError("torch backend requested but torch is not installed")
    if backend not in ("torch", "numpy"):
        raise ShapeError(f"unknown backend {backend!r}")

    x = np.ascontiguousarray(data.inputs, dtype=dtype)
    y = np.ascontiguousarray(data.labels, dtype=dtype)
    x_test = None if test_inputs is None else np.ascontiguousarray(
        np.atleast_2d(test_inputs), dtype=dtype
    )

    all_train, all_test = [], []
    for seed in seeds:
        params = init_params(arch, int(seed))
        weights, biases = _effective_tensors(arch, params)
        weights = [np.ascontiguousarray(w, dtype=dtype) for w in weights]
        biases = [np.ascontiguousarray(b, dtype=dtype) for b in biases]
        if backend == "torch":
            rec_tr, rec_te = _train_member_torch(
                arch, weights, biases, x, y, x_test, eta, record_steps, dtype
            )
        else:
            rec_tr, rec_te = train_member_numpy(
                arch, weights, biases, x, y, x_test, eta, record_steps
            )
        all_train.append(np.asarray(rec_tr, dtype=np.float64))
        if x_test is not None:
            all_test.append(np.asarray(rec_te, dtype=np.float64))
    return EnsembleResult(
        record_steps=record_steps,
        train_outputs=np.asarray(all_train),
        test_outputs=np.asarray(all_test) if all_test else None,
    )
