"""Finite-width fully-connected networks.

Initialization draws every tensor from a counter-based stream keyed by
(seed, layer, role) with one counter block per fan-in unit, so widening a
layer extends the draw without reshuffling it: a width-n network's
parameters are a prefix of the width-2n network's.  That shared prefix
suppresses sampling noise in width-sweep experiments.

Two parameterizations of the same function family are supported:

* ``ntk``      - raw unit-normal tensors, rescaled by sigma_w/sqrt(fan_in)
                 (weights) and sigma_b (biases) inside the forward pass;
* ``standard`` - tensors stored with the scale baked in and used verbatim.

The empirical tangent kernel is available through explicit Jacobians
(:func:`jacobian` + :func:`empirical_ntk`) or assembled layer by layer from
activation and output-gradient Grams (:func:`empirical_ntk_direct`), which
never materializes a (outputs x parameters) matrix and is the route for
wide networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

from .analytic_kernels import KernelMatrix
from .errors import ShapeError

# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

_SQRT_2_OVER_PI = 2.0 / np.sqrt(np.pi)


def _relu(x):
    return np.maximum(x, 0.0)


def _drelu(x):
    # subgradient 0 at exactly 0, fixed for reproducibility
    return (x > 0).astype(np.float64)


def _derf(x):
    return _SQRT_2_OVER_PI * np.exp(-x * x)


def _dtanh(x):
    t = np.tanh(x)
    return 1.0 - t * t


ACTIVATIONS = {
    "relu": (_relu, _drelu),
    "erf": (_erf, _derf),
    "tanh": (np.tanh, _dtanh),
}


# ---------------------------------------------------------------------------
# Architecture and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    """Static description of a fully-connected network family."""

    n_in: int
    hidden_widths: tuple[int, ...]
    n_out: int
    activation: str
    sigma_w2: float = 1.0
    sigma_b2: float = 0.0
    param_mode: str = "ntk"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.n_in < 1 or self.n_out < 1 or any(w < 1 for w in self.hidden_widths):
            raise ShapeError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.param_mode not in ("ntk", "standard"):
            raise ShapeError(f"unknown param_mode {self.param_mode!r}")
        if self.sigma_w2 < 0 or self.sigma_b2 < 0:
            raise ShapeError("sigma_w2 and sigma_b2 must be nonnegative")

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.hidden_widths)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.n_in, *self.hidden_widths, self.n_out)

    def weight_scales(self) -> np.ndarray:
        """Per-layer forward scale sigma_w / sqrt(fan_in)."""
        dims = self.layer_dims
        return np.sqrt(self.sigma_w2 / np.asarray(dims[:-1], dtype=np.float64))

    def num_params(self) -> int:
        dims = self.layer_dims
        return sum(dims[j] * dims[j + 1] + dims[j + 1] for j in range(len(dims) - 1))


@dataclass
class ParameterSet:
    """Per-layer weight matrices and bias vectors of one realization."""

    weights: list[np.ndarray]  # layer j: (fan_in_j, fan_out_j)
    biases: list[np.ndarray]   # layer j: (fan_out_j,)
    mode: str

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            mode=self.mode,
        )


def unflatten(arch: Architecture, theta: np.ndarray, mode: str | None = None) -> ParameterSet:
    """Inverse of :meth:`ParameterSet.flatten` for the given architecture."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (arch.num_params(),):
        raise ShapeError(f"expected {arch.num_params()} entries, got {theta.shape}")
    dims = arch.layer_dims
    weights, biases, pos = [], [], 0
    for j in range(len(dims) - 1):
        n_in, n_out = dims[j], dims[j + 1]
        weights.append(theta[pos : pos + n_in * n_out].reshape(n_in, n_out))
        pos += n_in * n_out
        biases.append(theta[pos : pos + n_out])
        pos += n_out
    return ParameterSet(weights=weights, biases=biases, mode=mode or arch.param_mode)


def layer_slices(arch: Architecture) -> list[slice]:
    """Flat-vector slice of each layer's (weights, bias) block."""
    dims = arch.layer_dims
    out, pos = [], 0
    for j in range(len(dims) - 1):
        size = dims[j] * dims[j + 1] + dims[j + 1]
        out.append(slice(pos, pos + size))
        pos += size
    return out


def _philox(seed: int, layer: int, role: int, row: int) -> np.random.Generator:
    # one 2^64 counter block per fan-in row: values depend only on
    # (seed, layer, role, row, column), never on the tensor shape
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, (int(layer) << 8) | int(role)]
    return np.random.Generator(np.random.Philox(key=key, counter=int(row) << 64))


def _raw_draw(seed: int, layer: int, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    w = np.empty((n_in, n_out))
    for i in range(n_in):
        w[i] = _philox(seed, layer, 0, i).standard_normal(n_out)
    b = _philox(seed, layer, 1, 0).standard_normal(n_out)
    return w, b


def init_params(arch: Architecture, seed: int) -> ParameterSet:
    """Draw parameters for one realization of the architecture.

    ``ntk`` mode stores the raw unit normals; ``standard`` mode stores them
    with variances sigma_w2/fan_in and sigma_b2 baked in.  Both modes share
    the same raw draws, so the exact reparameterization map relates them.
    """
    dims = arch.layer_dims
    weights, biases = [], []
    scales = arch.weight_scales()
    sb = np.sqrt(arch.sigma_b2)
    for j in range(len(dims) - 1):
        w, b = _raw_draw(seed, j, dims[j], dims[j + 1])
        if arch.param_mode == "standard":
            w = w * scales[j]
            b = b * sb
        weights.append(w)
        biases.append(b)
    return ParameterSet(weights=weights, biases=biases, mode=arch.param_mode)


def map_to_standard(arch: Architecture, params: ParameterSet) -> ParameterSet:
    """Exact reparameterization of ntk-mode tensors into standard-mode ones."""
    if params.mode != "ntk":
        raise ShapeError("map_to_standard expects ntk-mode parameters")
    scales = arch.weight_scales()
    sb = np.sqrt(arch.sigma_b2)
    return ParameterSet(
        weights=[w * s for w, s in zip(params.weights, scales)],
        biases=[b * sb for b in params.biases],
        mode="standard",
    )


# ---------------------------------------------------------------------------
# Forward pass and reverse-mode derivatives
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Activations and preactivations of one forward pass."""

    activations: list[np.ndarray]     # x^0 = inputs, x^1..x^L post-activation
    preactivations: list[np.ndarray]  # h^1..h^{L+1}

    @property
    def outputs(self) -> np.ndarray:
        return self.preactivations[-1]


def _effective_tensors(arch: Architecture, params: ParameterSet):
    """Weights/biases as used by the forward map (scales applied in ntk mode)."""
    if params.mode == "standard":
        return params.weights, params.biases
    scales = arch.weight_scales()
    sb = np.sqrt(arch.sigma_b2)
    weights = [w * s for w, s in zip(params.weights, scales)]
    biases = [b * sb for b in params.biases]
    return weights, biases


def forward(
    arch: Architecture,
    params: ParameterSet,
    x: np.ndarray,
    cache: bool = False,
):
    """Network outputs for a batch of inputs; no activation on the last layer.

    In ntk mode the per-layer scales multiply the (small) activation
    products rather than the stored weight matrices, so wide layers are
    never copied.  With ``cache=True`` returns a :class:`ForwardCache`
    holding every intermediate tensor needed for reverse-mode sweeps.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != arch.n_in:
        raise ShapeError(f"inputs must have {arch.n_in} columns, got {x.shape[1]}")
    phi, _ = ACTIVATIONS[arch.activation]
    ntk_mode = params.mode == "ntk"
    scales = arch.weight_scales() if ntk_mode else None
    sb = np.sqrt(arch.sigma_b2)
    acts = [x]
    pres = []
    a = x
    last = len(params.weights) - 1
    for j, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = a @ w
        if ntk_mode:
            h *= scales[j]
            h += sb * b
        else:
            h += b
        pres.append(h)
        if j < last:
            a = phi(h)
            acts.append(a)
    if cache:
        return ForwardCache(activations=acts, preactivations=pres)
    return pres[-1]


def output_deltas(
    arch: Architecture, params: ParameterSet, fc: ForwardCache
) -> list[np.ndarray]:
    """d f / d h^{j+1} for every layer j, shape (examples, n_out, fan_out_j).

    These are the reverse-mode seeds shared by Jacobian assembly and the
    Gram-based tangent kernel.
    """
    _, dphi = ACTIVATIONS[arch.activation]
    ntk_mode = params.mode == "ntk"
    scales = arch.weight_scales() if ntk_mode else None
    m = fc.activations[0].shape[0]
    k = arch.n_out
    deltas = [np.broadcast_to(np.eye(k), (m, k, k)).copy()]
    for j in range(len(params.weights) - 1, 0, -1):
        up = deltas[-1] @ params.weights[j].T     # (m, k, fan_in_of_layer_j)
        if ntk_mode:
            up *= scales[j]
        up *= dphi(fc.preactivations[j - 1])[:, None, :]
        deltas.append(up)
    deltas.reverse()
    return deltas


@dataclass
class JacobianMatrix:
    """Dense derivative of every output w.r.t. every trainable parameter.

    Rows are ordered example-major with the ``n_out`` coordinates of one
    example contiguous; columns follow the flat parameter layout.
    """

    matrix: np.ndarray          # (n_out * examples, num_params)
    layer_slices: list[slice]
    n_out: int

    @property
    def num_examples(self) -> int:
        return self.matrix.shape[0] // self.n_out

    @property
    def num_params(self) -> int:
        return self.matrix.shape[1]


def jacobian(arch: Architecture, params: ParameterSet, x: np.ndarray) -> JacobianMatrix:
    """Exact reverse-mode Jacobian, assembled one example at a time.

    Peak extra memory is one (n_out, num_params) block per example on top
    of the result; intended for desk-scale parameter counts.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fc = forward(arch, params, x, cache=True)
    deltas = output_deltas(arch, params, fc)
    m, k = x.shape[0], arch.n_out
    p = arch.num_params()
    slices = layer_slices(arch)
    scales = arch.weight_scales()
    sb = np.sqrt(arch.sigma_b2)

    out = np.empty((m * k, p))
    for e in range(m):
        pos = 0
        for j, sl in enumerate(slices):
            a = fc.activations[j][e]          # (fan_in,)
            d = deltas[j][e]                  # (k, fan_out)
            if params.mode == "ntk":
                dw = scales[j] * np.einsum("i,kj->kij", a, d)
                db = sb * d
            else:
                dw = np.einsum("i,kj->kij", a, d)
                db = d
            nw = dw.shape[1] * dw.shape[2]
            out[e * k : (e + 1) * k, pos : pos + nw] = dw.reshape(k, nw)
            pos += nw
            out[e * k : (e + 1) * k, pos : pos + db.shape[1]] = db
            pos += db.shape[1]
    return JacobianMatrix(matrix=out, layer_slices=slices, n_out=k)


# ---------------------------------------------------------------------------
# Empirical kernels
# ---------------------------------------------------------------------------

def empirical_ntk(
    j1: JacobianMatrix,
    j2: JacobianMatrix | None = None,
    per_layer: bool = False,
):
    """Tangent kernel ``J1 @ J2.T`` of one draw, optionally split by layer.

    The per-layer summands add up to the total exactly; they expose how
    much each layer contributes to the kernel.
    """
    j2 = j1 if j2 is None else j2
    if j1.num_params != j2.num_params:
        raise ShapeError(
            f"Jacobians disagree on parameter count: {j1.num_params} vs {j2.num_params}"
        )
    total = KernelMatrix(j1.matrix @ j2.matrix.T, output_multiplicity=1)
    if not per_layer:
        return total
    parts = [
        KernelMatrix(j1.matrix[:, sl] @ j2.matrix[:, sl].T, output_multiplicity=1)
        for sl in j1.layer_slices
    ]
    return total, parts


def empirical_ntk_direct(
    arch: Architecture,
    params: ParameterSet,
    x1: np.ndarray,
    x2: np.ndarray | None = None,
    per_layer: bool = False,
):
    """Tangent kernel from activation and output-gradient Grams.

    Algebraically identical to ``jacobian(x1) @ jacobian(x2).T`` but holds
    only per-layer (examples, n_out, width) tensors, so it scales to wide
    networks.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    same = x2 is None
    x2m = x1 if same else np.atleast_2d(np.asarray(x2, dtype=np.float64))
    fc1 = forward(arch, params, x1, cache=True)
    fc2 = fc1 if same else forward(arch, params, x2m, cache=True)
    d1 = output_deltas(arch, params, fc1)
    d2 = d1 if same else output_deltas(arch, params, fc2)

    k = arch.n_out
    m1, m2 = x1.shape[0], x2m.shape[0]
    if params.mode == "ntk":
        wfac = arch.sigma_w2 / np.asarray(arch.layer_dims[:-1], dtype=np.float64)
        bfac = arch.sigma_b2
    else:
        wfac = np.ones(len(arch.layer_dims) - 1)
        bfac = 1.0

    total = np.zeros((m1 * k, m2 * k))
    parts = []
    for j in range(len(d1)):
        act_gram = fc1.activations[j] @ fc2.activations[j].T       # (m1, m2)
        delta_gram = np.tensordot(d1[j], d2[j], axes=([2], [2]))   # (m1, k, m2, k)
        block = (wfac[j] * act_gram + bfac)[:, None, :, None] * delta_gram
        block = block.reshape(m1 * k, m2 * k)
        total += block
        if per_layer:
            parts.append(KernelMatrix(block, output_multiplicity=1))
    result = KernelMatrix(total, output_multiplicity=1)
    if per_layer:
        return result, parts
    return result


def empirical_nngp_features(
    arch: Architecture,
    params: ParameterSet,
    x1: np.ndarray,
    x2: np.ndarray | None = None,
) -> KernelMatrix:
    """Single-draw output-covariance estimate from last-hidden-layer features.

    ``sigma_w2/width * <x^L(x), x^L(x')> + sigma_b2`` -- the kernel a
    readout-only trainer actually descends on.  Converges to the analytic
    output covariance as width grows.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    same = x2 is None
    x2m = x1 if same else np.atleast_2d(np.asarray(x2, dtype=np.float64))
    fc1 = forward(arch, params, x1, cache=True)
    fc2 = fc1 if same else forward(arch, params, x2m, cache=True)
    feats1 = fc1.activations[-1]
    feats2 = fc2.activations[-1]
    width = feats1.shape[1]
    base = arch.sigma_w2 * (feats1 @ feats2.T) / width + arch.sigma_b2
    return KernelMatrix(base, output_multiplicity=arch.n_out)
