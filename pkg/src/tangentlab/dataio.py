"""Dataset loading, synthetic data generation, label encoding, and the
input-line interpolation used by the predictive-distribution experiment.

CSV layout is features first, then labels, per row; comma separator, ``.``
decimal, no quoting.  Floats are emitted with shortest round-trip formatting
so a load/save/load cycle is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParseError, ShapeError

#: Columns with variance below this floor standardize to all-zeros.
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class Dataset:
    """Paired input and label matrices, one example per row."""

    inputs: np.ndarray  # (count, n_in)
    labels: np.ndarray  # (count, n_out)

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if inputs.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"inputs have {inputs.shape[0]} rows, labels {labels.shape[0]}"
            )
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(labels))):
            raise ParseError("dataset contains non-finite entries")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_out(self) -> int:
        return self.labels.shape[1]

    def is_binary_regression(self) -> bool:
        """True when labels are a single column of +/-1 values."""
        return self.n_out == 1 and bool(np.all(np.abs(self.labels) == 1.0))


def _parse_row(fields: list[str], path: str, line_no: int) -> list[float]:
    try:
        return [float(f) for f in fields]
    except ValueError as exc:
        raise ParseError(f"{path}:{line_no}: non-numeric field ({exc})") from None


def load_csv(path: str, n_in: int, n_out: int, normalize: bool = False) -> Dataset:
    """Load a dataset from CSV with ``n_in`` feature and ``n_out`` label columns.

    A non-numeric first row is treated as a header and skipped.  Feature
    standardization (zero mean, unit variance over the file) is applied when
    ``normalize`` is set; labels are never rescaled.

    Raises
    ------
    FormatError
        If some row does not have exactly ``n_in + n_out`` fields.
    ParseError
        If a non-header row contains a non-numeric field.
    """
    expected = n_in + n_out
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() != ""]
    for idx, line in enumerate(lines):
        fields = line.split(",")
        if len(fields) != expected:
            raise FormatError(
                f"{path}:{idx + 1}: expected {expected} fields, got {len(fields)}"
            )
        if idx == 0:
            try:
                rows.append([float(f) for f in fields])
                continue
            except ValueError:
                continue  # header row
        rows.append(_parse_row(fields, path, idx + 1))
    data = np.asarray(rows, dtype=np.float64)
    if data.size == 0:
        raise FormatError(f"{path}: no data rows")
    inputs, labels = data[:, :n_in], data[:, n_in:]
    if normalize:
        mean = inputs.mean(axis=0)
        std = np.sqrt(np.maximum(inputs.var(axis=0), VARIANCE_FLOOR))
        inputs = (inputs - mean) / std
    return Dataset(inputs=inputs, labels=labels)


def save_csv(dataset: Dataset, path: str) -> None:
    """Write a dataset in the same layout :func:`load_csv` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in zip(dataset.inputs, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in (*x, *y)) + "\n")


def _data_rng(seed: int, role: int) -> np.random.Generator:
    # counter-based so roles draw from disjoint, reproducible streams
    return np.random.Generator(np.random.Philox(key=[int(seed), int(role)]))


def synth_gaussian(n_in: int, count: int, seed: int) -> Dataset:
    """Standard-normal inputs with a single +/-1 fair-coin label column."""
    if count < 1:
        raise ShapeError("count must be >= 1")
    rng = _data_rng(seed, role=0)
    inputs = rng.standard_normal((count, n_in))
    labels = np.where(rng.random(count) < 0.5, -1.0, 1.0).reshape(-1, 1)
    return Dataset(inputs=inputs, labels=labels)


def synth_gaussian_classes(
    n_in: int, count: int, num_classes: int, seed: int
) -> Dataset:
    """Standard-normal inputs with uniform class labels, one-hot encoded."""
    if count < 1:
        raise ShapeError("count must be >= 1")
    if num_classes < 2:
        raise ShapeError("num_classes must be >= 2")
    rng = _data_rng(seed, role=1)
    inputs = rng.standard_normal((count, n_in))
    classes = rng.integers(0, num_classes, size=count)
    return Dataset(inputs=inputs, labels=one_hot(classes, num_classes))


def one_hot(classes: np.ndarray, num_classes: int) -> np.ndarray:
    """Encode integer classes as {0,1} one-hot rows (cross-entropy targets)."""
    classes = np.asarray(classes, dtype=np.int64)
    out = np.zeros((classes.shape[0], num_classes))
    out[np.arange(classes.shape[0]), classes] = 1.0
    return out


def signed_one_hot(classes: np.ndarray, num_classes: int) -> np.ndarray:
    """Encode integer classes with +1 for the hot entry and -1 elsewhere.

    Squared-loss multi-class targets; reduces to the single-column +/-1
    convention when ``num_classes == 2`` up to column redundancy.
    """
    return 2.0 * one_hot(classes, num_classes) - 1.0


def interpolate_line(
    x1: np.ndarray, x2: np.ndarray, num_alphas: int
) -> np.ndarray:
    """Inputs ``x(a) = a*x1 + (1-a)*x2`` on a uniform ``a`` grid over [0, 1].

    The first row is ``x2`` (a=0) and the last is ``x1`` (a=1).
    """
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    x2 = np.asarray(x2, dtype=np.float64).ravel()
    if x1.shape != x2.shape:
        raise ShapeError(f"endpoint dimensions differ: {x1.shape} vs {x2.shape}")
    if num_alphas < 2:
        raise ShapeError("num_alphas must be >= 2")
    alphas = np.linspace(0.0, 1.0, num_alphas)
    return alphas[:, None] * x1[None, :] + (1.0 - alphas)[:, None] * x2[None, :]
