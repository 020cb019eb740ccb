"""Exception types shared across the package."""


class TangentLabError(Exception):
    """Base class for all package-specific errors."""


class InvalidMatrix(TangentLabError):
    """Matrix input violates a structural precondition (non-finite, wrong shape)."""


class SpectrumDomainError(TangentLabError):
    """A scalar map was evaluated outside its domain on some eigenvalue."""


class NotPSD(TangentLabError):
    """Factorization failed even after jitter escalation."""


class ShapeError(TangentLabError):
    """Operands have incompatible dimensions."""


class FormatError(TangentLabError):
    """Structurally malformed input file (e.g. ragged CSV rows)."""


class ParseError(TangentLabError):
    """Unparseable payload inside an otherwise well-formed file."""


class InvalidMoment(TangentLabError):
    """Bivariate second-moment inputs violate positivity constraints."""


class DegenerateKernel(TangentLabError):
    """Kernel spectrum unusable for the requested quantity."""


class MissingInitialState(TangentLabError):
    """Per-realization dynamics requested without initial outputs."""


class StiffnessError(TangentLabError):
    """Adaptive integrator step size underflowed."""


class DivergenceError(TangentLabError):
    """Training loss exceeded the divergence guard."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"loss diverged to {loss:.3e} at step {step}")
        self.step = step
        self.loss = loss


class GridError(TangentLabError):
    """Two trajectories were recorded on different step grids."""


class ConfigError(TangentLabError):
    """Invalid experiment configuration."""
