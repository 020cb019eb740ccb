"""Monte Carlo estimation of the output-covariance and tangent kernels from
finite-width random networks, and width/sample convergence measurement.

Draw ``m`` uses the derived seed ``seed ^ m``, so estimates are reproducible
and independent of how many worker threads execute the draws; aggregation
always sums in draw order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .analytic_kernels import KernelMatrix, ntk_kernel
from .errors import ShapeError
from .network import (
    Architecture,
    empirical_nngp_features,
    empirical_ntk_direct,
    forward,
    init_params,
)


@dataclass(frozen=True)
class ConvergenceRecord:
    """Relative Frobenius error of both kernel estimates at one (width, M)."""

    width: int
    num_samples: int
    frobenius_error_nngp: float
    frobenius_error_ntk: float
    relative: bool = True


def _average_blocks(full: np.ndarray, n_out: int) -> np.ndarray:
    """Average the per-output diagonal blocks of an (m*k, m*k) matrix."""
    m = full.shape[0] // n_out
    blocks = full.reshape(m, n_out, m, n_out)
    return np.einsum("iaja->ij", blocks) / n_out


def _cross_block_rms(full: np.ndarray, n_out: int) -> float:
    """RMS of the off-output blocks; a diagnostic that should shrink with M."""
    if n_out == 1:
        return 0.0
    m = full.shape[0] // n_out
    blocks = full.reshape(m, n_out, m, n_out)
    total = 0.0
    count = 0
    for a in range(n_out):
        for b in range(n_out):
            if a != b:
                total += float(np.sum(blocks[:, a, :, b] ** 2))
                count += m * m
    return np.sqrt(total / count)


def _mc_average(arch, x, num_samples, seed, threads, one_draw):
    if num_samples < 1:
        raise ShapeError("num_samples must be >= 1")
    draws = range(num_samples)
    if threads is None or threads <= 1:
        results = (one_draw(d) for d in draws)
        total = None
        for r in results:
            total = r if total is None else total + r
        return total / num_samples
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(one_draw, d) for d in draws]
        total = None
        for fut in futures:  # fixed summation order by draw index
            r = fut.result()
            total = r if total is None else total + r
    return total / num_samples


def mc_nngp(
    arch: Architecture,
    x: np.ndarray,
    num_samples: int,
    seed: int,
    threads: int | None = None,
    diagnostics: bool = False,
):
    """Average outer product of initial outputs over random draws.

    Returns the per-pair base kernel (output-diagonal blocks averaged);
    with ``diagnostics=True`` also the RMS of the cross-output blocks,
    which vanish in the wide limit.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))

    def one_draw(m: int) -> np.ndarray:
        params = init_params(arch, seed ^ m)
        f = forward(arch, params, x).reshape(-1, 1)  # example-major flatten
        return f @ f.T

    mean_full = _mc_average(arch, x, num_samples, seed, threads, one_draw)
    base = _average_blocks(mean_full, arch.n_out)
    kernel = KernelMatrix(base, output_multiplicity=arch.n_out)
    if diagnostics:
        return kernel, _cross_block_rms(mean_full, arch.n_out)
    return kernel


def mc_ntk(
    arch: Architecture,
    x: np.ndarray,
    num_samples: int,
    seed: int,
    threads: int | None = None,
    diagnostics: bool = False,
):
    """Average empirical tangent kernel over random draws."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))

    def one_draw(m: int) -> np.ndarray:
        params = init_params(arch, seed ^ m)
        return empirical_ntk_direct(arch, params, x).base

    mean_full = _mc_average(arch, x, num_samples, seed, threads, one_draw)
    base = _average_blocks(mean_full, arch.n_out)
    kernel = KernelMatrix(base, output_multiplicity=arch.n_out)
    if diagnostics:
        return kernel, _cross_block_rms(mean_full, arch.n_out)
    return kernel


def relative_frobenius(estimate: np.ndarray, target: np.ndarray) -> float:
    """``||estimate - target||_F / ||target||_F``."""
    return float(
        np.linalg.norm(estimate - target) / np.linalg.norm(target)
    )


def convergence_sweep(
    arch_template: Architecture,
    x: np.ndarray,
    widths,
    num_samples_list,
    seed: int,
    threads: int | None = None,
    nngp_estimator: str = "features",
) -> list[ConvergenceRecord]:
    """Kernel estimation error across a width ladder and a sample ladder.

    All hidden layers take each ladder width in turn.  For one width the
    sample ladder reuses a single stream of draws, so the M-point at a
    given width matches the standalone estimators with that many samples.

    ``nngp_estimator`` picks how the output covariance is estimated:
    ``"features"`` (default) averages the last-hidden-layer feature Gram,
    whose per-draw error shrinks with width, so the record actually
    measures width convergence; ``"outputs"`` averages the output outer
    product (matching :func:`mc_nngp`), whose draw-to-draw fluctuation is
    width-independent and floors the error at the sampling noise of M.
    """
    widths = [int(w) for w in widths]
    if any(b < a for a, b in zip(widths, widths[1:])):
        raise ShapeError("widths must be ascending")
    if nngp_estimator not in ("features", "outputs"):
        raise ShapeError(f"unknown nngp_estimator {nngp_estimator!r}")
    num_samples_list = sorted(int(m) for m in num_samples_list)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))

    theta_ref, k_ref = ntk_kernel(arch_template, x)
    records = []
    for width in widths:
        arch = Architecture(
            n_in=arch_template.n_in,
            hidden_widths=(width,) * arch_template.depth,
            n_out=arch_template.n_out,
            activation=arch_template.activation,
            sigma_w2=arch_template.sigma_w2,
            sigma_b2=arch_template.sigma_b2,
            param_mode=arch_template.param_mode,
        )

        def one_draw(m: int) -> np.ndarray:
            params = init_params(arch, seed ^ m)
            if nngp_estimator == "features":
                nngp_full = np.kron(
                    empirical_nngp_features(arch, params, x).base,
                    np.eye(arch.n_out),
                )
            else:
                f = forward(arch, params, x).reshape(-1, 1)
                nngp_full = f @ f.T
            ntk_full = empirical_ntk_direct(arch, params, x).base
            return np.stack([nngp_full, ntk_full])

        max_m = num_samples_list[-1]
        running = None
        targets = set(num_samples_list)
        partial: dict[int, np.ndarray] = {}

        def consume(results):
            nonlocal running
            for idx, r in enumerate(results, start=1):
                running = r if running is None else running + r
                if idx in targets:
                    partial[idx] = running / idx

        if threads is None or threads <= 1:
            consume(one_draw(d) for d in range(max_m))
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(one_draw, d) for d in range(max_m)]
                consume(f.result() for f in futures)

        for m_samples in num_samples_list:
            nngp_base = _average_blocks(partial[m_samples][0], arch.n_out)
            ntk_base = _average_blocks(partial[m_samples][1], arch.n_out)
            records.append(
                ConvergenceRecord(
                    width=width,
                    num_samples=m_samples,
                    frobenius_error_nngp=relative_frobenius(nngp_base, k_ref.base),
                    frobenius_error_ntk=relative_frobenius(ntk_base, theta_ref.base),
                )
            )
    return records


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    return float(np.polyfit(lx, ly, 1)[0])
