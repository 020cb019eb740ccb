"""Experiment implementations behind the command-line subcommands.

Each function takes a fully-resolved configuration dict and returns
``(tables, info)`` where ``tables`` maps an output filename to
``(fieldnames, rows)`` and ``info`` carries run metadata (resolved values
such as auto-selected learning rates).  All randomness is derived from the
config seed, so a run is a pure function of its resolved configuration.
"""

from __future__ import annotations

import numpy as np

from . import dataio
from .analytic_kernels import nngp_kernel, ntk_kernel
from .dynamics import (
    DISCRETE,
    DynamicsProblem,
    eta_critical,
    lin_mse_dynamics,
    nngp_posterior,
    ntk_gp_moments,
    readout_gp_moments,
)
from .empirical_kernels import convergence_sweep, fit_loglog_slope
from .errors import ConfigError
from .fastpath import train_ensemble_gd
from .integrators import momentum_lin_dynamics, xent_lin_dynamics, xent_loss
from .network import Architecture, empirical_ntk_direct, forward, init_params
from .trainer import (
    OptimizerConfig,
    drift_metrics,
    snapshot_steps,
    train_linearized,
    train_network,
)

Table = tuple[list[str], list[tuple]]


# ---------------------------------------------------------------------------
# config helpers
# ---------------------------------------------------------------------------

def build_arch(cfg: dict, n_in: int, n_out: int, width: int | None = None) -> Architecture:
    a = cfg["arch"]
    hidden = tuple(a["hidden_widths"]) if width is None else (width,) * len(a["hidden_widths"])
    return Architecture(
        n_in=n_in,
        hidden_widths=hidden,
        n_out=n_out,
        activation=a["activation"],
        sigma_w2=a["sigma_w2"],
        sigma_b2=a["sigma_b2"],
        param_mode=a["param_mode"],
    )


def load_data(cfg: dict, seed: int) -> tuple[dataio.Dataset, dataio.Dataset | None]:
    d = cfg["data"]
    if d["kind"] == "csv":
        full = dataio.load_csv(d["path"], d["n0"], d["n_out"], normalize=d["normalize"])
        count, test_count = d["count"], d["test_count"]
        if count + test_count > full.count:
            raise ConfigError(
                f"csv has {full.count} rows, need {count}+{test_count}"
            )
        train = dataio.Dataset(full.inputs[:count], full.labels[:count])
        test = (
            dataio.Dataset(
                full.inputs[count : count + test_count],
                full.labels[count : count + test_count],
            )
            if test_count
            else None
        )
        return train, test
    if d["kind"] == "synthetic":
        train = dataio.synth_gaussian(d["n0"], d["count"], seed)
        test = dataio.synth_gaussian(d["n0"], d["test_count"], seed + 1) if d["test_count"] else None
        return train, test
    if d["kind"] == "synthetic-classes":
        train = dataio.synth_gaussian_classes(d["n0"], d["count"], d["classes"], seed)
        test = (
            dataio.synth_gaussian_classes(d["n0"], d["test_count"], d["classes"], seed + 1)
            if d["test_count"]
            else None
        )
        return train, test
    raise ConfigError(f"unknown data kind {d['kind']!r}")


def resolve_eta(cfg: dict, arch: Architecture, train) -> float:
    """Explicit learning rate, or the configured fraction of the stability scale."""
    eta = cfg["opt"]["eta"]
    if eta is not None:
        return float(eta)
    theta, _ = ntk_kernel(arch, train.inputs)
    return cfg["opt"]["eta_fraction"] * eta_critical(theta)


def _optimizer(cfg: dict, eta: float, **overrides) -> OptimizerConfig:
    o = cfg["opt"]
    kw = dict(
        kind=o["kind"],
        eta=eta,
        beta=o["beta"],
        batch_size=o["batch_size"],
        steps=o["steps"],
        loss=o["loss"],
        record_every=o["record_every"],
        seed=cfg["seed"],
    )
    kw.update(overrides)
    return OptimizerConfig(**kw)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def run_kernels(cfg: dict):
    """Dump the analytic tangent and covariance kernels of the inputs."""
    train, _ = load_data(cfg, cfg["seed"])
    arch = build_arch(cfg, train.n_in, train.n_out)
    theta, k = ntk_kernel(arch, train.inputs)
    fields = ["row", "col", "ntk", "nngp"]
    rows = [
        (i, j, theta.base[i, j], k.base[i, j])
        for i in range(theta.base.shape[0])
        for j in range(theta.base.shape[1])
    ]
    return {"kernels.csv": (fields, rows)}, {}


def run_kernel_convergence(cfg: dict):
    """Monte Carlo kernel error across the width and sample ladders."""
    train, _ = load_data(cfg, cfg["seed"])
    arch = build_arch(cfg, train.n_in, train.n_out)
    records = convergence_sweep(
        arch,
        train.inputs,
        widths=cfg["widths"],
        num_samples_list=cfg["num_samples"],
        seed=cfg["seed"],
        threads=cfg["threads"],
        nngp_estimator=cfg["nngp_estimator"],
    )
    fields = ["width", "num_samples", "frob_err_nngp", "frob_err_ntk", "relative"]
    rows = [
        (r.width, r.num_samples, r.frobenius_error_nngp, r.frobenius_error_ntk, int(r.relative))
        for r in records
    ]
    max_m = max(cfg["num_samples"])
    at_max = [r for r in records if r.num_samples == max_m]
    info = {
        "slope_nngp": fit_loglog_slope(
            [r.width for r in at_max], [r.frobenius_error_nngp for r in at_max]
        ),
        "slope_ntk": fit_loglog_slope(
            [r.width for r in at_max], [r.frobenius_error_ntk for r in at_max]
        ),
    }
    return {"records.csv": (fields, rows)}, info


def run_drift_sweep(cfg: dict):
    """Parameter and kernel drift during training, across widths."""
    train, test = load_data(cfg, cfg["seed"])
    drift_rows = []
    weight_rows = []
    sup_drift = []
    for width in cfg["widths"]:
        arch = build_arch(cfg, train.n_in, train.n_out, width=width)
        eta = resolve_eta(cfg, arch, train)
        params = init_params(arch, cfg["seed"])
        opt = _optimizer(cfg, eta, snapshot_params=True)
        traj = train_network(arch, params, train, test, opt)
        report = drift_metrics(arch, traj, train)
        for i, step in enumerate(report.steps):
            drift_rows.append(
                (
                    width,
                    int(step),
                    report.param_scaled[i],
                    report.ntk_abs[i],
                    report.ntk_rel[i],
                    report.nngp_rel[i],
                )
            )
            for layer, val in enumerate(report.weight_rel[i]):
                weight_rows.append((width, int(step), layer, val))
        sup_drift.append(float(report.ntk_rel.max()))
    info = {}
    if len(cfg["widths"]) >= 2:
        info["slope_sup_ntk_drift"] = fit_loglog_slope(cfg["widths"], sup_drift)
    return {
        "drift.csv": (
            ["width", "step", "param_scaled", "ntk_abs", "ntk_rel", "nngp_rel"],
            drift_rows,
        ),
        "weight_drift.csv": (["width", "step", "layer", "rel_change"], weight_rows),
    }, info


def _closed_form_comparison(arch, params, train, test, eta, opt):
    """Train the network and evaluate its linearization in closed form."""
    traj = train_network(arch, params, train, test, opt)
    theta = empirical_ntk_direct(arch, params, train.inputs)
    theta_cross = empirical_ntk_direct(arch, params, test.inputs, train.inputs)
    prob = DynamicsProblem(
        theta_train=theta,
        theta_cross=theta_cross,
        y=train.labels,
        f0_train=forward(arch, params, train.inputs),
        f0_test=forward(arch, params, test.inputs),
        eta=eta,
        time_mode=DISCRETE,
    )
    closed = lin_mse_dynamics(prob, traj.steps)
    return traj, closed


def run_train_compare(cfg: dict):
    """Actual training vs closed-form linearized dynamics at one width."""
    train, test = load_data(cfg, cfg["seed"])
    if test is None:
        raise ConfigError("train-compare needs data.test_count > 0")
    arch = build_arch(cfg, train.n_in, train.n_out)
    eta = resolve_eta(cfg, arch, train)
    params = init_params(arch, cfg["seed"])
    traj, closed = _closed_form_comparison(
        arch, params, train, test, eta, _optimizer(cfg, eta)
    )
    rows = []
    for i, step in enumerate(traj.steps):
        diff_tr = traj.train_outputs[i] - closed.f_train[i]
        diff_te = traj.test_outputs[i] - closed.f_test[i]
        lin_tr_loss = 0.5 * float(np.mean(np.sum((closed.f_train[i] - train.labels) ** 2, axis=1)))
        lin_te_loss = 0.5 * float(np.mean(np.sum((closed.f_test[i] - test.labels) ** 2, axis=1)))
        rows.append(
            (
                int(step),
                traj.train_loss[i],
                lin_tr_loss,
                traj.test_loss[i],
                lin_te_loss,
                traj.train_accuracy[i],
                traj.test_accuracy[i],
                float(np.sqrt(np.mean(diff_tr**2))),
                float(np.sqrt(np.mean(diff_te**2))),
                float(np.abs(diff_tr).max()),
                float(np.abs(diff_te).max()),
            )
        )
    fields = [
        "step",
        "train_loss_network",
        "train_loss_linearized",
        "test_loss_network",
        "test_loss_linearized",
        "train_accuracy",
        "test_accuracy",
        "rmse_train",
        "rmse_test",
        "maxabs_train",
        "maxabs_test",
    ]
    return {"curves.csv": (fields, rows)}, {"eta": eta}


def run_error_vs_width(cfg: dict):
    """Sup discrepancy between network and linearization across widths."""
    train, test = load_data(cfg, cfg["seed"])
    if test is None:
        raise ConfigError("error-vs-width needs data.test_count > 0")
    rows = []
    sups = []
    for width in cfg["widths"]:
        arch = build_arch(cfg, train.n_in, train.n_out, width=width)
        eta = resolve_eta(cfg, arch, train)
        params = init_params(arch, cfg["seed"])
        traj, closed = _closed_form_comparison(
            arch, params, train, test, eta, _optimizer(cfg, eta)
        )
        sup = max(
            float(np.abs(traj.train_outputs - closed.f_train).max()),
            float(np.abs(traj.test_outputs - closed.f_test).max()),
        )
        final_rmse_te = float(
            np.sqrt(np.mean((traj.test_outputs[-1] - closed.f_test[-1]) ** 2))
        )
        rows.append((width, sup, final_rmse_te))
        sups.append(sup)
    info = {}
    if len(cfg["widths"]) >= 2:
        info["slope_sup_vs_width"] = fit_loglog_slope(cfg["widths"], sups)
    return {"error_vs_width.csv": (["width", "sup_diff", "final_rmse_test"], rows)}, info


def run_predictive_distribution(cfg: dict):
    """Ensemble of trained networks vs the analytic output distribution.

    Test inputs interpolate between the first two training points with
    opposite labels; the ensemble is compared against the training-time
    Gaussian moments and the readout-only (posterior-interpolating) ones.
    """
    train, _ = load_data(cfg, cfg["seed"])
    if train.n_out != 1:
        raise ConfigError("predictive-distribution expects scalar outputs")
    arch = build_arch(cfg, train.n_in, train.n_out)
    eta = resolve_eta(cfg, arch, train)

    pos = int(np.argmax(train.labels[:, 0] > 0))
    neg = int(np.argmax(train.labels[:, 0] < 0))
    line = dataio.interpolate_line(
        train.inputs[pos], train.inputs[neg], cfg["num_alphas"]
    )
    alphas = np.linspace(0.0, 1.0, cfg["num_alphas"])

    steps = cfg["opt"]["steps"]
    record = sorted(set(snapshot_steps(steps)) | {0, steps})
    seeds = [cfg["seed"] + 1000 * m for m in range(cfg["ensemble"])]
    dtype = np.float32 if cfg["dtype"] == "float32" else np.float64
    ens = train_ensemble_gd(
        arch, seeds, train, line, eta, steps, record,
        dtype=dtype, backend=cfg["backend"],
    )

    theta_tr, k_tr = ntk_kernel(arch, train.inputs)
    theta_cr, k_cr = ntk_kernel(arch, line, train.inputs)
    _, k_te = ntk_kernel(arch, line)
    prob = DynamicsProblem(
        theta_train=theta_tr,
        theta_cross=theta_cr,
        k_train=k_tr,
        k_cross=k_cr,
        k_test=k_te,
        y=train.labels,
        eta=eta,
        time_mode=DISCRETE,
    )
    moments = ntk_gp_moments(prob, record)
    readout = readout_gp_moments(
        k_tr, k_cr, k_te, train.labels, eta, [float(s) for s in record]
    )

    band_rows = []
    member_rows = []
    for ti, step in enumerate(record):
        ens_vals = ens.test_outputs[:, ti, :, 0]  # (members, alphas)
        mom = moments[ti]
        ro = readout[ti]
        for ai in range(len(alphas)):
            band_rows.append(
                (
                    int(step),
                    ai,
                    alphas[ai],
                    mom.mean[ai, 0],
                    float(np.sqrt(max(mom.covariance[ai, ai], 0.0))),
                    ro.mean[ai, 0],
                    float(np.sqrt(max(ro.covariance[ai, ai], 0.0))),
                    float(ens_vals[:, ai].mean()),
                    float(ens_vals[:, ai].std(ddof=1)),
                )
            )
            for mi in range(ens_vals.shape[0]):
                member_rows.append((int(step), ai, mi, float(ens_vals[mi, ai])))
    fields = [
        "step",
        "alpha_index",
        "alpha",
        "pred_mean",
        "pred_std",
        "readout_mean",
        "readout_std",
        "ensemble_mean",
        "ensemble_std",
    ]
    return {
        "band.csv": (fields, band_rows),
        "ensemble.csv": (["step", "alpha_index", "member", "output"], member_rows),
    }, {"eta": eta, "record_steps": [int(s) for s in record]}


def run_readout_gp(cfg: dict):
    """Readout-only training distribution interpolating prior to posterior."""
    train, test = load_data(cfg, cfg["seed"])
    if test is None:
        raise ConfigError("readout-gp needs data.test_count > 0")
    arch = build_arch(cfg, train.n_in, train.n_out)
    eta = resolve_eta(cfg, arch, train)
    k_tr = nngp_kernel(arch, train.inputs)
    k_cr = nngp_kernel(arch, test.inputs, train.inputs)
    k_te = nngp_kernel(arch, test.inputs)
    times = list(np.geomspace(cfg["t_min"], cfg["t_max"], cfg["num_times"]))
    times = [0.0] + times + [np.inf]
    moments = readout_gp_moments(k_tr, k_cr, k_te, train.labels, eta, times)
    posterior = nngp_posterior(k_tr, k_cr, k_te, train.labels)
    rows = []
    for mom in moments:
        for i in range(test.count):
            rows.append(
                (
                    mom.time,
                    i,
                    mom.mean[i, 0],
                    max(float(mom.covariance[i, i]), 0.0),
                    posterior.mean[i, 0],
                    float(posterior.covariance[i, i]),
                )
            )
    fields = ["time", "test_index", "mean", "variance", "posterior_mean", "posterior_variance"]
    gap = float(np.abs(moments[-1].mean - posterior.mean).max())
    return {"readout.csv": (fields, rows)}, {"eta": eta, "final_gap": gap}


def run_xent_compare(cfg: dict):
    """Integrated cross-entropy dynamics vs direct descent on the linear model."""
    train, _ = load_data(cfg, cfg["seed"])
    arch = build_arch(cfg, train.n_in, train.n_out)
    eta = cfg["opt"]["eta"] if cfg["opt"]["eta"] is not None else 1e-3
    params = init_params(arch, cfg["seed"])
    opt = _optimizer(cfg, eta, loss="xent")
    traj = train_linearized(arch, params, train, None, opt)
    theta = empirical_ntk_direct(arch, params, train.inputs)
    ode = xent_lin_dynamics(
        theta,
        None,
        train.labels,
        forward(arch, params, train.inputs),
        None,
        eta,
        traj.steps.astype(float),
        rtol=1e-9,
        atol=1e-12,
    )
    rows = []
    for i, step in enumerate(traj.steps):
        diff = float(np.abs(traj.train_outputs[i] - ode.f_train[i]).max())
        rows.append(
            (
                int(step),
                diff,
                xent_loss(traj.train_outputs[i], train.labels),
                xent_loss(ode.f_train[i], train.labels),
            )
        )
    fields = ["step", "maxabs_logit_diff", "loss_descent", "loss_ode"]
    sup = max(r[1] for r in rows)
    return {"xent_compare.csv": (fields, rows)}, {"eta": eta, "sup_diff": sup}


def run_momentum_compare(cfg: dict):
    """Discrete momentum iteration vs its continuous second-order limit."""
    train, test = load_data(cfg, cfg["seed"])
    arch = build_arch(cfg, train.n_in, train.n_out)
    params = init_params(arch, cfg["seed"])
    theta = empirical_ntk_direct(arch, params, train.inputs)
    theta_cross = (
        empirical_ntk_direct(arch, params, test.inputs, train.inputs)
        if test is not None
        else None
    )
    f0_tr = forward(arch, params, train.inputs)
    f0_te = forward(arch, params, test.inputs) if test is not None else None
    beta = cfg["opt"]["beta"]
    rows = []
    sups = {}
    for eta in cfg["etas"]:
        horizon = int(round(cfg["time_horizon"] / np.sqrt(eta)))
        stride = max(1, horizon // cfg["num_records"])
        steps = np.arange(0, horizon + 1, stride)
        traj = momentum_lin_dynamics(
            theta, theta_cross, train.labels, f0_tr, f0_te, eta, beta, steps
        )
        f_tr = f0_tr.reshape(-1, 1).copy()
        f_te = None if f0_te is None else f0_te.reshape(-1, 1).copy()
        th = theta.base
        thc = None if theta_cross is None else theta_cross.base
        y = train.labels.reshape(-1, 1)
        prev_tr = f_tr.copy()
        prev_te = None if f_te is None else f_te.copy()
        keep = {0: (f_tr.copy(), None if f_te is None else f_te.copy())}
        for i in range(1, horizon + 1):
            res = f_tr - y
            new_tr = f_tr - eta * th @ res + beta * (f_tr - prev_tr)
            new_te = None if f_te is None else f_te - eta * thc @ res + beta * (f_te - prev_te)
            prev_tr, prev_te = f_tr, f_te
            f_tr, f_te = new_tr, new_te
            if i % stride == 0:
                keep[i] = (f_tr.copy(), None if f_te is None else f_te.copy())
        sup = 0.0
        for idx, step in enumerate(steps):
            d_tr, d_te = keep[int(step)]
            diff = float(np.abs(traj.f_train[idx].reshape(-1, 1) - d_tr).max())
            if d_te is not None:
                diff = max(diff, float(np.abs(traj.f_test[idx].reshape(-1, 1) - d_te).max()))
            rows.append((eta, int(step), float(step * np.sqrt(eta)), diff))
            sup = max(sup, diff)
        sups[eta] = sup
    fields = ["eta", "step", "time", "maxabs_diff"]
    return {"momentum_compare.csv": (fields, rows)}, {"sup_diff_by_eta": sups}
