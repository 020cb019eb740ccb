import numpy as np
import pytest
from scipy.integrate import solve_ivp

from tangentlab.analytic_kernels import KernelMatrix
from tangentlab.dynamics import (
    CONTINUOUS,
    DISCRETE,
    DynamicsProblem,
    decay_factors,
    eta_critical,
    lin_mse_dynamics,
    nngp_posterior,
    ntk_gp_moments,
    phi_factors,
    readout_gp_moments,
    readout_realization,
)
from tangentlab.errors import DegenerateKernel, MissingInitialState


def random_joint_psd(m, p, seed, jitter=1e-3):
    """Random PSD joint kernel over train+test, split into blocks."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m + p, m + p + 3))
    full = a @ a.T / (m + p) + jitter * np.eye(m + p)
    return full[:m, :m], full[m:, :m], full[m:, m:]


def make_problem(m=6, p=3, seed=0, eta=0.5, mode=CONTINUOUS, k_out=1):
    rng = np.random.default_rng(seed)
    th, thc, _ = random_joint_psd(m, p, seed + 1)
    kt, kc, kss = random_joint_psd(m, p, seed + 2)
    return DynamicsProblem(
        theta_train=KernelMatrix(th, k_out),
        theta_cross=KernelMatrix(thc, k_out),
        k_train=KernelMatrix(kt, k_out),
        k_cross=KernelMatrix(kc, k_out),
        k_test=KernelMatrix(kss, k_out),
        y=rng.standard_normal((m, k_out)),
        f0_train=rng.standard_normal((m, k_out)),
        f0_test=rng.standard_normal((p, k_out)),
        eta=eta,
        time_mode=mode,
    )


# ---------------------------------------------------------------------------
# spectral maps
# ---------------------------------------------------------------------------

def test_phi_factors_small_eigenvalue_limit():
    lam = np.array([0.0, 1e-18, 1e-9, 1.0])
    phi = phi_factors(lam, eta=0.3, t=2.0, mode=CONTINUOUS)
    assert phi[0] == pytest.approx(0.6)
    assert phi[1] == pytest.approx(0.6, rel=1e-9)
    assert phi[3] == pytest.approx(-np.expm1(-0.6), rel=1e-12)


def test_phi_factors_discrete():
    lam = np.array([0.0, 0.5, 2.0])
    phi = phi_factors(lam, eta=0.1, t=3, mode=DISCRETE)
    expect = [
        0.3,
        (1 - (1 - 0.05) ** 3) / 0.5,
        (1 - (1 - 0.2) ** 3) / 2.0,
    ]
    assert np.allclose(phi, expect, rtol=1e-12)
    assert np.all(phi_factors(lam, 0.1, 0, DISCRETE) == 0.0)


def test_decay_and_phi_at_infinity():
    lam = np.array([0.0, 1e-16, 0.5])
    assert np.allclose(decay_factors(lam, 0.1, np.inf, CONTINUOUS), [1, 1, 0])
    phi = phi_factors(lam, 0.1, np.inf, DISCRETE)
    assert np.allclose(phi, [0, 0, 2.0])


# ---------------------------------------------------------------------------
# stability threshold
# ---------------------------------------------------------------------------

def test_eta_critical_values():
    assert eta_critical(np.eye(4)) == pytest.approx(1.0)
    assert eta_critical(np.diag([1.0, 3.0])) == pytest.approx(0.5)
    with pytest.raises(DegenerateKernel):
        eta_critical(np.diag([-1.0, 0.5]))


def test_discrete_map_contracts_below_threshold_diverges_above():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((7, 9))
        th = a @ a.T / 7
        lam_max = np.linalg.eigvalsh(th).max()
        r0 = rng.standard_normal(7)
        for factor, should_grow in ((0.99, False), (1.01, True)):
            eta = factor * 2.0 / lam_max
            r = r0.copy()
            for _ in range(600):
                r = r - eta * (th @ r)
            grew = np.linalg.norm(r) > np.linalg.norm(r0)
            assert grew == should_grow


# ---------------------------------------------------------------------------
# linearized squared-loss dynamics
# ---------------------------------------------------------------------------

def test_lin_mse_at_time_zero_and_infinity():
    prob = make_problem(seed=3)
    traj = lin_mse_dynamics(prob, [0.0, 1e8 / prob.eta])
    assert np.abs(traj.f_train[0] - prob.f0_train).max() < 1e-12
    assert np.abs(traj.f_test[0] - prob.f0_test).max() < 1e-12
    assert np.abs(traj.f_train[1] - prob.y).max() < 1e-8


def test_lin_mse_requires_initial_state():
    prob = make_problem(seed=4)
    prob.f0_train = None
    with pytest.raises(MissingInitialState):
        lin_mse_dynamics(prob, [0.0, 1.0])


def test_lin_mse_matches_independent_ode_solver():
    prob = make_problem(m=8, p=4, seed=5, eta=0.7)
    th = prob.theta_train.base
    thc = prob.theta_cross.base
    y = prob.y[:, 0]
    f0 = np.concatenate([prob.f0_train[:, 0], prob.f0_test[:, 0]])

    def rhs(t, f):
        res = f[:8] - y
        return np.concatenate([-prob.eta * th @ res, -prob.eta * thc @ res])

    times = np.linspace(0.0, 5.0 / prob.eta, 7)
    sol = solve_ivp(rhs, (0, times[-1]), f0, t_eval=times, rtol=1e-10, atol=1e-12)
    traj = lin_mse_dynamics(prob, times)
    ours = np.concatenate([traj.f_train[..., 0], traj.f_test[..., 0]], axis=1)
    assert np.abs(ours - sol.y.T).max() < 1e-6


def test_lin_mse_discrete_matches_iterated_map():
    prob = make_problem(m=5, p=2, seed=6, eta=0.3, mode=DISCRETE)
    th = prob.theta_train.base
    thc = prob.theta_cross.base
    f_tr = prob.f0_train.copy()
    f_te = prob.f0_test.copy()
    iterates_tr, iterates_te = [f_tr.copy()], [f_te.copy()]
    for _ in range(40):
        res = f_tr - prob.y
        f_te = f_te - prob.eta * thc @ res
        f_tr = f_tr - prob.eta * th @ res
        iterates_tr.append(f_tr.copy())
        iterates_te.append(f_te.copy())
    steps = [0, 1, 2, 7, 40]
    traj = lin_mse_dynamics(prob, steps)
    for i, s in enumerate(steps):
        assert np.abs(traj.f_train[i] - iterates_tr[s]).max() < 1e-11
        assert np.abs(traj.f_test[i] - iterates_te[s]).max() < 1e-11


def test_discrete_approaches_continuous_at_first_order():
    sup_errors = []
    for eta in (0.05, 0.025):
        prob_d = make_problem(m=6, p=3, seed=7, eta=eta, mode=DISCRETE)
        prob_c = make_problem(m=6, p=3, seed=7, eta=eta, mode=CONTINUOUS)
        steps = np.arange(0, int(np.ceil(5.0 / eta)) + 1, 5)
        d = lin_mse_dynamics(prob_d, steps)
        c = lin_mse_dynamics(prob_c, steps.astype(float))
        err = max(
            np.abs(d.f_train - c.f_train).max(), np.abs(d.f_test - c.f_test).max()
        )
        sup_errors.append(err)
    assert sup_errors[1] <= 0.5 * sup_errors[0] * 1.05  # first order in eta


def test_multioutput_channels_equal_flattened_kron():
    # base-kernel broadcasting across channels == explicit kron expansion
    prob = make_problem(m=4, p=2, seed=8, k_out=3)
    traj = lin_mse_dynamics(prob, [0.0, 0.7, 2.3])
    flat = DynamicsProblem(
        theta_train=KernelMatrix(np.kron(prob.theta_train.base, np.eye(3)), 1),
        theta_cross=KernelMatrix(np.kron(prob.theta_cross.base, np.eye(3)), 1),
        y=prob.y,
        f0_train=prob.f0_train,
        f0_test=prob.f0_test,
        eta=prob.eta,
    )
    traj_flat = lin_mse_dynamics(flat, [0.0, 0.7, 2.3])
    assert np.abs(traj.f_train - traj_flat.f_train).max() < 1e-12
    assert np.abs(traj.f_test - traj_flat.f_test).max() < 1e-12


def test_train_points_self_consistency():
    # evaluating the test-point formula ON the train points reproduces the
    # train formula when the cross kernel is the train kernel itself
    prob = make_problem(m=6, p=3, seed=9)
    prob2 = DynamicsProblem(
        theta_train=prob.theta_train,
        theta_cross=prob.theta_train,
        y=prob.y,
        f0_train=prob.f0_train,
        f0_test=prob.f0_train,
        eta=prob.eta,
    )
    times = [0.0, 0.4, 1.9]
    a = lin_mse_dynamics(prob2, times)
    assert np.abs(a.f_test - a.f_train).max() < 1e-10


# ---------------------------------------------------------------------------
# output-distribution moments
# ---------------------------------------------------------------------------

def test_gp_moments_at_zero_and_infinity():
    prob = make_problem(seed=10)
    m0, minf = ntk_gp_moments(prob, [0.0, np.inf])
    assert np.abs(m0.mean).max() < 1e-12
    assert np.abs(m0.covariance - prob.k_test.base).max() < 1e-12

    # steady state, assembled directly from the inverse
    th = prob.theta_train.base
    a_inf = prob.theta_cross.base @ np.linalg.inv(th)
    mean_ref = a_inf @ prob.y
    cov_ref = (
        prob.k_test.base
        + a_inf @ prob.k_train.base @ a_inf.T
        - a_inf @ prob.k_cross.base.T
        - prob.k_cross.base @ a_inf.T
    )
    assert np.abs(minf.mean - mean_ref).max() < 1e-10
    assert np.abs(minf.covariance - cov_ref).max() < 1e-10


def test_gp_moments_train_mean_reaches_labels():
    prob = make_problem(m=5, p=5, seed=11)
    prob.theta_cross = prob.theta_train
    prob.k_cross = prob.k_train
    prob.k_test = prob.k_train
    (minf,) = ntk_gp_moments(prob, [np.inf])
    assert np.abs(minf.mean - prob.y).max() < 1e-8


def test_gp_moments_covariance_stays_psd():
    prob = make_problem(seed=12, eta=0.8)
    for mom in ntk_gp_moments(prob, np.linspace(0, 20, 15)):
        lam = np.linalg.eigvalsh(mom.covariance)
        assert lam.min() >= -1e-8 * np.trace(mom.covariance)


def test_gp_moments_match_simulated_linear_ensemble():
    # oracle: the dynamics are an affine map of the Gaussian initial outputs,
    # so a big simulated ensemble must reproduce the analytic moments
    m, p = 5, 3
    rng = np.random.default_rng(13)
    a = rng.standard_normal((m + p, m + p + 2))
    k_joint = a @ a.T / (m + p) + 1e-6 * np.eye(m + p)
    b = rng.standard_normal((m + p, m + p + 2))
    th_joint = b @ b.T / (m + p) + 0.05 * np.eye(m + p)
    y = rng.standard_normal((m, 1))
    eta, t = 0.6, 1.7

    prob = DynamicsProblem(
        theta_train=KernelMatrix(th_joint[:m, :m], 1),
        theta_cross=KernelMatrix(th_joint[m:, :m], 1),
        k_train=KernelMatrix(k_joint[:m, :m], 1),
        k_cross=KernelMatrix(k_joint[m:, :m], 1),
        k_test=KernelMatrix(k_joint[m:, m:], 1),
        y=y,
        eta=eta,
    )
    (mom,) = ntk_gp_moments(prob, [t])

    lam, v = np.linalg.eigh(th_joint[:m, :m])
    phi = (1 - np.exp(-eta * lam * t)) / lam
    a_t = th_joint[m:, :m] @ (v * phi) @ v.T
    n = 200_000
    chol = np.linalg.cholesky(k_joint + 1e-10 * np.eye(m + p))
    f0 = chol @ rng.standard_normal((m + p, n))
    f_t = f0[m:] - a_t @ (f0[:m] - y)
    assert np.abs(f_t.mean(axis=1) - mom.mean[:, 0]).max() < 2e-2
    assert np.abs(np.cov(f_t) - mom.covariance).max() < 3e-2


# ---------------------------------------------------------------------------
# posterior and readout-only dynamics
# ---------------------------------------------------------------------------

def test_nngp_posterior_scalar_toy():
    mom = nngp_posterior(
        np.array([[1.0]]), np.array([[0.5]]), np.array([[1.0]]), np.array([2.0])
    )
    assert mom.mean[0, 0] == pytest.approx(1.0, rel=1e-10)
    assert mom.covariance[0, 0] == pytest.approx(0.75, rel=1e-10)


def test_nngp_posterior_interpolates_training_point():
    kt, kc, kss = random_joint_psd(6, 2, seed=14, jitter=0.1)
    y = np.random.default_rng(15).standard_normal((6, 1))
    mom = nngp_posterior(kt, kt[:2, :], kt[:2, :2], y, jitter=0.0)
    assert np.abs(mom.mean - y[:2]).max() < 1e-8
    assert np.abs(np.diag(mom.covariance)).max() < 1e-8


def test_nngp_posterior_independent_test_points():
    kt, _, kss = random_joint_psd(5, 3, seed=16)
    y = np.ones((5, 1))
    mom = nngp_posterior(kt, np.zeros((3, 5)), kss, y)
    assert np.abs(mom.mean).max() == 0.0
    assert np.abs(mom.covariance - kss).max() < 1e-12


def test_readout_moments_prior_posterior_and_monotone_variance():
    kt, kc, kss = random_joint_psd(7, 3, seed=17, jitter=0.05)
    y = np.random.default_rng(18).standard_normal((7, 1))
    eta = 0.5
    times = np.concatenate([[0.0], np.geomspace(0.01, 50, 40), [np.inf]])
    moments = readout_gp_moments(kt, kc, kss, y, eta, times)
    assert np.abs(moments[0].mean).max() < 1e-12
    assert np.abs(moments[0].covariance - kss).max() < 1e-12
    post = nngp_posterior(kt, kc, kss, y, jitter=0.0)
    assert np.abs(moments[-1].mean - post.mean).max() < 1e-8
    assert np.abs(moments[-1].covariance - post.covariance).max() < 1e-8
    variances = np.array([np.diag(m.covariance) for m in moments])
    assert np.all(np.diff(variances, axis=0) <= 1e-10)


def test_readout_realization_limits():
    kt, kc, _ = random_joint_psd(6, 2, seed=19, jitter=0.05)
    rng = np.random.default_rng(20)
    y = rng.standard_normal((6, 1))
    f0_tr = rng.standard_normal((6, 1))
    f0_te = rng.standard_normal((2, 1))
    traj = readout_realization(kt, kc, y, f0_tr, f0_te, eta=0.5, times=[0.0, np.inf])
    assert np.abs(traj.f_test[0] - f0_te).max() < 1e-12
    expect = f0_te - kc @ np.linalg.solve(kt, f0_tr - y)
    assert np.abs(traj.f_test[1] - expect).max() < 1e-8
