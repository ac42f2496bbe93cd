import numpy as np
import pytest

from settlerpinn import estimation as es
from settlerpinn import mlp
from settlerpinn.core import ConfigurationError, SettlerConfig

CFG = SettlerConfig()
HS = CFG.scaling.h_scale


def linear_surrogate(A=np.eye(2), b=(0.0, 0.0), M=((0.8, 0.1), (0.2, 0.9)), m_u=(0.0, 0.5), c=(0.0, 0.0)):
    """Exact affine surrogate without hidden layers (scaled units).

    Heights after any time: ``A x + b``; outlet flows: ``M x + m_u u + c``;
    internal flows zero.  Inputs are normalized with lb = 0, ub = 2, so the
    network sees ``x - 1``.
    """
    coef = np.zeros((4, 6))
    coef[1:3, 0:2] = np.asarray(A, dtype=float).T
    coef[1:3, 2:4] = np.asarray(M, dtype=float).T
    coef[3, 2:4] = m_u
    const = np.zeros(6)
    const[0:2], const[2:4] = b, c
    m = mlp.xavier_init((4, 6), 0, input_lb=np.zeros(4), input_ub=2 * np.ones(4), output_activation="identity",
                        output_lo=np.zeros(6), output_hi=np.ones(6))
    # y = (x - 1) @ coef + bias  must equal  x @ coef + const
    return mlp.MlpModel(**{**m.__dict__, "weights": (coef,), "biases": (const + coef.sum(axis=0),)})


def random_spd(rng, scale=1.0):
    L = rng.normal(size=(2, 2))
    return scale * (L @ L.T + 1e-3 * np.eye(2))


# -- filter algebra ---------------------------------------------------------------


def test_joseph_update_symmetric_and_psd():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        P = random_spd(rng, 10.0 ** rng.uniform(-8, 0))
        H = rng.normal(size=(2, 2)) * 10.0 ** rng.uniform(-2, 1)
        R = np.diag(rng.uniform(1e-9, 1e-3, 2))
        K = rng.normal(size=(2, 2)) * 10.0 ** rng.uniform(-3, 2)
        out = es.joseph_update(P, K, H, R)
        assert np.max(np.abs(out - out.T)) < 1e-12
        assert np.linalg.eigvalsh(out).min() >= -1e-12 * max(1.0, np.abs(out).max())


def test_joseph_equals_short_form_at_optimal_gain():
    rng = np.random.default_rng(1)
    for _ in range(50):
        P, H, R = random_spd(rng), rng.normal(size=(2, 2)), random_spd(rng, 0.1)
        K = P @ H.T @ np.linalg.inv(H @ P @ H.T + R)
        assert np.allclose(es.joseph_update(P, K, H, R), (np.eye(2) - K @ H) @ P, rtol=1e-9, atol=1e-12)


def test_solve_2x2_against_numpy_and_conditioning():
    rng = np.random.default_rng(2)
    for _ in range(100):
        A, B = random_spd(rng), rng.normal(size=(2, 2))
        assert np.allclose(es.solve_2x2(A, B), B @ np.linalg.inv(A), rtol=1e-10)
    with pytest.raises(np.linalg.LinAlgError):
        es.solve_2x2(np.ones((2, 2)), np.eye(2))
    with pytest.raises(np.linalg.LinAlgError):
        es.solve_2x2(np.diag([1.0, 1e-14]), np.eye(2))


def test_filter_defaults():
    fs = es.FilterState.initial([0.4, 0.2], CFG)
    assert np.array_equal(fs.P, np.diag([1e-4, 1e-4]))
    assert np.array_equal(fs.R, 2.5e-7 * np.eye(2))
    assert CFG.filter.w_attenuation == 100.0 and CFG.filter.n_init_samples == 100
    with pytest.raises(ValueError):
        es.FilterState([np.nan, 0.2], np.eye(2))


def test_predict_with_identity_surrogate():
    m = linear_surrogate()
    rng = np.random.default_rng(3)
    P, W = random_spd(rng, 1e-4), random_spd(rng, 1e-6)
    out, clipped = es.predict(es.FilterState([0.4, 0.2], P, W), m, 0.3)
    assert np.allclose(out.x, [0.4, 0.2], rtol=0, atol=1e-15) and not clipped
    assert np.allclose(out.P, P + W, rtol=1e-14, atol=0)
    same, _ = es.predict(es.FilterState([0.4, 0.2], P), m, 0.3)
    assert np.allclose(same.P, P, rtol=1e-14, atol=0)


def test_predict_clips_into_bounds():
    m = linear_surrogate(b=(0.5, 0.0))
    out, clipped = es.predict(es.FilterState([0.4, 0.2], np.eye(2) * 1e-4), m, 0.3, es.state_bounds(CFG))
    assert clipped and out.x[0] == es.state_bounds(CFG)[1][0]


def test_transition_and_measurement_jacobians():
    A = [[0.9, 0.05], [0.02, 0.97]]
    M = [[0.8, 0.1], [0.2, 0.9]]
    m = linear_surrogate(A=A, M=M)
    x, F = es.transition(m, np.array([0.4, 0.2]), 0.3)
    assert np.allclose(F, A, atol=1e-14) and np.allclose(x, np.dot(A, [0.4, 0.2]), atol=1e-14)
    y, H = es.measurement(m, np.array([0.4, 0.2]), 0.3)
    assert np.allclose(H, M, atol=1e-14) and np.allclose(y, np.dot(M, [0.4, 0.2]) + [0.0, 0.15], atol=1e-14)


def test_zero_gain_update_is_a_no_op():
    m = linear_surrogate()
    fs = es.FilterState([0.4, 0.2], np.zeros((2, 2)))
    out, _, applied = es.update(fs, m, 0.3, [1.0, 1.0])
    assert applied and np.array_equal(out.x, fs.x) and np.array_equal(out.P, fs.P)
    assert np.array_equal(out.K, np.zeros((2, 2)))


def test_gain_vanishes_as_measurement_noise_grows():
    m = linear_surrogate()
    P = np.diag([1e-4, 1e-4])
    norms = []
    y_hat = es.measurement(m, np.array([0.4, 0.2]), 0.3, jacobian=False)
    for f in (1.0, 1e2, 1e4, 1e6):
        fs = es.FilterState([0.4, 0.2], P, R=f * 2.5e-7 * np.eye(2))
        # innovation of a tenth of the default sensor standard deviation
        out, _, _ = es.update(fs, m, 0.3, y_hat + 5e-5)
        norms.append(np.linalg.norm(out.K))
        if f == 1e6:
            assert np.linalg.norm(out.x - fs.x) * HS < 1e-8
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_update_skipped_when_innovation_covariance_singular():
    m = linear_surrogate(M=[[1.0, 1.0], [1.0, 1.0]])
    fs = es.FilterState([0.4, 0.2], np.eye(2), R=np.zeros((2, 2)))
    out, _, applied = es.update(fs, m, 0.3, [0.7, 0.7])
    assert not applied and np.array_equal(out.x, fs.x)


# -- adaptive process noise -------------------------------------------------------


def test_adaptive_W_two_member_hand_case():
    a = linear_surrogate(b=(0.0, 0.050 / HS - 0.2))
    b = linear_surrogate(b=(0.0, 0.052 / HS - 0.2))
    W = es.adaptive_W([a, b], np.array([0.4, 0.2]), 0.3) * HS**2
    assert W[1, 1] == pytest.approx(2e-8, rel=1e-9)
    assert abs(W[0, 0]) < 1e-20 and abs(W[0, 1]) < 1e-20


def test_adaptive_W_identical_members_and_errors():
    m = linear_surrogate(A=[[0.9, 0.0], [0.1, 0.95]])
    assert np.array_equal(es.adaptive_W([m, m, m], np.array([0.4, 0.2]), 0.3), np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        es.adaptive_W([m], np.array([0.4, 0.2]), 0.3)


def test_adaptive_W_is_symmetric_psd():
    rng = np.random.default_rng(4)
    for _ in range(20):
        models = [linear_surrogate(A=np.eye(2) + 0.05 * rng.normal(size=(2, 2)), b=0.01 * rng.normal(size=2))
                  for _ in range(int(rng.integers(2, 6)))]
        W = es.adaptive_W(models, rng.uniform(0.2, 0.5, 2), 0.3)
        assert np.allclose(W, W.T, atol=1e-18) and np.linalg.eigvalsh(W).min() >= -1e-15


# -- initial state search and open-loop rollout -----------------------------------


def test_initial_state_search_single_sample_and_exact_model():
    bounds = es.state_bounds(CFG)
    lb, ub = bounds
    m = linear_surrogate()
    draw = lb + np.random.default_rng(5).random((1, 2)) * (ub - lb)
    assert np.array_equal(es.initial_state_search(m, [0.0, 0.0], 0.3, 1, seed=5, bounds=bounds), draw[0])
    cands = lb + np.random.default_rng(6).random((100, 2)) * (ub - lb)
    truth = cands[37]
    y0 = np.dot([[0.8, 0.1], [0.2, 0.9]], truth) + [0.0, 0.15]
    found = es.initial_state_search([m, m], y0, 0.3, 100, seed=6, bounds=bounds)
    assert np.array_equal(found, truth)
    with pytest.raises(ConfigurationError):
        es.initial_state_search(m, y0, 0.3, 0, bounds=bounds)


def test_chain_forward_basics():
    a = linear_surrogate(A=[[0.99, 0.0], [0.0, 1.0]], b=(0.004, 0.001))
    b = linear_surrogate(A=[[0.98, 0.01], [0.0, 1.0]], b=(0.008, 0.0))
    x0 = np.array([0.4, 0.2])
    one = es.chain_forward(a, x0, [0.3])
    assert np.array_equal(one.members[0, 1], es.transition(a, x0, 0.3, jacobian=False))
    ro = es.chain_forward([a, b], x0, np.full(20, 0.3))
    assert ro.members.shape == (2, 21, 2)
    assert np.array_equal(ro.mean, (ro.members[0] + ro.members[1]) / 2)
    x = x0
    for _ in range(20):
        x = np.dot([[0.99, 0.0], [0.0, 1.0]], x) + [0.004, 0.001]
    assert np.allclose(ro.members[0, -1], x, atol=1e-13)
    drift = es.chain_forward(linear_surrogate(b=(0.0, 0.05)), x0, np.full(10, 0.3), es.state_bounds(CFG))
    assert drift.clipped.any() and np.all(drift.members[0, :, 1] <= es.state_bounds(CFG)[1][1])


# -- filter loop ------------------------------------------------------------------


def kalman_oracle(A, b, M, m_u, c, u, y, x0, P0, W, R):
    """Textbook linear Kalman filter with the measurement taken at the previous control."""
    A, M = np.asarray(A), np.asarray(M)
    x, P = np.asarray(x0, float), np.asarray(P0, float)
    out = [x]
    for k in range(1, len(u)):
        x = A @ x + b
        P = A @ P @ A.T + W
        S = M @ P @ M.T + R
        K = P @ M.T @ np.linalg.inv(S)
        x = x + K @ (y[k] - (M @ x + np.asarray(m_u) * u[k - 1] + c))
        I_KH = np.eye(2) - K @ M
        P = I_KH @ P @ I_KH.T + K @ R @ K.T
        out.append(x)
    return np.array(out)


def linear_twin(n=120, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    A = np.array([[0.97, 0.01], [0.02, 0.98]])
    b = np.array([0.012, 0.003])
    M = np.array([[0.8, 0.1], [0.2, 0.9]])
    m_u, c = np.array([0.0, 0.5]), np.array([0.01, 0.0])
    u = 0.3 + 0.05 * np.sin(np.arange(n) / 10)
    x = np.empty((n, 2))
    x[0] = [0.42, 0.18]
    for k in range(1, n):
        x[k] = A @ x[k - 1] + b
    y = np.empty((n, 2))
    y[0] = M @ x[0] + m_u * u[0] + c
    for k in range(1, n):
        y[k] = M @ x[k] + m_u * u[k - 1] + c
    y += noise * rng.normal(size=y.shape)
    return dict(A=A, b=b, M=M, m_u=m_u, c=c), u, y, x


def test_single_member_filter_equals_linear_kalman():
    p, u, y, _ = linear_twin(noise=5e-4)
    m = linear_surrogate(**p)
    W = 1e-7 * np.eye(2)
    est = es.run_filter(m, u, y, CFG, x0=[0.38, 0.25], W=W, clip_bounds=None)
    ref = kalman_oracle(**p, u=u, y=y, x0=[0.38, 0.25], P0=np.diag(CFG.filter.p0), W=W, R=CFG.filter.r * np.eye(2))
    assert np.allclose(est.mean, ref, rtol=0, atol=1e-12)
    with pytest.raises(ConfigurationError):
        es.run_filter(m, u, y, CFG)


def test_zero_noise_exact_surrogate_tracks_truth():
    p, u, y, x = linear_twin(n=200)
    m = linear_surrogate(**p)
    est = es.run_filter([m, m], u, y, CFG, seed=1, clip_bounds=None)
    err = np.abs(est.mean - x) * HS
    assert err[50:].max() < 1e-3
    r = est.members[0]
    innov = r.y_meas[100:] - r.y_pred[100:]
    assert np.sqrt(np.mean(innov**2)) < 1e-6
    for k in range(1, 199):
        assert covariance_ok_strict(r.P[k])
        # the prediction for k+1 starts exactly from the posterior at k
        assert np.array_equal(r.x_prior[k + 1], es.transition(m, r.x_post[k], u[k], jacobian=False))


def covariance_ok_strict(P):
    return np.max(np.abs(P - P.T)) < 1e-12 and np.linalg.eigvalsh(P).min() >= -1e-12


def test_run_filter_is_deterministic():
    p, u, y, _ = linear_twin(noise=1e-3)
    models = [linear_surrogate(**p), linear_surrogate(**{**p, "b": p["b"] * 1.05})]
    a = es.run_filter(models, u, y, CFG, seed=3)
    b = es.run_filter(models, u, y, CFG, seed=3)
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.members[1].P, b.members[1].P)
    assert a.active.all()
    with pytest.raises(ConfigurationError):
        es.run_filter(models, u, y[:-1], CFG)


def test_failing_member_is_dropped_from_the_mean():
    p, u, y, _ = linear_twin(n=30)
    good = linear_surrogate(**p)
    bad = linear_surrogate(**p)
    w = bad.weights[0].copy()
    w[1, 0] = np.inf
    bad = mlp.MlpModel(**{**bad.__dict__, "weights": (w,)})
    est = es.run_filter([good, good, bad], u, y, CFG, x0=[0.42, 0.18], clip_bounds=None)
    assert est.members[2].failed_at == 1
    assert not est.active[1:, 2].any() and est.active[1:, :2].all()


def test_pinn_one_second_prediction_matches_mechanistic_step(desk):
    from conftest import twin_trajectory
    traj = twin_trajectory(desk.config, 1)
    qs = desk.config.scaling.q_scale
    models = [r.model for r in desk.two_stage]
    worst = 0.0
    for k in range(0, 590, 30):
        x = np.array([traj.h_hp[k], traj.h_dp[k]]) / HS
        pred = np.mean([es.transition(m, x, traj.q_in[k] / qs, jacobian=False) for m in models], axis=0)
        worst = max(worst, np.abs(pred * HS - [traj.h_hp[k + 1], traj.h_dp[k + 1]]).max())
    assert worst < 1e-3


# -- outlet DPZ regression --------------------------------------------------------


def test_outlet_identity_and_constant_fits():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.03, 0.07, 400)
    fit = es.outlet_dpz_train(x, x, seed=0)
    assert fit.val_rmse / HS < 1e-3 and fit.epochs <= 1000
    assert es.outlet_dpz_predict(fit.model, [0.05]).values[0] == pytest.approx(0.05, abs=1e-3)
    assert fit.model.layer_dims == (1, 16, 8, 1) and fit.model.output_activation == "identity"
    const = es.outlet_dpz_train(x, np.full_like(x, 0.045), seed=1)
    assert np.abs(es.outlet_dpz_predict(const.model, x).values - 0.045).max() < 1e-3


def test_outlet_prediction_flags_and_edge_cases():
    x = np.linspace(0.03, 0.07, 100)
    fit = es.outlet_dpz_train(x, 1.1 * x, max_epochs=50)
    pred = es.outlet_dpz_predict(fit.model, [0.02, 0.05, 0.08])
    assert pred.extrapolated.tolist() == [True, False, True]
    empty = es.outlet_dpz_predict(fit.model, [])
    assert empty.values.shape == (0,) and empty.extrapolated.shape == (0,)
    with pytest.raises(ConfigurationError):
        es.outlet_dpz_train(x[:40], x[:40])
    with pytest.raises(ConfigurationError):
        es.outlet_dpz_train(x, x[:-1])


def test_outlet_small_validation_set_disables_early_stopping(caplog):
    x = np.linspace(0.03, 0.07, 60)
    fit = es.outlet_dpz_train(x, x, val_fraction=0.1, max_epochs=40)
    assert not fit.early_stopped and fit.epochs == 40
    assert "early stopping disabled" in caplog.text
