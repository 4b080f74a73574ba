import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tustinmpc.estimation import (
    GaussianBelief,
    IllConditionedBeliefError,
    NoiseConfig,
    StateFilter,
    UkfConfig,
    ekf_step,
    extract_model,
    joint_belief,
    jukf_step,
    measurement_update,
    psd_sqrt,
    sigma_points,
    tn_step_last_layer,
    ukf_step,
    unscented_moments,
    unscented_step,
    ut_weights,
    write_trace_csv,
)
from tustinmpc.network import TustinNet, init_model, rollout, save_model, tn_step

H = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])


def random_belief(rng, n, scale=0.1):
    A = rng.normal(0, scale, (n, n))
    return GaussianBelief(rng.normal(0, 0.3, n), A @ A.T + 1e-4 * np.eye(n))


def affine_model(rng):
    """Zero-trunk network with a constant output: an affine Tustin model."""
    Ts = rng.uniform(0.005, 0.02)
    base = init_model(zero=True, Ts=Ts, angle_scale=rng.uniform(1, 4), velocity_scale=rng.uniform(2, 8))
    W = list(base.weights)
    W[5] = rng.normal(0, 0.01, 2)
    return TustinNet(tuple(W), base.Ts, base.angle_scale, base.velocity_scale, base.torque_scale)


def kf_oracle(model, mean, cov, ys, noise: NoiseConfig):
    c = model.Ts * model.Kv
    F = np.eye(4)
    F[0, 1] = F[2, 3] = c
    d = model.weights[5]
    offset = np.array([0.5 * c * d[0], d[0], 0.5 * c * d[1], d[1]])
    Qn = noise.state_cov()
    R = noise.meas_cov(model)
    out = []
    for y in ys:
        mean = F @ mean + offset
        cov = F @ cov @ F.T + Qn
        S = H @ cov @ H.T + R
        K = cov @ H.T @ np.linalg.inv(S)
        mean = mean + K @ (y / model.angle_scale - H @ mean)
        IKH = np.eye(4) - K @ H
        cov = IKH @ cov @ IKH.T + K @ R @ K.T
        out.append((mean, cov))
    return out


# -- unscented transform ------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 4, 7, 206])
def test_weight_sums(n):
    cfg = UkfConfig()
    wm, wc = ut_weights(n, cfg)
    assert wm.sum() == pytest.approx(1.0, abs=1e-10)
    # scaled transform: the zeroth covariance weight carries the extra (1 - alpha^2 + beta)
    assert wc.sum() == pytest.approx(2.0 - cfg.alpha**2 + cfg.beta, abs=1e-10)


def test_ukf_config_validation():
    with pytest.raises(ValueError):
        UkfConfig(alpha=0.0)
    with pytest.raises(ValueError):
        ut_weights(4, UkfConfig(kappa=-4.0))
    assert UkfConfig().lam(4) == pytest.approx(0.25 * 3 - 4)


def test_zero_covariance_points_coincide():
    b = GaussianBelief(np.array([1.0, -2.0, 3.0]), np.zeros((3, 3)))
    X, _, _ = sigma_points(b)
    assert np.array_equal(X, np.tile(b.mean, (7, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 1000))
def test_moments_reconstructed(n, seed):
    rng = np.random.default_rng(seed)
    b = random_belief(rng, n)
    X, wm, wc = sigma_points(b)
    mean, cov = unscented_moments(X, wm, wc)
    assert np.abs(mean - b.mean).max() < 1e-10
    assert np.abs(cov - b.cov).max() < 1e-10


def test_affine_map_exact():
    rng = np.random.default_rng(0)
    b = random_belief(rng, 5)
    A = rng.normal(size=(3, 5))
    c = rng.normal(size=3)
    X, wm, wc = sigma_points(b)
    mean, cov = unscented_moments(X @ A.T + c, wm, wc)
    assert np.abs(mean - (A @ b.mean + c)).max() < 1e-10
    assert np.abs(cov - A @ b.cov @ A.T).max() < 1e-10


def test_psd_sqrt_jitter_and_failure():
    v = np.array([1.0, 1.0])
    P = np.outer(v, v)  # rank one: plain Cholesky fails
    S = psd_sqrt(P)
    assert np.abs(S @ S.T - P).max() < 1e-6
    with pytest.raises(IllConditionedBeliefError):
        psd_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(IllConditionedBeliefError):
        psd_sqrt(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_belief_shape_check():
    with pytest.raises(ValueError):
        GaussianBelief(np.zeros(3), np.eye(2))


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(pos=-1.0)


# -- linear equivalence -----------------------------------------------------------------

def _run(step, model, b, ys, us, noise):
    out = []
    for y, u in zip(ys, us):
        b = step(model, b, u, y, noise)
        out.append(b)
    return out


def test_ukf_ekf_equal_kf_on_linear_systems():
    rng = np.random.default_rng(42)
    for trial in range(20):
        model = affine_model(rng)
        noise = NoiseConfig(pos=10 ** rng.uniform(-8, -5), vel=10 ** rng.uniform(-7, -4), meas=10 ** rng.uniform(-7, -5))
        b0 = random_belief(rng, 4)
        T = 100
        ys = np.cumsum(rng.normal(0, 0.01, (T, 2)), axis=0)
        us = rng.uniform(-5, 5, (T, 2))
        ref = kf_oracle(model, b0.mean, b0.cov, ys, noise)
        ukf = _run(lambda m, b, u, y, nz: ukf_step(m, b, u, y, nz), model, b0, ys, us, noise)
        ekf = _run(ekf_step, model, b0, ys, us, noise)
        for (m_ref, c_ref), bu, be in zip(ref, ukf, ekf):
            assert np.abs(bu.mean - m_ref).max() < 1e-8
            assert np.abs(bu.cov - c_ref).max() < 1e-8
            assert np.abs(be.mean - m_ref).max() < 1e-10
            assert np.abs(be.cov - c_ref).max() < 1e-10
            assert np.abs(bu.mean - be.mean).max() < 1e-8
            assert bu.is_valid() and be.is_valid()


def test_uninformative_measurement():
    rng = np.random.default_rng(1)
    model = init_model(seed=0, hidden=(8, 8))
    prior = random_belief(rng, 4)
    post, nu, S, K = measurement_update(model, prior, [0.3, -0.2], np.eye(2) * 1e12)
    assert np.abs(K).max() < 1e-9
    assert np.abs(post.mean - prior.mean).max() < 1e-9


def test_innovation_is_wrapped():
    model = init_model(zero=True)
    prior = GaussianBelief(np.array([0.99, 0, 0, 0]), np.eye(4) * 1e-2)
    _, nu, _, _ = measurement_update(model, prior, [-np.pi + 0.01, 0.0], np.eye(2) * 1e-4)
    assert abs(nu[0] * np.pi - (0.01 + 0.01 * np.pi)) < 1e-12


def test_non_finite_measurement_rejected():
    model = init_model(zero=True)
    b = GaussianBelief(np.zeros(4), np.eye(4) * 1e-3)
    with pytest.raises(ValueError):
        ukf_step(model, b, [0, 0], [np.nan, 0.0])


@pytest.mark.parametrize("kind", ["ukf", "ekf"])
def test_perfect_model_error_contracts(kind):
    model = init_model(seed=11)
    rng = np.random.default_rng(3)
    U = rng.uniform(-1, 1, (60, 2))
    s_true = np.array([0.05, 0.1, -0.03, -0.05])
    S = rollout(model, s_true, U)
    y = S[:, [0, 2]] * model.angle_scale
    noise = NoiseConfig(pos=0.0, vel=0.0, meas=1e-14)
    wrong = s_true + np.array([0.0, 0.2, 0.0, -0.2])
    filt = StateFilter(kind, model, GaussianBelief(wrong, np.diag([1e-8, 0.1, 1e-8, 0.1])), noise)
    for k in range(50):
        filt.step(U[k], y[k + 1])
        assert filt.belief.is_valid()
    assert np.abs(filt.belief.mean - S[50]).max() < 1e-6


def test_covariance_stays_valid_on_nonlinear_model():
    model = init_model(seed=5)
    rng = np.random.default_rng(4)
    b = GaussianBelief(np.zeros(4), np.eye(4) * 1e-2)
    noise = NoiseConfig(pos=1e-6, vel=1e-5)
    for k in range(100):
        u = rng.uniform(-5, 5, 2)
        b = ukf_step(model, b, u, rng.normal(0, 0.3, 2), noise)
        assert b.is_valid()


# -- joint filter ---------------------------------------------------------------------

def test_last_layer_substitution_matches_model():
    model = init_model(seed=2, hidden=(7, 6))
    rng = np.random.default_rng(0)
    S = rng.normal(size=(5, 4))
    Psi = rng.normal(size=(5, model.n_last))
    out = tn_step_last_layer(model, S, np.array([0.3, -0.1]), Psi)
    for i in range(5):
        ref = tn_step(model.with_last_layer(Psi[i]), S[i], [0.3, -0.1])
        assert np.allclose(out[i], ref, atol=1e-14)


def test_frozen_parameters_reduce_to_state_ukf():
    model = init_model(seed=1)
    rng = np.random.default_rng(5)
    noise = NoiseConfig(pos=1e-6, vel=1e-5, param=0.0)
    sb = GaussianBelief(np.array([0.02, 0.0, -0.03, 0.0]), np.diag([1e-4, 1e-3, 1e-4, 1e-3]))
    jb = joint_belief(model, sb, 0.0)
    assert jb.n == 206
    for k in range(30):
        u, y = rng.uniform(-1, 1, 2), rng.normal(0, 0.05, 2)
        sb = ukf_step(model, sb, u, y, noise)
        jb = jukf_step(model, jb, u, y, noise)
        assert np.abs(jb.mean[:4] - sb.mean).max() < 1e-8
        assert np.abs(jb.cov[:4, :4] - sb.cov).max() < 1e-8
    assert np.array_equal(jb.mean[4:], model.last_layer())


def test_joint_dimension_checked():
    model = init_model(seed=0)
    with pytest.raises(ValueError):
        jukf_step(model, GaussianBelief(np.zeros(4), np.eye(4)), [0, 0], [0, 0])


def test_scalar_parameter_toy_converges():
    psi_true = 0.99
    x = 1.0
    xs = [x]
    for _ in range(200):
        x = psi_true * x
        xs.append(x)
    xs = np.array(xs)
    b = GaussianBelief(np.array([1.0, 0.5]), np.diag([0.0, 0.25]))

    def f(X):
        return np.column_stack([X[:, 1] * X[:, 0], X[:, 1]])

    Qn = np.diag([0.0, 0.0])
    R = np.array([[1e-12]])
    cfg = UkfConfig(alpha=0.5, beta=2.0, kappa=0.0)
    hit = None
    for k in range(1, 201):
        b = unscented_step(f, b, [xs[k]], Qn, R, [0], cfg)
        ls = np.dot(xs[:k], xs[1:k + 1]) / np.dot(xs[:k], xs[:k])  # least-squares oracle
        if hit is None and abs(b.mean[1] - psi_true) < 0.01 * psi_true:
            hit = k
    assert ls == pytest.approx(psi_true, rel=1e-12)
    assert hit is not None and hit <= 200
    assert abs(b.mean[1] - ls) < 0.01 * ls


def test_extract_model_round_trip(tmp_path):
    model = init_model(seed=3)
    b = joint_belief(model, GaussianBelief(np.zeros(4), np.eye(4) * 1e-3), 1e-6)
    same = extract_model(model, b)
    save_model(model, tmp_path / "a.json")
    save_model(same, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    psi = model.last_layer() + 0.01
    b.mean[4:] = psi
    adapted = extract_model(model, b)
    assert np.array_equal(adapted.last_layer(), psi)
    assert np.array_equal(joint_belief(adapted, GaussianBelief(np.zeros(4), np.eye(4)), 0.0).mean[4:], psi)
    U = np.zeros((20, 2))
    s0 = np.array([0.1, 0, 0, 0])
    assert not np.allclose(rollout(adapted, s0, U), rollout(model, s0, U))


def test_state_filter_wrapper(tmp_path):
    model = init_model(seed=0, hidden=(8, 8))
    with pytest.raises(ValueError):
        StateFilter("pf", model, GaussianBelief(np.zeros(4), np.eye(4)))
    f = StateFilter("jukf", model, joint_belief(model, GaussianBelief(np.zeros(4), np.eye(4) * 1e-3), 1e-6),
                    NoiseConfig(param=1e-8))
    f.step([0.1, 0.0], [0.01, 0.0])
    assert f.state.n == 4
    assert f.current_model.n_last == model.n_last
    t = np.arange(3) * 0.01
    write_trace_csv(tmp_path / "trace.csv", t, np.zeros((3, 4)), np.ones((3, 4)), np.zeros((3, 2)))
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["t", "x_hat0"] and len(lines) == 4
